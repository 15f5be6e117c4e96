//! Name-keyed construction of backbones.
//!
//! | name              | backbone                                              |
//! |-------------------|-------------------------------------------------------|
//! | `toy`             | [`ToyBackbone`] seeded from the run seed              |
//! | `scripted:<path>` | [`ScriptedBackbone`] loaded from a fixture file       |
//! | `viscot-stub`     | placeholder grounding adapter (`stub-adapters` only)  |
//! | `llava-stub`      | placeholder answer adapter (`stub-adapters` only)     |

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scripted::ScriptedBackbone;
use super::tokenizer::{ANSWER_VOCAB_SIZE, BOX_VOCAB_SIZE};
use super::toy::ToyBackbone;
use super::{Backbone, BackboneKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BackboneSpec {
    Toy,
    Scripted(PathBuf),
    VisCotStub,
    LlavaStub,
}

impl FromStr for BackboneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "viscot-stub" => Ok(Self::VisCotStub),
            "llava-stub" => Ok(Self::LlavaStub),
            _ => match s.strip_prefix("scripted:") {
                Some(path) if !path.is_empty() => Ok(Self::Scripted(PathBuf::from(path))),
                _ => Err(Error::UnknownBackbone(s.to_string())),
            },
        }
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy => f.write_str("toy"),
            Self::Scripted(p) => write!(f, "scripted:{}", p.display()),
            Self::VisCotStub => f.write_str("viscot-stub"),
            Self::LlavaStub => f.write_str("llava-stub"),
        }
    }
}

impl From<BackboneSpec> for String {
    fn from(s: BackboneSpec) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for BackboneSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Builds the named backbone for `kind`. Toy backbones use the reference
/// vocabulary of their kind.
pub fn build_backbone(
    spec: &BackboneSpec,
    kind: BackboneKind,
    seed: u64,
    embed_dim: usize,
) -> Result<Arc<dyn Backbone>> {
    match spec {
        BackboneSpec::Toy => {
            let vocab = match kind {
                BackboneKind::Grounding => BOX_VOCAB_SIZE,
                BackboneKind::Answer => ANSWER_VOCAB_SIZE,
            };
            Ok(Arc::new(ToyBackbone::new(seed, vocab, embed_dim, kind)?))
        }
        BackboneSpec::Scripted(path) => {
            let m = ScriptedBackbone::load(path)?;
            if m.descriptor().kind != kind {
                return Err(Error::Config(format!(
                    "{spec} is a {} backbone, expected {kind}",
                    m.descriptor().kind
                )));
            }
            Ok(Arc::new(m))
        }
        BackboneSpec::VisCotStub | BackboneSpec::LlavaStub => stub(spec, kind),
    }
}

#[cfg(not(feature = "stub-adapters"))]
fn stub(spec: &BackboneSpec, _kind: BackboneKind) -> Result<Arc<dyn Backbone>> {
    Err(Error::Unavailable(spec.to_string()))
}

#[cfg(feature = "stub-adapters")]
fn stub(spec: &BackboneSpec, kind: BackboneKind) -> Result<Arc<dyn Backbone>> {
    Ok(Arc::new(stub_adapter::StubAdapter::new(spec.to_string(), kind)))
}

/// Placeholder adapters for checkpoint-backed models. They describe
/// themselves but refuse to run; a real adapter implements the same trait
/// with its own tokenizer.
#[cfg(feature = "stub-adapters")]
mod stub_adapter {
    use ndarray::Array2;

    use super::super::{Backbone, BackboneDescriptor, BackboneKind, DecodeState};
    use crate::error::{Error, Result};
    use crate::geometry::Image;
    use crate::prompt::SoftPrompt;

    pub struct StubAdapter {
        descriptor: BackboneDescriptor,
    }

    impl StubAdapter {
        pub fn new(name: String, kind: BackboneKind) -> Self {
            Self {
                descriptor: BackboneDescriptor {
                    name,
                    kind,
                    vocab_size: 2,
                    embed_dim: 1,
                    fingerprint: String::new(),
                    input_resolution: None,
                },
            }
        }
    }

    impl Backbone for StubAdapter {
        fn descriptor(&self) -> &BackboneDescriptor {
            &self.descriptor
        }

        fn parameter_fingerprint(&self) -> String {
            String::new()
        }

        fn start<'a>(&'a self, _: &Image, _: &str, _: &SoftPrompt) -> Result<Box<dyn DecodeState + 'a>> {
            Err(Error::Unavailable(self.descriptor.name.clone()))
        }

        fn logprob_gradient(
            &self,
            _: &Image,
            _: &str,
            _: &SoftPrompt,
            _: &[u32],
            _: &[f64],
        ) -> Result<Array2<f64>> {
            Err(Error::Unavailable(self.descriptor.name.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in ["toy", "scripted:fixtures/a.script", "viscot-stub", "llava-stub"] {
            assert_eq!(name.parse::<BackboneSpec>().unwrap().to_string(), name);
        }
        assert!("resnet".parse::<BackboneSpec>().is_err());
        assert!("scripted:".parse::<BackboneSpec>().is_err());
    }

    #[test]
    fn toy_uses_kind_vocabulary() {
        let g = build_backbone(&BackboneSpec::Toy, BackboneKind::Grounding, 1, 8).unwrap();
        let a = build_backbone(&BackboneSpec::Toy, BackboneKind::Answer, 1, 8).unwrap();
        assert_eq!(g.descriptor().vocab_size, BOX_VOCAB_SIZE);
        assert_eq!(a.descriptor().vocab_size, ANSWER_VOCAB_SIZE);
    }

    #[test]
    fn scripted_kind_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.script");
        std::fs::write(&path, "kind answer\nvocab 4\nrule * | * | * | uniform\n").unwrap();
        let spec = BackboneSpec::Scripted(path);
        assert!(build_backbone(&spec, BackboneKind::Answer, 0, 8).is_ok());
        assert!(build_backbone(&spec, BackboneKind::Grounding, 0, 8).is_err());
    }

    #[cfg(not(feature = "stub-adapters"))]
    #[test]
    fn stubs_are_unavailable_by_default() {
        assert!(matches!(
            build_backbone(&BackboneSpec::VisCotStub, BackboneKind::Grounding, 0, 8),
            Err(Error::Unavailable(_))
        ));
    }
}
