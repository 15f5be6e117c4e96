//! Reference tokenizers used by the bundled backbones.
//!
//! Box strings are tokenized one token per character; answers are tokenized
//! one token per word from a small fixed medical vocabulary. Real adapters
//! bring their own tokenizers.

use crate::error::{Error, Result};

/// Reserved end-of-sequence id shared by every reference vocabulary.
pub const EOS_TOKEN: u32 = 0;
/// Padding id of the box vocabulary.
pub const PAD_TOKEN: u32 = 1;

const BOX_CHARS: [char; 21] =
    ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '{', '}', '[', ']', '"', ':', ',', 'b', 'o', 'x', '-'];

/// Size of the character vocabulary for box strings (EOS, PAD, 21 characters).
pub const BOX_VOCAB_SIZE: usize = BOX_CHARS.len() + 2;

pub const ANSWER_WORDS: [&str; 31] = [
    "yes",
    "no",
    "left",
    "right",
    "upper",
    "lower",
    "lobe",
    "lung",
    "liver",
    "kidney",
    "heart",
    "brain",
    "mass",
    "lesion",
    "nodule",
    "normal",
    "abnormal",
    "fracture",
    "effusion",
    "edema",
    "ct",
    "mri",
    "xray",
    "axial",
    "contrast",
    "chest",
    "abdomen",
    "hemorrhage",
    "dysplasia",
    "hyaline",
    "arteriolosclerosis",
];

/// Size of the reference answer vocabulary (EOS plus the word list).
pub const ANSWER_VOCAB_SIZE: usize = ANSWER_WORDS.len() + 1;

fn box_char_id(c: char) -> Option<u32> {
    BOX_CHARS.iter().position(|&b| b == c).map(|i| i as u32 + 2)
}

/// Encodes a box string character by character and pads it with
/// [`PAD_TOKEN`] to exactly `pad_len` tokens.
pub fn encode_box_text(text: &str, pad_len: usize) -> Result<Vec<u32>> {
    let mut ids = text
        .chars()
        .map(|c| box_char_id(c).ok_or_else(|| Error::Tokenize(text.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if ids.len() > pad_len {
        return Err(Error::BoxTooLong { len: ids.len(), pad_len });
    }
    ids.resize(pad_len, PAD_TOKEN);
    Ok(ids)
}

/// Inverse of [`encode_box_text`]. Stops at EOS and drops padding; ids outside
/// the alphabet become U+FFFD so the result fails schema parsing.
pub fn decode_box_tokens(ids: &[u32]) -> String {
    ids.iter()
        .take_while(|&&id| id != EOS_TOKEN)
        .filter(|&&id| id != PAD_TOKEN)
        .map(|&id| {
            BOX_CHARS.get((id as usize).wrapping_sub(2)).copied().unwrap_or(char::REPLACEMENT_CHARACTER)
        })
        .collect()
}

/// Renders answer ids as space separated words, stopping at EOS.
pub fn decode_answer_tokens(ids: &[u32]) -> String {
    let words: Vec<String> = ids
        .iter()
        .take_while(|&&id| id != EOS_TOKEN)
        .map(|&id| match ANSWER_WORDS.get(id as usize - 1) {
            Some(w) => (*w).to_string(),
            None => format!("<{id}>"),
        })
        .collect();
    words.join(" ")
}

/// Maps whitespace separated words onto answer ids and appends EOS.
pub fn encode_answer_text(text: &str) -> Result<Vec<u32>> {
    let mut ids = text
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            ANSWER_WORDS
                .iter()
                .position(|&a| a == w)
                .map(|i| i as u32 + 1)
                .ok_or_else(|| Error::Tokenize(w.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    ids.push(EOS_TOKEN);
    Ok(ids)
}
