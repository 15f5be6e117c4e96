//! Synthetic datasets whose images are generated from their references.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use boxttt_core::backbone::tokenizer::ANSWER_WORDS;
use boxttt_core::eval::dataset::write_records;
use boxttt_core::{AnswerType, QaRecord};

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "toy")]
    pub dataset_name: String,
}

const CLOSED_QUESTIONS: [&str; 3] = [
    "is there a lesion in the left lobe",
    "is this image abnormal",
    "is the mass larger than two centimeters",
];
const OPEN_QUESTIONS: [&str; 3] =
    ["where is the abnormality", "what organ is shown", "what is the diagnosis"];

/// Two questions per image, alternating closed and open. Fully determined by
/// `seed` and `n`.
pub fn synthetic_records(n: usize, seed: u64, dataset: &str) -> Vec<QaRecord> {
    (0..n)
        .map(|i| {
            let image_seed = seed.wrapping_add((i / 2) as u64);
            let w = 12 + (image_seed % 5) as u32 * 2;
            let h = 10 + (image_seed % 3) as u32 * 3;
            let k = seed as usize + i;
            let (answer_type, question, answer) = if i % 2 == 0 {
                (
                    AnswerType::Closed,
                    CLOSED_QUESTIONS[k % CLOSED_QUESTIONS.len()],
                    if k % 4 < 2 { "yes".to_string() } else { "no".to_string() },
                )
            } else {
                let a = ANSWER_WORDS[2 + k * 7 % (ANSWER_WORDS.len() - 2)];
                let b = ANSWER_WORDS[2 + (k * 11 + 3) % (ANSWER_WORDS.len() - 2)];
                (AnswerType::Open, OPEN_QUESTIONS[k % OPEN_QUESTIONS.len()], format!("{a} {b}"))
            };
            QaRecord {
                id: format!("{i:06}"),
                image: format!("synthetic:{image_seed}:{w}x{h}"),
                question: question.to_string(),
                answer,
                answer_type,
                dataset: dataset.to_string(),
                split: "test".to_string(),
            }
        })
        .collect()
}

pub fn cmd_fixture(args: &FixtureArgs) -> Result<()> {
    let records = synthetic_records(args.records, args.seed, &args.dataset_name);
    write_records(&args.out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_questions_per_image_alternating_types() {
        let recs = synthetic_records(6, 3, "toy");
        for pair in recs.chunks(2) {
            assert_eq!(pair[0].image, pair[1].image);
            assert_eq!((pair[0].answer_type, pair[1].answer_type), (AnswerType::Closed, AnswerType::Open));
        }
        assert_ne!(recs[0].image, recs[2].image);
        assert_eq!(recs, synthetic_records(6, 3, "toy"));
        assert_ne!(recs, synthetic_records(6, 4, "toy"));
    }
}
