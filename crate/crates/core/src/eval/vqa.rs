//! VQA consensus scoring: an answer earns `min(n/3, 1)` where `n` counts
//! the matching reference answers after normalization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::io::{read_jsonl, resolve_relative};
use crate::par::Exec;
use crate::vlm::{ToyTokenizer, ToyVlm};

pub const REFERENCE_COUNT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image: PathBuf,
    pub question: String,
    pub answers: Vec<String>,
}

impl VqaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != REFERENCE_COUNT {
            return Err(Error::Corrupt(format!(
                "record for `{}` has {} reference answers, expected {REFERENCE_COUNT}",
                self.image.display(),
                self.answers.len()
            )));
        }
        if self.question.trim().is_empty() {
            return Err(Error::Corrupt(format!("record for `{}` has an empty question", self.image.display())));
        }
        Ok(())
    }
}

/// Reads and validates a JSON-lines dataset. Image paths are resolved
/// relative to the dataset file.
pub fn load_dataset(path: &Path) -> Result<Vec<VqaRecord>> {
    let mut records: Vec<VqaRecord> = read_jsonl(path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.validate()
            .map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.image = resolve_relative(path, &r.image);
    }
    Ok(records)
}

fn number_word(w: &str) -> Option<&'static str> {
    const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    const DIGITS: [&str; 11] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10"];
    WORDS.iter().position(|&x| x == w).map(|i| DIGITS[i])
}

/// Lowercases, drops ASCII punctuation (a `.` between two digits is kept),
/// collapses whitespace and maps the number words zero to ten to digits.
pub fn normalize_answer(s: &str) -> String {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    let mut kept = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_punctuation() {
            let decimal = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if !decimal {
                continue;
            }
        }
        kept.push(c);
    }
    kept.split_whitespace()
        .map(|w| number_word(w).unwrap_or(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `min(n/3, 1)` over exactly ten references.
pub fn score_answer(pred: &str, refs: &[String]) -> Result<f64> {
    if refs.len() != REFERENCE_COUNT {
        return Err(Error::contract(format!("expected {REFERENCE_COUNT} references, got {}", refs.len())));
    }
    let p = normalize_answer(pred);
    let n = refs.iter().filter(|r| normalize_answer(r) == p).count();
    Ok((n as f64 / 3.0).min(1.0))
}

/// Most frequent normalized reference; ties go to the lexicographically
/// smallest.
pub fn consensus_answer(refs: &[String]) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in refs {
        *counts.entry(normalize_answer(r)).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(a, _)| a)
}

/// Produces an answer for one image and question.
pub trait Answerer: Sync {
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String>;
}

impl<F> Answerer for F
where
    F: Fn(&RgbImage, &str) -> Result<String> + Sync,
{
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String> {
        self(image, question)
    }
}

/// Greedy-decoding answers from a model.
pub struct ModelAnswerer<'a> {
    pub model: &'a ToyVlm<f32>,
    pub tokenizer: &'a ToyTokenizer,
    pub max_new: usize,
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String> {
        let s = self.model.config.image_size;
        let img = image.resize_bilinear(s, s)?.clamp_unit();
        let prompt = self.tokenizer.encode_prompt(question);
        let out = self.model.generate_greedy(&img, &prompt, self.max_new)?;
        Ok(self.tokenizer.decode(out.ids()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaResult {
    pub index: usize,
    pub image: PathBuf,
    pub question: String,
    pub prediction: String,
    pub score: f64,
    /// Reason the record was scored 0 without a prediction.
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    /// `100 × mean` per-record score.
    pub aggregate: f64,
    pub records: Vec<VqaResult>,
}

impl VqaReport {
    pub fn aggregate_display(&self) -> String {
        format!("{:.2}", self.aggregate)
    }

    pub fn flagged(&self) -> usize {
        self.records.iter().filter(|r| r.flag.is_some()).count()
    }
}

/// Scores up to `limit` records. Unreadable images and failed generations
/// are scored 0 and flagged; the run continues.
pub fn run_vqa_eval(answerer: &dyn Answerer, records: &[VqaRecord], limit: Option<usize>, exec: Exec) -> Result<VqaReport> {
    let n = limit.map_or(records.len(), |l| l.min(records.len()));
    if n == 0 {
        return Err(Error::contract("no records to evaluate"));
    }
    let results = exec.map_range(n, |i| -> Result<VqaResult> {
        let rec = &records[i];
        let outcome = RgbImage::load(&rec.image).and_then(|img| answerer.answer(&img, &rec.question));
        let (prediction, score, flag) = match outcome {
            Ok(p) => {
                let s = score_answer(&p, &rec.answers)?;
                (p, s, None)
            }
            Err(e) => {
                log::warn!("record {i} flagged: {e}");
                (String::new(), 0.0, Some(e.to_string()))
            }
        };
        Ok(VqaResult {
            index: i,
            image: rec.image.clone(),
            question: rec.question.clone(),
            prediction,
            score,
            flag,
        })
    });
    let results: Vec<VqaResult> = results.into_iter().collect::<Result<_>>()?;
    let aggregate = 100.0 * results.iter().map(|r| r.score).sum::<f64>() / n as f64;
    Ok(VqaReport {
        aggregate,
        records: results,
    })
}
