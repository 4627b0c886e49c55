#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use diffattn::imaging::RgbImage;

pub const QUESTIONS: [&str; 4] = [
    "what color is the square?",
    "how many dots are there?",
    "is it bright?",
    "what shape is shown?",
];

pub const ANSWERS: [&str; 4] = ["red", "two", "yes", "circle"];

/// Smooth deterministic test image.
pub fn pattern(seed: u64, size: usize) -> RgbImage {
    let s = seed as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let fx = x as f32 / size as f32;
        let fy = y as f32 / size as f32;
        [
            (0.5 + 0.5 * (3.0 * fx + s).sin()).clamp(0.0, 1.0),
            (0.5 + 0.5 * (2.0 * fy - s).cos()).clamp(0.0, 1.0),
            ((fx + fy + 0.1 * s) % 1.0).clamp(0.0, 1.0),
        ]
    })
}

/// `n` PNG images plus a VQA JSON-lines file referencing them by relative
/// path. Each record's ten references agree on one answer.
pub fn write_vqa_dataset(dir: &Path, n: usize) -> PathBuf {
    fs::create_dir_all(dir.join("images")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let rel = format!("images/{i}.png");
        pattern(i as u64, 24).save_png(&dir.join(&rel)).unwrap();
        let answer = ANSWERS[i % ANSWERS.len()];
        let record = serde_json::json!({
            "image": rel,
            "question": QUESTIONS[i % QUESTIONS.len()],
            "answers": vec![answer; 10],
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    let path = dir.join("data.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

/// Small training config pointing at `data`.
pub fn write_train_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "# toy run\n\
         seed = 7\n\
         model.d_model = 32\n\
         model.d_head = 16\n\
         model.n_layers_enc = 1\n\
         model.n_layers_dec = 2\n\
         model.vocab_size = 64\n\
         model.image_size = 16\n\
         model.patch_size = 8\n\
         model.max_seq_len = 24\n\
         lora.rank = 4\n\
         train.batch_size = 2\n\
         train.epochs = 2\n\
         data.train = {}\n\
         {extra}\n",
        data.display()
    );
    let path = dir.join("train.cfg");
    fs::write(&path, text).unwrap();
    path
}

/// `n` PNG pool images with distinct captions plus the manifest.
pub fn write_needle_pool(dir: &Path, n: usize, size: usize) -> PathBuf {
    fs::create_dir_all(dir.join("pool")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let rel = format!("pool/{i}.png");
        pattern(100 + i as u64, size).save_png(&dir.join(&rel)).unwrap();
        let entry = serde_json::json!({ "image": rel, "caption": format!("a picture of item {i}") });
        lines.push_str(&entry.to_string());
        lines.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines).unwrap();
    path
}
