//! Evaluation harnesses.

pub mod needle;
pub mod vqa;
