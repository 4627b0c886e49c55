//! Multimodal needle-in-a-haystack probe.
//!
//! Each sample stitches `grid_n²` distinct pool images into a grid, picks
//! one cell as the needle and asks for its location in two binary steps:
//! top/bottom, then left/right. The answers map to a `(row, col)` index.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::io::{atomic_write, read_jsonl, resolve_relative, to_jsonl};
use crate::par::Exec;
use crate::rng::{derive_seed, seeded};
use crate::vlm::{ToyTokenizer, ToyVlm};

/// Side length every pool image is resized to before stitching.
pub const SUBIMAGE_SIZE: usize = 224;

pub const VERTICAL_SUFFIX: &str = " Where is the caption? Top or Bottom?";
pub const HORIZONTAL_SUFFIX: &str = " Where is the caption? Left or Right?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleConfig {
    pub grid_n: usize,
    /// Stitched images per sample.
    pub stitched_count: usize,
    pub sample_limit: usize,
    pub seed: u64,
    /// Resolution the stitched image is resized to for the model.
    pub image_size: usize,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        NeedleConfig {
            grid_n: 2,
            stitched_count: 1,
            sample_limit: 200,
            seed: 0,
            image_size: 32,
        }
    }
}

impl NeedleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 {
            return Err(Error::config(format!("grid_n must be at least 2, got {}", self.grid_n)));
        }
        if self.grid_n != 2 {
            return Err(Error::config("two-step top/bottom, left/right prompting only defines a 2x2 grid"));
        }
        if self.stitched_count != 1 {
            return Err(Error::config("only one stitched image per sample is supported"));
        }
        if self.sample_limit == 0 {
            return Err(Error::config("sample_limit must be at least 1"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub caption: String,
}

/// Reads a JSON-lines manifest; image paths resolve relative to it.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        e.image = resolve_relative(path, &e.image);
    }
    Ok(entries)
}

/// Bilinear resize to 224×224, values clamped to `[0, 1]`.
pub fn preprocess(image: &RgbImage) -> Result<RgbImage> {
    Ok(image.resize_bilinear(SUBIMAGE_SIZE, SUBIMAGE_SIZE)?.clamp_unit())
}

/// Places sub-image `k` at cell `(k / grid_n, k % grid_n)`, then optionally
/// resizes the result to `out_size × out_size`.
pub fn stitch(subimages: &[RgbImage], grid_n: usize, out_size: Option<usize>) -> Result<RgbImage> {
    if grid_n == 0 || subimages.len() != grid_n * grid_n {
        return Err(Error::contract(format!(
            "stitching a {grid_n}x{grid_n} grid needs {} images, got {}",
            grid_n * grid_n,
            subimages.len()
        )));
    }
    let (w, h) = (subimages[0].width(), subimages[0].height());
    if subimages.iter().any(|s| s.width() != w || s.height() != h) {
        return Err(Error::contract("sub-images differ in size"));
    }
    let mut canvas = RgbImage::solid(w * grid_n, h * grid_n, [0.0; 3]);
    for (k, sub) in subimages.iter().enumerate() {
        canvas.paste(sub, (k % grid_n) * w, (k / grid_n) * h)?;
    }
    match out_size {
        Some(s) => canvas.resize_bilinear(s, s),
        None => Ok(canvas),
    }
}

/// `(vertical, horizontal)` prompts for a caption.
pub fn build_prompts(caption: &str) -> Result<(String, String)> {
    if caption.trim().is_empty() {
        return Err(Error::contract("needle caption is empty"));
    }
    Ok((format!("{caption}{VERTICAL_SUFFIX}"), format!("{caption}{HORIZONTAL_SUFFIX}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Vertical,
    Horizontal,
}

impl Axis {
    pub fn words(self) -> [&'static str; 2] {
        match self {
            Axis::Vertical => ["top", "bottom"],
            Axis::Horizontal => ["left", "right"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Top,
    Bottom,
    Left,
    Right,
    Unparseable,
}

/// Case-insensitive substring search for the axis words; exactly one must
/// occur.
pub fn parse_response(text: &str, axis: Axis) -> Placement {
    let lower = text.to_lowercase();
    let [a, b] = axis.words();
    match (lower.contains(a), lower.contains(b), axis) {
        (true, false, Axis::Vertical) => Placement::Top,
        (false, true, Axis::Vertical) => Placement::Bottom,
        (true, false, Axis::Horizontal) => Placement::Left,
        (false, true, Axis::Horizontal) => Placement::Right,
        _ => Placement::Unparseable,
    }
}

/// `(row, col)` on a 2×2 grid, or `None` if either answer is not a valid
/// placement for its axis.
pub fn map_coordinates(v: Placement, h: Placement) -> Option<(usize, usize)> {
    let row = match v {
        Placement::Top => 0,
        Placement::Bottom => 1,
        _ => return None,
    };
    let col = match h {
        Placement::Left => 0,
        Placement::Right => 1,
        _ => return None,
    };
    Some((row, col))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleSample {
    pub index: usize,
    /// Pool indices in row-major cell order.
    pub sources: Vec<usize>,
    pub needle_row: usize,
    pub needle_col: usize,
    pub caption: String,
}

impl NeedleSample {
    pub fn needle_source(&self, grid_n: usize) -> usize {
        self.sources[self.needle_row * grid_n + self.needle_col]
    }
}

/// Seeded draw of `sample_limit` samples: distinct pool images per sample
/// and a uniformly chosen needle cell.
pub fn plan_samples(pool: &[ManifestEntry], cfg: &NeedleConfig) -> Result<Vec<NeedleSample>> {
    let cells = cfg.grid_n * cfg.grid_n;
    if pool.len() < cells {
        return Err(Error::config(format!("manifest has {} images, a sample needs {cells}", pool.len())));
    }
    let stream = derive_seed(cfg.seed, 3);
    (0..cfg.sample_limit)
        .map(|index| {
            let mut rng = seeded(derive_seed(stream, index as u64));
            let sources = rand::seq::index::sample(&mut rng, pool.len(), cells).into_vec();
            let cell = rng.random_range(0..cells);
            let caption = pool[sources[cell]].caption.clone();
            if caption.trim().is_empty() {
                return Err(Error::Corrupt(format!(
                    "manifest entry `{}` has an empty caption",
                    pool[sources[cell]].image.display()
                )));
            }
            Ok(NeedleSample {
                index,
                sources,
                needle_row: cell / cfg.grid_n,
                needle_col: cell % cfg.grid_n,
                caption,
            })
        })
        .collect()
}

/// Answers one step of the two-step query.
pub trait Responder: Sync {
    /// Whether `respond` looks at the stitched image.
    fn needs_image(&self) -> bool {
        false
    }

    fn respond(&self, sample: &NeedleSample, image: Option<&RgbImage>, prompt: &str, axis: Axis) -> Result<String>;
}

/// Harness self-test responders that never look at the image.
#[derive(Clone, Debug, PartialEq)]
pub enum ScriptedResponder {
    /// Reads the ground truth.
    Oracle,
    /// Always answers the opposite of the ground truth.
    Inverted,
    /// Uniform choice between the two axis words, seeded per sample and axis.
    Random { seed: u64 },
    Constant { vertical: String, horizontal: String },
}

impl Responder for ScriptedResponder {
    fn respond(&self, sample: &NeedleSample, _: Option<&RgbImage>, _: &str, axis: Axis) -> Result<String> {
        let truth = match axis {
            Axis::Vertical => sample.needle_row,
            Axis::Horizontal => sample.needle_col,
        };
        let words = axis.words();
        Ok(match self {
            ScriptedResponder::Oracle => words[truth].to_string(),
            ScriptedResponder::Inverted => words[1 - truth].to_string(),
            ScriptedResponder::Random { seed } => {
                let stream = derive_seed(derive_seed(*seed, sample.index as u64), axis as u64);
                words[seeded(stream).random_range(0..2)].to_string()
            }
            ScriptedResponder::Constant { vertical, horizontal } => match axis {
                Axis::Vertical => vertical.clone(),
                Axis::Horizontal => horizontal.clone(),
            },
        })
    }
}

pub struct ModelResponder<'a> {
    pub model: &'a ToyVlm<f32>,
    pub tokenizer: &'a ToyTokenizer,
    pub max_new: usize,
}

impl Responder for ModelResponder<'_> {
    fn needs_image(&self) -> bool {
        true
    }

    fn respond(&self, _: &NeedleSample, image: Option<&RgbImage>, prompt: &str, _: Axis) -> Result<String> {
        let image = image.ok_or_else(|| Error::contract("model responder needs the stitched image"))?;
        let ids = self.tokenizer.encode_prompt(prompt);
        let out = self.model.generate_greedy(image, &ids, self.max_new)?;
        Ok(self.tokenizer.decode(out.ids()))
    }
}

/// Per-cell trial and correct counts, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub grid_n: usize,
    pub trials: Vec<usize>,
    pub correct: Vec<usize>,
    pub skipped: usize,
}

impl CellReport {
    pub fn new(grid_n: usize) -> Self {
        CellReport {
            grid_n,
            trials: vec![0; grid_n * grid_n],
            correct: vec![0; grid_n * grid_n],
            skipped: 0,
        }
    }

    pub fn total_trials(&self) -> usize {
        self.trials.iter().sum()
    }

    pub fn total_correct(&self) -> usize {
        self.correct.iter().sum()
    }

    /// Total correct over total trials; 0 when nothing ran.
    pub fn index_accuracy(&self) -> f64 {
        let t = self.total_trials();
        if t == 0 {
            0.0
        } else {
            self.total_correct() as f64 / t as f64
        }
    }

    pub fn cell_accuracy(&self, row: usize, col: usize) -> Option<f64> {
        let k = row * self.grid_n + col;
        (self.trials[k] > 0).then(|| self.correct[k] as f64 / self.trials[k] as f64)
    }

    /// Grid of per-cell accuracies; cells without trials are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.grid_n {
            let row: Vec<String> = (0..self.grid_n)
                .map(|c| self.cell_accuracy(r, c).map_or_else(String::new, |a| format!("{a:.6}")))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> NeedleSummary {
        NeedleSummary {
            index_accuracy: self.index_accuracy(),
            index_accuracy_pct: 100.0 * self.index_accuracy(),
            per_cell: (0..self.grid_n)
                .map(|r| (0..self.grid_n).map(|c| self.cell_accuracy(r, c)).collect())
                .collect(),
            per_cell_trials: self.trials.chunks(self.grid_n).map(<[usize]>::to_vec).collect(),
            trials: self.total_trials(),
            correct: self.total_correct(),
            skipped: self.skipped,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleSummary {
    pub index_accuracy: f64,
    pub index_accuracy_pct: f64,
    pub per_cell: Vec<Vec<Option<f64>>>,
    pub per_cell_trials: Vec<Vec<usize>>,
    pub trials: usize,
    pub correct: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub needle_row: usize,
    pub needle_col: usize,
    pub caption: String,
    pub sources: Vec<PathBuf>,
    /// Captions of the non-needle cells, for auditing caption/distractor overlap.
    pub distractor_captions: Vec<String>,
    pub response_vertical: Option<String>,
    pub response_horizontal: Option<String>,
    pub predicted: Option<(usize, usize)>,
    pub correct: bool,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleReport {
    pub cells: CellReport,
    pub samples: Vec<SampleOutcome>,
}

impl NeedleReport {
    /// Writes `cells.csv`, `summary.json` and `samples.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_write(&dir.join("cells.csv"), self.cells.to_csv().as_bytes())?;
        let mut summary = serde_json::to_vec_pretty(&self.cells.summary())?;
        summary.push(b'\n');
        atomic_write(&dir.join("summary.json"), &summary)?;
        atomic_write(&dir.join("samples.jsonl"), &to_jsonl(&self.samples)?)
    }
}

fn is_overflow(e: &Error) -> bool {
    matches!(e, Error::ContextLength { .. } | Error::Truncated { .. })
}

/// Runs every planned sample. Overflowing the model context or an
/// undecodable pool image skips the sample; skipped samples are not trials.
pub fn run_needle_eval(
    responder: &dyn Responder,
    pool: &[ManifestEntry],
    cfg: &NeedleConfig,
    exec: Exec,
) -> Result<NeedleReport> {
    cfg.validate()?;
    let plans = plan_samples(pool, cfg)?;
    let cache: Vec<OnceLock<std::result::Result<RgbImage, String>>> = (0..pool.len()).map(|_| OnceLock::new()).collect();
    let sub = |i: usize| {
        cache[i]
            .get_or_init(|| {
                RgbImage::load(&pool[i].image)
                    .and_then(|img| preprocess(&img))
                    .map_err(|e| e.to_string())
            })
            .clone()
    };

    let outcomes = exec.map(&plans, |s| -> Result<SampleOutcome> {
        let mut out = SampleOutcome {
            index: s.index,
            needle_row: s.needle_row,
            needle_col: s.needle_col,
            caption: s.caption.clone(),
            sources: s.sources.iter().map(|&i| pool[i].image.clone()).collect(),
            distractor_captions: s
                .sources
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != s.needle_row * cfg.grid_n + s.needle_col)
                .map(|(_, &i)| pool[i].caption.clone())
                .collect(),
            response_vertical: None,
            response_horizontal: None,
            predicted: None,
            correct: false,
            skipped: None,
        };
        let image = if responder.needs_image() {
            let subs: std::result::Result<Vec<RgbImage>, String> = s.sources.iter().map(|&i| sub(i)).collect();
            match subs {
                Ok(subs) => Some(stitch(&subs, cfg.grid_n, Some(cfg.image_size))?),
                Err(reason) => {
                    log::warn!("sample {} skipped: {reason}", s.index);
                    out.skipped = Some(reason);
                    return Ok(out);
                }
            }
        } else {
            None
        };
        let (pv, ph) = build_prompts(&s.caption)?;
        let mut ask = |prompt: &str, axis: Axis| -> Result<Option<String>> {
            match responder.respond(s, image.as_ref(), prompt, axis) {
                Ok(r) => Ok(Some(r)),
                Err(e) if is_overflow(&e) => {
                    log::warn!("sample {} skipped: {e}", s.index);
                    out.skipped = Some(e.to_string());
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };
        let Some(rv) = ask(&pv, Axis::Vertical)? else { return Ok(out) };
        let Some(rh) = ask(&ph, Axis::Horizontal)? else { return Ok(out) };
        out.predicted = map_coordinates(parse_response(&rv, Axis::Vertical), parse_response(&rh, Axis::Horizontal));
        out.correct = out.predicted == Some((s.needle_row, s.needle_col));
        out.response_vertical = Some(rv);
        out.response_horizontal = Some(rh);
        Ok(out)
    });

    let samples: Vec<SampleOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let mut cells = CellReport::new(cfg.grid_n);
    for o in &samples {
        if o.skipped.is_some() {
            cells.skipped += 1;
            continue;
        }
        let k = o.needle_row * cfg.grid_n + o.needle_col;
        cells.trials[k] += 1;
        cells.correct[k] += usize::from(o.correct);
    }
    Ok(NeedleReport { cells, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts() {
        let (v, h) = build_prompts("a red car").unwrap();
        assert_eq!(v, "a red car Where is the caption? Top or Bottom?");
        assert!(h.ends_with("Left or Right?"));
        assert!(build_prompts("  ").is_err());
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_response("The answer is Bottom.", Axis::Vertical), Placement::Bottom);
        assert_eq!(parse_response("top bottom", Axis::Vertical), Placement::Unparseable);
        assert_eq!(parse_response("LEFT", Axis::Horizontal), Placement::Left);
        assert_eq!(parse_response("", Axis::Horizontal), Placement::Unparseable);
        assert_eq!(parse_response("left", Axis::Vertical), Placement::Unparseable);
    }

    #[test]
    fn coordinates() {
        assert_eq!(map_coordinates(Placement::Top, Placement::Left), Some((0, 0)));
        assert_eq!(map_coordinates(Placement::Bottom, Placement::Right), Some((1, 1)));
        assert_eq!(map_coordinates(Placement::Bottom, Placement::Left), Some((1, 0)));
        assert_eq!(map_coordinates(Placement::Unparseable, Placement::Left), None);
        assert_eq!(map_coordinates(Placement::Left, Placement::Top), None);
    }

    #[test]
    fn stitch_quadrants() {
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let subs: Vec<RgbImage> = colors.iter().map(|&c| RgbImage::solid(4, 4, c)).collect();
        let s = stitch(&subs, 2, None).unwrap();
        for (k, &c) in colors.iter().enumerate() {
            let q = s.crop((k % 2) * 4, (k / 2) * 4, 4, 4).unwrap();
            assert_eq!(q.mean_color(), c.map(f64::from));
        }
        assert!(stitch(&subs[..3], 2, None).is_err());
    }

    #[test]
    fn config_rules() {
        assert!(NeedleConfig::default().validate().is_ok());
        for bad in [
            NeedleConfig { grid_n: 1, ..NeedleConfig::default() },
            NeedleConfig { stitched_count: 2, ..NeedleConfig::default() },
            NeedleConfig { sample_limit: 0, ..NeedleConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
