//! Synthetic paired visible/thermal scenes, the MMBD tensor container,
//! bbGt annotation text, the reasonable-setup filter, and curriculum
//! ordering.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad container magic (expected MMBD)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("truncated container file")]
    Truncated,
    #[error("container entry `{0}` missing")]
    MissingEntry(String),
    #[error("bbGt header missing or wrong version: `{0}`")]
    BadHeader(String),
    #[error("bbGt line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("bad curriculum schedule: {0}")]
    BadSchedule(String),
    #[error("bad config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneType {
    Day,
    Night,
    Dual,
}

impl SceneType {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneType::Day => "day",
            SceneType::Night => "night",
            SceneType::Dual => "dual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub occluded: bool,
}

pub struct Sample {
    pub visible: Tensor, // [1, H, W]
    pub thermal: Tensor, // [1, H, W]
    pub gt_boxes: Vec<GtBox>,
    pub scene_type: SceneType,
    pub difficulty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub aspect_band: (f64, f64),
    pub height_band: (f64, f64),
    pub p_day: f64,
    pub dominant_contrast: (f64, f64),
    pub recessive_contrast: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 96,
            width: 96,
            min_objects: 1,
            max_objects: 4,
            aspect_band: (0.35, 0.5),
            height_band: (12.0, 48.0),
            p_day: 0.5,
            dominant_contrast: (0.5, 0.9),
            recessive_contrast: (0.0, 0.1),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.p_day) {
            return Err(DataError::BadConfig(format!("p_day {} outside [0,1]", self.p_day)));
        }
        for (name, (lo, hi)) in [
            ("aspect_band", self.aspect_band),
            ("height_band", self.height_band),
            ("dominant_contrast", self.dominant_contrast),
            ("recessive_contrast", self.recessive_contrast),
        ] {
            if lo > hi {
                return Err(DataError::BadConfig(format!("{name} not ordered: ({lo}, {hi})")));
            }
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(DataError::BadConfig("image size must be divisible by 8".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(DataError::BadConfig("object count band invalid".into()));
        }
        Ok(())
    }
}

/// Independent RNG substream for sample `index` (thread-count independent).
pub fn sample_rng(master_seed: u64, index: u64) -> ChaCha12Rng {
    // splitmix-style mix so neighboring indices decorrelate
    let mut z = master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

const BG_LEVEL: f64 = 0.2;
/// Occlusion flag threshold: fraction of a box covered by nearer objects.
const OCCLUSION_FRACTION: f64 = 0.35;
const MAX_PED_HEIGHT: f64 = 48.0;

fn draw_scene_type(rng: &mut impl Rng, p_day: f64) -> SceneType {
    let p_dual = (1.0 - p_day).min(0.1);
    let u: f64 = rng.gen();
    if u < p_day {
        SceneType::Day
    } else if u < p_day + p_dual {
        SceneType::Dual
    } else {
        SceneType::Night
    }
}

/// Soft-edge profile inside an integer box: full strength in the interior,
/// tapering over the outermost 1.5 px band, exactly zero outside. The peak
/// support therefore coincides with the box interior.
fn edge_profile(r: usize, c: usize, b: (usize, usize, usize, usize)) -> f64 {
    let (x1, y1, x2, y2) = b;
    if c < x1 || c >= x2 || r < y1 || r >= y2 {
        return 0.0;
    }
    let dx = (c - x1).min(x2 - 1 - c) as f64;
    let dy = (r - y1).min(y2 - 1 - r) as f64;
    let d = dx.min(dy) + 0.5;
    let t = (d / 1.5).min(1.0);
    t * t * (3.0 - 2.0 * t)
}

fn box_iou_vals(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Render one scene. Pedestrians are soft-edged vertical rectangles drawn
/// back to front; the later-drawn object occludes on overlap.
pub fn generate_scene(rng: &mut impl Rng, config: &GeneratorConfig) -> Result<Sample, DataError> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let scene_type = draw_scene_type(rng, config.p_day);
    let n_obj = rng.gen_range(config.min_objects..=config.max_objects);

    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let bh = rng
            .gen_range(config.height_band.0..=config.height_band.1)
            .min(h as f64 - 1.0)
            .round()
            .max(2.0) as usize;
        let aspect = rng.gen_range(config.aspect_band.0..=config.aspect_band.1);
        let bw = ((bh as f64 * aspect).round() as usize).clamp(2, w - 1);
        let x1 = rng.gen_range(0..=(w - bw));
        let y1 = rng.gen_range(0..=(h - bh));
        rects.push((x1, y1, x1 + bw, y1 + bh));
    }

    let (vis_band, thm_band) = match scene_type {
        SceneType::Day => (config.dominant_contrast, config.recessive_contrast),
        SceneType::Night => (config.recessive_contrast, config.dominant_contrast),
        SceneType::Dual => (config.dominant_contrast, config.dominant_contrast),
    };

    let gauss = |rng: &mut dyn RngCore| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    let mut visible = Tensor::zeros(&[1, h, w]);
    let mut thermal = Tensor::zeros(&[1, h, w]);
    for i in 0..h * w {
        visible.data_mut()[i] = (BG_LEVEL + config.noise_std * gauss(rng)).clamp(0.0, 1.0);
        thermal.data_mut()[i] = (BG_LEVEL + config.noise_std * gauss(rng)).clamp(0.0, 1.0);
    }

    let mut contrasts = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let cv = rng.gen_range(vis_band.0..=vis_band.1);
        let ct = rng.gen_range(thm_band.0..=thm_band.1);
        contrasts.push((cv, ct));
    }
    // back to front: later rectangles overwrite earlier ones where they overlap
    for (rect, &(cv, ct)) in rects.iter().zip(&contrasts) {
        for r in rect.1..rect.3 {
            for c in rect.0..rect.2 {
                let p = edge_profile(r, c, *rect);
                if p > 0.0 {
                    let i = r * w + c;
                    visible.data_mut()[i] = (BG_LEVEL + cv * p).clamp(0.0, 1.0);
                    thermal.data_mut()[i] = (BG_LEVEL + ct * p).clamp(0.0, 1.0);
                }
            }
        }
    }

    // occlusion flags: fraction of a box covered by later-drawn (nearer) boxes
    let mut gt_boxes = Vec::with_capacity(n_obj);
    for (i, rect) in rects.iter().enumerate() {
        let area = ((rect.2 - rect.0) * (rect.3 - rect.1)) as f64;
        let mut covered = 0usize;
        for r in rect.1..rect.3 {
            for c in rect.0..rect.2 {
                if rects[i + 1..].iter().any(|o| c >= o.0 && c < o.2 && r >= o.1 && r < o.3) {
                    covered += 1;
                }
            }
        }
        gt_boxes.push(GtBox {
            x1: rect.0 as f64,
            y1: rect.1 as f64,
            x2: rect.2 as f64,
            y2: rect.3 as f64,
            occluded: covered as f64 / area > OCCLUSION_FRACTION,
        });
    }

    let mean_height: f64 =
        gt_boxes.iter().map(|b| b.y2 - b.y1).sum::<f64>() / gt_boxes.len() as f64;
    let mut overlap = 0.0;
    for i in 0..gt_boxes.len() {
        for j in (i + 1)..gt_boxes.len() {
            let a = &gt_boxes[i];
            let b = &gt_boxes[j];
            overlap += box_iou_vals((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2));
        }
    }
    let difficulty = n_obj as f64 + (1.0 - mean_height / MAX_PED_HEIGHT) + overlap;

    Ok(Sample { visible, thermal, gt_boxes, scene_type, difficulty })
}

// ---------------------------------------------------------------------------
// MMBD named-tensor container

const MAGIC: &[u8; 4] = b"MMBD";
const VERSION: u32 = 1;

pub fn write_container(path: &Path, entries: &[(String, Tensor)]) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
        if *pos + n > bytes.len() {
            return Err(DataError::Truncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let count = u32_at(&mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| DataError::Truncated)?;
        let rank = u32_at(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&dims, data)));
    }
    Ok(out)
}

pub fn container_entry<'a>(
    entries: &'a [(String, Tensor)],
    name: &str,
) -> Result<&'a Tensor, DataError> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| DataError::MissingEntry(name.to_string()))
}

fn boxes_tensor(gt: &[GtBox]) -> Tensor {
    let mut data = Vec::with_capacity(gt.len() * 5);
    for b in gt {
        data.extend_from_slice(&[b.x1, b.y1, b.x2, b.y2, if b.occluded { 1.0 } else { 0.0 }]);
    }
    Tensor::new(&[gt.len(), 5], data)
}

fn boxes_from_tensor(t: &Tensor) -> Vec<GtBox> {
    t.data()
        .chunks_exact(5)
        .map(|c| GtBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3], occluded: c[4] != 0.0 })
        .collect()
}

pub fn save_sample(path: &Path, sample: &Sample) -> Result<(), DataError> {
    write_container(
        path,
        &[
            ("visible".to_string(), sample.visible.clone()),
            ("thermal".to_string(), sample.thermal.clone()),
            ("boxes".to_string(), boxes_tensor(&sample.gt_boxes)),
        ],
    )
}

pub fn load_sample(path: &Path, scene_type: SceneType, difficulty: f64) -> Result<Sample, DataError> {
    let entries = read_container(path)?;
    Ok(Sample {
        visible: container_entry(&entries, "visible")?.clone(),
        thermal: container_entry(&entries, "thermal")?.clone(),
        gt_boxes: boxes_from_tensor(container_entry(&entries, "boxes")?),
        scene_type,
        difficulty,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub scene_type: SceneType,
    pub difficulty: f64,
    pub num_boxes: usize,
}

/// Generate and persist `n` samples plus a JSON manifest; returns the
/// manifest. Sample `i` uses its own RNG substream, so the set is
/// reproducible regardless of iteration strategy.
pub fn generate_dataset(
    n: usize,
    config: &GeneratorConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, DataError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(config.seed, i as u64);
        let sample = generate_scene(&mut rng, config)?;
        let file = format!("sample_{i:05}.mmbd");
        save_sample(&out_dir.join(&file), &sample)?;
        manifest.push(ManifestEntry {
            file,
            scene_type: sample.scene_type,
            difficulty: sample.difficulty,
            num_boxes: sample.gt_boxes.len(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let manifest = load_manifest(dir)?;
    manifest
        .iter()
        .map(|e| load_sample(&dir.join(&e.file), e.scene_type, e.difficulty))
        .collect()
}

pub fn manifest_sample_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(&entry.file)
}

// ---------------------------------------------------------------------------
// bbGt v3 annotation text

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    None,
    Partial,
    Heavy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub occlusion: Occlusion,
    pub ignore: bool,
}

const BBGT_HEADER: &str = "% bbGt version=3";

pub fn parse_bbgt(text: &str) -> Result<Vec<Annotation>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == BBGT_HEADER => {}
        Some((_, h)) => return Err(DataError::BadHeader(h.trim().to_string())),
        None => return Err(DataError::BadHeader(String::new())),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(DataError::MalformedLine {
                line: line_no,
                reason: format!("expected 12 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64, DataError> {
            fields[i].parse::<f64>().map_err(|_| DataError::MalformedLine {
                line: line_no,
                reason: format!("field {} (`{}`) is not numeric", i + 1, fields[i]),
            })
        };
        let (x, y, w, h) = (num(1)?, num(2)?, num(3)?, num(4)?);
        if w <= 0.0 || h <= 0.0 {
            return Err(DataError::MalformedLine {
                line: line_no,
                reason: format!("non-positive box size {w}x{h}"),
            });
        }
        let occlusion = match num(5)? as i64 {
            0 => Occlusion::None,
            1 => Occlusion::Partial,
            2 => Occlusion::Heavy,
            v => {
                return Err(DataError::MalformedLine {
                    line: line_no,
                    reason: format!("occlusion code {v} outside 0..=2"),
                })
            }
        };
        // fields 6..=9 are the visible sub-box; parsed for validity only
        for i in 6..=9 {
            num(i)?;
        }
        let ignore = match num(10)? as i64 {
            0 => false,
            1 => true,
            v => {
                return Err(DataError::MalformedLine {
                    line: line_no,
                    reason: format!("ignore flag {v} outside 0..=1"),
                })
            }
        };
        num(11)?;
        out.push(Annotation { label: fields[0].to_string(), x, y, w, h, occlusion, ignore });
    }
    Ok(out)
}

pub fn serialize_bbgt(annotations: &[Annotation]) -> String {
    let mut out = String::from(BBGT_HEADER);
    out.push('\n');
    for a in annotations {
        let occ = match a.occlusion {
            Occlusion::None => 0,
            Occlusion::Partial => 1,
            Occlusion::Heavy => 2,
        };
        out.push_str(&format!(
            "{} {} {} {} {} {} 0 0 0 0 {} 0\n",
            a.label,
            a.x,
            a.y,
            a.w,
            a.h,
            occ,
            if a.ignore { 1 } else { 0 }
        ));
    }
    out
}

/// Reasonable-setup filter: pedestrians at least `min_height` tall with
/// occlusion in `allow` are kept; everything else is moved to the ignore
/// set (neither FN nor FP during matching).
pub fn reasonable_filter(
    annotations: &[Annotation],
    min_height: f64,
    allow: &[Occlusion],
) -> (Vec<Annotation>, Vec<Annotation>) {
    let mut kept = Vec::new();
    let mut ignored = Vec::new();
    for a in annotations {
        if !a.ignore && a.h >= min_height && allow.contains(&a.occlusion) {
            kept.push(a.clone());
        } else {
            ignored.push(a.clone());
        }
    }
    (kept, ignored)
}

pub const DEFAULT_MIN_HEIGHT: f64 = 50.0;
pub const DEFAULT_ALLOWED_OCCLUSION: [Occlusion; 2] = [Occlusion::None, Occlusion::Partial];

// ---------------------------------------------------------------------------
// Curriculum ordering

/// Sample indices per epoch: samples sorted by difficulty ascending, epoch
/// `e` a uniform shuffle of the easiest `schedule[e]` fraction. The final
/// phase (fraction 1.0) is a permutation of the whole manifest.
pub fn curriculum_order(
    manifest: &[ManifestEntry],
    schedule: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if schedule.is_empty() {
        return Err(DataError::BadSchedule("empty schedule".into()));
    }
    let mut prev = 0.0;
    for &f in schedule {
        if f <= prev || f > 1.0 {
            return Err(DataError::BadSchedule(format!(
                "fractions must be increasing in (0, 1], got {schedule:?}"
            )));
        }
        prev = f;
    }
    if (schedule[schedule.len() - 1] - 1.0).abs() > 1e-12 {
        return Err(DataError::BadSchedule("schedule must end at 1.0".into()));
    }

    let mut by_difficulty: Vec<usize> = (0..manifest.len()).collect();
    by_difficulty.sort_by(|&a, &b| {
        manifest[a]
            .difficulty
            .partial_cmp(&manifest[b].difficulty)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut epochs = Vec::with_capacity(schedule.len());
    for &frac in schedule {
        let take = ((frac * manifest.len() as f64).ceil() as usize).min(manifest.len());
        let mut epoch: Vec<usize> = by_difficulty[..take].to_vec();
        // Fisher-Yates
        for i in (1..epoch.len()).rev() {
            let j = rng.gen_range(0..=i);
            epoch.swap(i, j);
        }
        epochs.push(epoch);
    }
    Ok(epochs)
}

pub const DEFAULT_CURRICULUM: [f64; 3] = [0.3, 0.6, 1.0];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use tempfile::tempdir;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig { seed: 7, ..GeneratorConfig::default() }
    }

    #[test]
    fn all_day_scenes_have_recessive_thermal() {
        let config = GeneratorConfig { p_day: 1.0, ..cfg() };
        for i in 0..20 {
            let mut rng = sample_rng(config.seed, i);
            let s = generate_scene(&mut rng, &config).unwrap();
            assert_eq!(s.scene_type, SceneType::Day);
            // thermal contrast above background stays within the recessive band
            let peak = s.thermal.data().iter().cloned().fold(0.0f64, f64::max);
            assert!(peak <= BG_LEVEL + 0.1 + 4.0 * config.noise_std, "peak {peak}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let config = cfg();
        let a = generate_scene(&mut sample_rng(config.seed, 3), &config).unwrap();
        let b = generate_scene(&mut sample_rng(config.seed, 3), &config).unwrap();
        assert_eq!(a.visible.data(), b.visible.data());
        assert_eq!(a.thermal.data(), b.thermal.data());
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert_eq!(a.difficulty, b.difficulty);
    }

    #[test]
    fn day_fraction_matches_p_day() {
        let config = GeneratorConfig { p_day: 0.8, ..cfg() };
        let mut days = 0usize;
        for i in 0..1000 {
            let mut rng = sample_rng(config.seed, i);
            if generate_scene(&mut rng, &config).unwrap().scene_type == SceneType::Day {
                days += 1;
            }
        }
        let frac = days as f64 / 1000.0;
        assert!((frac - 0.8).abs() <= 0.04, "day fraction {frac}");
    }

    #[test]
    fn boxes_exactly_bound_objects() {
        // noise off so the object mask is unambiguous
        let config = GeneratorConfig { noise_std: 0.0, max_objects: 1, ..cfg() };
        for i in 0..10 {
            let mut rng = sample_rng(11, i);
            let s = generate_scene(&mut rng, &config).unwrap();
            let b = &s.gt_boxes[0];
            let (h, w) = (config.height, config.width);
            let src = if s.scene_type == SceneType::Night { &s.thermal } else { &s.visible };
            for r in 0..h {
                for c in 0..w {
                    let inside = (c as f64) >= b.x1 && (c as f64) < b.x2 && (r as f64) >= b.y1 && (r as f64) < b.y2;
                    let lit = src.data()[r * w + c] > BG_LEVEL + 1e-9;
                    if lit {
                        assert!(inside, "lit pixel ({r},{c}) outside box {b:?}");
                    }
                    if inside {
                        assert!(lit, "dark pixel ({r},{c}) inside box {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn contrast_bands_hold_over_many_scenes() {
        let config = GeneratorConfig { p_day: 0.8, noise_std: 0.0, ..cfg() };
        let mut day_thermal = Vec::new();
        let mut night_visible = Vec::new();
        for i in 0..200 {
            let mut rng = sample_rng(5, i);
            let s = generate_scene(&mut rng, &config).unwrap();
            let peak = |t: &Tensor| t.data().iter().cloned().fold(0.0f64, f64::max) - BG_LEVEL;
            match s.scene_type {
                SceneType::Day => day_thermal.push(peak(&s.thermal)),
                SceneType::Night => night_visible.push(peak(&s.visible)),
                SceneType::Dual => {}
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&day_thermal) <= 0.1);
        assert!(mean(&night_visible) <= 0.1);
    }

    #[test]
    fn container_round_trip_and_dataset() {
        let dir = tempdir().unwrap();
        let config = GeneratorConfig { height: 32, width: 32, ..cfg() };
        let manifest = generate_dataset(12, &config, dir.path()).unwrap();
        assert_eq!(manifest.len(), 12);
        let reloaded = load_dataset(dir.path()).unwrap();
        for (i, entry) in manifest.iter().enumerate() {
            let mut rng = sample_rng(config.seed, i as u64);
            let orig = generate_scene(&mut rng, &config).unwrap();
            assert_eq!(reloaded[i].visible.data(), orig.visible.data());
            assert_eq!(reloaded[i].thermal.data(), orig.thermal.data());
            assert_eq!(reloaded[i].gt_boxes, orig.gt_boxes);
            assert_eq!(entry.num_boxes, orig.gt_boxes.len());
            assert_eq!(entry.scene_type, orig.scene_type);
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempdir().unwrap();
        let manifest = generate_dataset(0, &cfg(), dir.path()).unwrap();
        assert!(manifest.is_empty());
        assert!(load_manifest(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn container_error_paths() {
        let dir = tempdir().unwrap();
        let bad_magic = dir.path().join("m.mmbd");
        fs::write(&bad_magic, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_container(&bad_magic), Err(DataError::BadMagic)));

        let bad_version = dir.path().join("v.mmbd");
        fs::write(&bad_version, b"MMBD\x02\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_container(&bad_version), Err(DataError::BadVersion(2))));

        let good = dir.path().join("g.mmbd");
        write_container(&good, &[("x".to_string(), Tensor::full(&[3], 1.5))]).unwrap();
        let full = fs::read(&good).unwrap();
        fs::write(&good, &full[..full.len() - 4]).unwrap();
        assert!(matches!(read_container(&good), Err(DataError::Truncated)));
    }

    #[test]
    fn bbgt_single_line_fixture() {
        let text = "% bbGt version=3\nperson 10 20 30 60 0 0 0 0 0 0 0\n";
        let anns = parse_bbgt(text).unwrap();
        assert_eq!(anns.len(), 1);
        let a = &anns[0];
        assert_eq!(a.label, "person");
        assert_eq!((a.x, a.y, a.w, a.h), (10.0, 20.0, 30.0, 60.0));
        assert_eq!(a.occlusion, Occlusion::None);
        assert!(!a.ignore);
    }

    #[test]
    fn bbgt_errors() {
        assert!(matches!(parse_bbgt("% bbGt version=2\n"), Err(DataError::BadHeader(_))));
        let short = "% bbGt version=3\nperson 10 20 30 60 0 0 0 0 0 0\n";
        match parse_bbgt(short) {
            Err(DataError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_bbgt("% bbGt version=3\n\n\n").unwrap().is_empty());
    }

    #[test]
    fn reasonable_filter_fixture() {
        let mk = |h: f64, occ: Occlusion, ign: bool| Annotation {
            label: "person".into(),
            x: 0.0,
            y: 0.0,
            w: h * 0.4,
            h,
            occlusion: occ,
            ignore: ign,
        };
        let anns = vec![
            mk(49.0, Occlusion::None, false),    // too short
            mk(50.0, Occlusion::None, false),    // kept
            mk(80.0, Occlusion::Partial, false), // kept
            mk(80.0, Occlusion::Heavy, false),   // heavy occlusion
            mk(80.0, Occlusion::None, true),     // pre-ignored
            mk(120.0, Occlusion::Partial, false),// kept
        ];
        let (kept, ignored) =
            reasonable_filter(&anns, DEFAULT_MIN_HEIGHT, &DEFAULT_ALLOWED_OCCLUSION);
        assert_eq!(kept.len(), 3);
        assert_eq!(ignored.len(), 3);
        assert!(kept.iter().all(|a| a.h >= 50.0 && a.occlusion != Occlusion::Heavy && !a.ignore));
    }

    #[test]
    fn curriculum_phases_and_determinism() {
        let manifest: Vec<ManifestEntry> = (0..20)
            .map(|i| ManifestEntry {
                file: format!("s{i}.mmbd"),
                scene_type: SceneType::Day,
                difficulty: ((i * 13) % 20) as f64,
                num_boxes: 1,
            })
            .collect();
        let epochs = curriculum_order(&manifest, &DEFAULT_CURRICULUM, 42).unwrap();
        assert_eq!(epochs.len(), 3);
        // phase 1 contains only the 6 easiest
        assert_eq!(epochs[0].len(), 6);
        for &i in &epochs[0] {
            assert!(manifest[i].difficulty < 6.0, "difficulty {}", manifest[i].difficulty);
        }
        // final phase is a permutation of everything
        let mut last = epochs[2].clone();
        last.sort_unstable();
        assert_eq!(last, (0..20).collect::<Vec<_>>());
        // deterministic
        let again = curriculum_order(&manifest, &DEFAULT_CURRICULUM, 42).unwrap();
        assert_eq!(epochs, again);
        // degenerate schedule = plain shuffle
        let single = curriculum_order(&manifest, &[1.0], 42).unwrap();
        assert_eq!(single.len(), 1);
        let mut p = single[0].clone();
        p.sort_unstable();
        assert_eq!(p, (0..20).collect::<Vec<_>>());

        assert!(curriculum_order(&manifest, &[0.5, 0.4, 1.0], 0).is_err());
        assert!(curriculum_order(&manifest, &[0.5], 0).is_err());
        assert!(curriculum_order(&manifest, &[], 0).is_err());
    }

    proptest! {
        #[test]
        fn bbgt_round_trip(
            boxes in proptest::collection::vec(
                (1.0f64..500.0, 1.0f64..500.0, 1.0f64..200.0, 1.0f64..200.0, 0u8..3, proptest::bool::ANY),
                0..8,
            )
        ) {
            let anns: Vec<Annotation> = boxes
                .iter()
                .map(|&(x, y, w, h, occ, ign)| Annotation {
                    label: "person".into(),
                    x, y, w, h,
                    occlusion: match occ {
                        0 => Occlusion::None,
                        1 => Occlusion::Partial,
                        _ => Occlusion::Heavy,
                    },
                    ignore: ign,
                })
                .collect();
            let parsed = parse_bbgt(&serialize_bbgt(&anns)).unwrap();
            prop_assert_eq!(parsed, anns);
        }

        #[test]
        fn container_round_trip_random(
            dims in proptest::collection::vec(1usize..6, 1..4),
            seed in 0u64..1000,
        ) {
            let numel: usize = dims.iter().product();
            let mut rng = sample_rng(seed, 0);
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let t = Tensor::new(&dims, data);
            let dir = tempdir().unwrap();
            let p = dir.path().join("t.mmbd");
            write_container(&p, &[("t".to_string(), t.clone())]).unwrap();
            let back = read_container(&p).unwrap();
            prop_assert_eq!(back[0].1.data(), t.data());
            prop_assert_eq!(back[0].1.shape(), t.shape());
        }
    }
}
