//! Deterministic generator of layered, OCT-like grayscale images.
//!
//! A healthy image is a stack of horizontal retinal layers with a gently
//! curved surface, a bright pigment band, a dark vitreous above and speckle
//! noise. Diseased images add lesions of five kinds, one per synthetic
//! biomarker. Severity is the number of injected lesions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, mix, rng};

pub const N_BIOMARKERS: usize = 5;
pub const BIOMARKER_NAMES: [&str; N_BIOMARKERS] = ["bio_a", "bio_b", "bio_c", "bio_d", "bio_e"];

/// Lesion palette; the index doubles as the biomarker index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LesionKind {
    FluidBlob,
    BrightFocus,
    DetachmentLine,
    Thickening,
    EpiretinalBand,
}

impl LesionKind {
    pub const ALL: [LesionKind; N_BIOMARKERS] = [
        LesionKind::FluidBlob,
        LesionKind::BrightFocus,
        LesionKind::DetachmentLine,
        LesionKind::Thickening,
        LesionKind::EpiretinalBand,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_side: usize,
    pub stripe_count: usize,
    pub stripe_contrast: f64,
    pub noise_std: f64,
    /// Multiplier on lesion size and intensity.
    pub lesion_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            stripe_count: 4,
            stripe_contrast: 1.0,
            noise_std: 0.03,
            lesion_strength: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub severity: u32,
    pub biomarkers: [bool; N_BIOMARKERS],
}

impl GroundTruth {
    pub fn from_lesions(kinds: &[LesionKind]) -> Self {
        let mut biomarkers = [false; N_BIOMARKERS];
        for k in kinds {
            biomarkers[k.index()] = true;
        }
        Self {
            severity: kinds.len() as u32,
            biomarkers,
        }
    }
}

/// One grayscale image with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[side, side]`, values in `[0, 1]`.
    pub image: Tensor,
    pub biomarkers: Option<[bool; N_BIOMARKERS]>,
    pub severity: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor> {
        self.samples.iter().map(|s| &s.image)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Binary label column for one biomarker; errors if any sample is unlabeled.
    pub fn label_column(&self, biomarker: usize) -> Result<Vec<bool>> {
        self.samples
            .iter()
            .map(|s| {
                s.biomarkers.map(|b| b[biomarker]).ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {} has no biomarker labels", s.id))
                })
            })
            .collect()
    }

    pub fn label_matrix(&self) -> Result<Vec<[bool; N_BIOMARKERS]>> {
        self.samples
            .iter()
            .map(|s| {
                s.biomarkers.ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {} has no biomarker labels", s.id))
                })
            })
            .collect()
    }
}

/// Unlabeled corpus; ground truth is held apart from the training view.
#[derive(Debug, Clone)]
pub struct UnlabeledCorpus {
    view: Dataset,
    ground_truth: Vec<GroundTruth>,
}

impl UnlabeledCorpus {
    pub fn new(view: Dataset, ground_truth: Vec<GroundTruth>) -> Result<Self> {
        if view.len() != ground_truth.len() {
            return Err(Error::shape("unlabeled corpus", view.len(), ground_truth.len()));
        }
        Ok(Self { view, ground_truth })
    }

    pub fn view(&self) -> &Dataset {
        &self.view
    }

    pub fn ground_truth(&self) -> &[GroundTruth] {
        &self.ground_truth
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSplits {
    pub train: Dataset,
    /// One balanced present/absent test set per biomarker.
    pub binary_tests: Vec<Dataset>,
    pub multilabel_test: Dataset,
}

#[derive(Debug, Clone)]
struct Geometry {
    top: Vec<f64>,
    thickness: Vec<f64>,
    layer_bounds: Vec<f64>,
    layer_levels: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Lesion {
    kind: LesionKind,
    cx: f64,
    depth: f64,
    size: f64,
    extent: f64,
}

const VITREOUS: f64 = 0.06;
const PIGMENT: f64 = 0.9;

fn sample_geometry(cfg: &SynthConfig, r: &mut ChaCha8Rng) -> Geometry {
    let side = cfg.image_side as f64;
    let base = side * r.gen_range(0.28..0.36);
    let amp = side * r.gen_range(0.0..0.06);
    let freq = r.gen_range(0.5..1.2);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let thick = side * r.gen_range(0.36..0.42);
    let top: Vec<f64> = (0..cfg.image_side)
        .map(|x| base + amp * (std::f64::consts::TAU * freq * x as f64 / side + phase).sin())
        .collect();
    let n = cfg.stripe_count.max(1);
    let mut weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for w in &mut weights {
        acc += *w / total;
        *w = acc;
    }
    let layer_levels = (0..n)
        .map(|i| {
            let alt = if i % 2 == 0 { 0.72 } else { 0.38 };
            let jitter = r.gen_range(-0.05..0.05);
            (0.5 + (alt - 0.5) * cfg.stripe_contrast + jitter).clamp(0.0, 1.0)
        })
        .collect();
    Geometry {
        top,
        thickness: vec![thick; cfg.image_side],
        layer_bounds: weights,
        layer_levels,
    }
}

fn sample_lesion(kind: LesionKind, cfg: &SynthConfig, r: &mut ChaCha8Rng) -> Lesion {
    let side = cfg.image_side as f64;
    Lesion {
        kind,
        cx: side * r.gen_range(0.2..0.8),
        depth: r.gen_range(0.3..0.7),
        size: r.gen_range(0.8..1.2),
        extent: r.gen_range(0.3..0.5),
    }
}

fn render(cfg: &SynthConfig, geometry: &Geometry, lesions: &[Lesion], noise_seed: u64) -> Vec<f64> {
    let n = cfg.image_side;
    let side = n as f64;
    let s = cfg.lesion_strength;
    let mut g = geometry.clone();

    for l in lesions.iter().filter(|l| l.kind == LesionKind::Thickening) {
        let width = side * 0.12 * l.size;
        let height = side * 0.14 * l.size * s;
        for x in 0..n {
            let d = x as f64 + 0.5 - l.cx;
            let bump = height * (-d * d / (2.0 * width * width)).exp();
            g.top[x] -= bump;
            g.thickness[x] += bump;
        }
    }

    let mut img = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = y as f64 + 0.5 - g.top[x];
            let th = g.thickness[x];
            img[y * n + x] = if t < 0.0 {
                VITREOUS
            } else if t < th {
                let frac = t / th;
                let idx = g.layer_bounds.iter().position(|&b| frac < b).unwrap_or(g.layer_bounds.len() - 1);
                g.layer_levels[idx]
            } else if t < th + side * 0.06 {
                PIGMENT
            } else {
                0.3 * (-(t - th) / (side * 0.2)).exp()
            };
        }
    }

    for l in lesions {
        let xi = (l.cx as usize).min(n - 1);
        match l.kind {
            LesionKind::Thickening => {}
            LesionKind::FluidBlob => {
                let cy = g.top[xi] + l.depth * g.thickness[xi];
                let rx = side * 0.10 * l.size * s;
                let ry = side * 0.07 * l.size * s;
                for y in 0..n {
                    for x in 0..n {
                        let dx = (x as f64 + 0.5 - l.cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let w = (1.0 - (dx * dx + dy * dy)).clamp(0.0, 0.5) * 2.0;
                        let v = &mut img[y * n + x];
                        *v = *v * (1.0 - w) + 0.02 * w;
                    }
                }
            }
            LesionKind::BrightFocus => {
                let cy = g.top[xi] + l.depth * g.thickness[xi];
                let sigma = side * 0.035 * l.size * s;
                for y in 0..n {
                    for x in 0..n {
                        let dx = x as f64 + 0.5 - l.cx;
                        let dy = y as f64 + 0.5 - cy;
                        let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let v = &mut img[y * n + x];
                        *v += (1.0 - *v) * w;
                    }
                }
            }
            LesionKind::DetachmentLine => {
                let half = side * l.extent * s.min(1.5) / 2.0;
                let gap = side * 0.12 * l.size;
                for x in 0..n {
                    if (x as f64 + 0.5 - l.cx).abs() > half {
                        continue;
                    }
                    let yl = g.top[x] - gap;
                    for y in 0..n {
                        let d = (y as f64 + 0.5 - yl).abs();
                        if d < 1.0 {
                            img[y * n + x] = img[y * n + x].max(0.8 * (1.0 - d) + VITREOUS * d);
                        }
                    }
                }
            }
            LesionKind::EpiretinalBand => {
                let half = side * (l.extent + 0.15) * s.min(1.5) / 2.0;
                for x in 0..n {
                    if (x as f64 + 0.5 - l.cx).abs() > half {
                        continue;
                    }
                    for y in 0..n {
                        let t = y as f64 + 0.5 - g.top[x];
                        if (-1.5..0.5).contains(&t) {
                            img[y * n + x] = 0.97;
                        }
                    }
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
        let mut nr = rng(noise_seed);
        for v in &mut img {
            *v += normal.sample(&mut nr);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Renders one image from its per-sample seed with the given lesion kinds,
/// also returning the lesion-free render of the same seed.
pub fn render_pair(cfg: &SynthConfig, sample_seed: u64, kinds: &[LesionKind]) -> (Tensor, Tensor) {
    let mut r = rng(sample_seed);
    let geometry = sample_geometry(cfg, &mut r);
    let lesions: Vec<Lesion> = kinds.iter().map(|&k| sample_lesion(k, cfg, &mut r)).collect();
    let noise_seed = mix(sample_seed, 0x6e6f697365);
    let side = cfg.image_side;
    let with = Tensor::new(vec![side, side], render(cfg, &geometry, &lesions, noise_seed));
    let without = Tensor::new(vec![side, side], render(cfg, &geometry, &[], noise_seed));
    (with.expect("image shape"), without.expect("image shape"))
}

fn render_sample(cfg: &SynthConfig, sample_seed: u64, kinds: &[LesionKind]) -> Tensor {
    let mut r = rng(sample_seed);
    let geometry = sample_geometry(cfg, &mut r);
    let lesions: Vec<Lesion> = kinds.iter().map(|&k| sample_lesion(k, cfg, &mut r)).collect();
    let noise_seed = mix(sample_seed, 0x6e6f697365);
    Tensor::new(
        vec![cfg.image_side, cfg.image_side],
        render(cfg, &geometry, &lesions, noise_seed),
    )
    .expect("image shape")
}

fn random_kinds(r: &mut ChaCha8Rng, count: u32, pool: &[LesionKind]) -> Vec<LesionKind> {
    (0..count).map(|_| *pool.choose(r).expect("non-empty pool")).collect()
}

fn labeled(id: String, image: Tensor, gt: GroundTruth) -> ImageSample {
    ImageSample {
        id,
        image,
        biomarkers: Some(gt.biomarkers),
        severity: Some(gt.severity),
    }
}

fn check_config(cfg: &SynthConfig) -> Result<()> {
    if !crate::models::SUPPORTED_SIDES.contains(&cfg.image_side) {
        return Err(Error::Config(format!("unsupported image side {}", cfg.image_side)));
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.lesion_strength > 0.0) {
        return Err(Error::Config("noise_std must be >= 0 and lesion_strength > 0".into()));
    }
    Ok(())
}

/// `n` lesion-free images with ids `{prefix}-{index}`.
pub fn generate_healthy_with_prefix(n: usize, cfg: &SynthConfig, prefix: &str) -> Result<Dataset> {
    check_config(cfg)?;
    let stream = derive_seed(cfg.seed, &format!("healthy/{prefix}"));
    let samples = (0..n)
        .map(|i| {
            let image = render_sample(cfg, mix(stream, i as u64), &[]);
            labeled(format!("{prefix}-{i:05}"), image, GroundTruth::from_lesions(&[]))
        })
        .collect();
    Ok(Dataset { samples })
}

pub fn generate_healthy(n: usize, cfg: &SynthConfig) -> Result<Dataset> {
    generate_healthy_with_prefix(n, cfg, "h")
}

/// Mixed-severity corpus: severities uniform over `0..=severity_max`, lesion
/// kinds drawn uniformly per lesion.
pub fn generate_unlabeled(n: usize, severity_max: u32, cfg: &SynthConfig) -> Result<UnlabeledCorpus> {
    check_config(cfg)?;
    let stream = derive_seed(cfg.seed, "unlabeled");
    let mut view = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let s = mix(stream, i as u64);
        let mut r = rng(mix(s, 1));
        let severity = r.gen_range(0..=severity_max);
        let kinds = random_kinds(&mut r, severity, &LesionKind::ALL);
        view.push(ImageSample {
            id: format!("u-{i:05}"),
            image: render_sample(cfg, s, &kinds),
            biomarkers: None,
            severity: None,
        });
        truth.push(GroundTruth::from_lesions(&kinds));
    }
    UnlabeledCorpus::new(Dataset { samples: view }, truth)
}

/// Labeled train set plus one balanced binary test set per biomarker and a
/// multi-label test set. Splits draw from disjoint seed streams and id spaces.
pub fn generate_labeled_splits(
    n_train: usize,
    n_test_per_biomarker: usize,
    n_multilabel_test: usize,
    severity_max: u32,
    cfg: &SynthConfig,
) -> Result<LabeledSplits> {
    check_config(cfg)?;
    if n_test_per_biomarker % 2 != 0 {
        return Err(Error::Config(format!(
            "test_per_biomarker must be even for a balanced split, got {n_test_per_biomarker}"
        )));
    }
    let severity_max = severity_max.max(1);
    let mixed = |tag: &str, n: usize| -> Dataset {
        let stream = derive_seed(cfg.seed, tag);
        let samples = (0..n)
            .map(|i| {
                let s = mix(stream, i as u64);
                let mut r = rng(mix(s, 1));
                let severity = r.gen_range(0..=severity_max);
                let kinds = random_kinds(&mut r, severity, &LesionKind::ALL);
                labeled(format!("{tag}-{i:05}"), render_sample(cfg, s, &kinds), GroundTruth::from_lesions(&kinds))
            })
            .collect();
        Dataset { samples }
    };

    let train = mixed("train", n_train);
    let multilabel_test = mixed("test-multi", n_multilabel_test);

    let binary_tests = LesionKind::ALL
        .iter()
        .map(|&target| {
            let tag = format!("test-{}", BIOMARKER_NAMES[target.index()]);
            let stream = derive_seed(cfg.seed, &tag);
            let others: Vec<LesionKind> = LesionKind::ALL.iter().copied().filter(|&k| k != target).collect();
            let samples = (0..n_test_per_biomarker)
                .map(|i| {
                    let s = mix(stream, i as u64);
                    let mut r = rng(mix(s, 1));
                    let kinds = if i % 2 == 0 {
                        let extra = r.gen_range(0..severity_max);
                        let mut k = vec![target];
                        k.extend(random_kinds(&mut r, extra, &LesionKind::ALL));
                        k
                    } else {
                        let count = r.gen_range(0..=severity_max);
                        random_kinds(&mut r, count, &others)
                    };
                    labeled(format!("{tag}-{i:05}"), render_sample(cfg, s, &kinds), GroundTruth::from_lesions(&kinds))
                })
                .collect();
            Dataset { samples }
        })
        .collect();

    Ok(LabeledSplits {
        train,
        binary_tests,
        multilabel_test,
    })
}

const IMAGE_MAGIC: &[u8; 4] = b"SVIM";
const VALUE_F64_LE: u8 = 1;

/// Flat binary image: magic, `u32` side (LE), one value-type byte, then
/// `side * side` little-endian `f64` values in row-major order.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let side = image.shape()[0];
    if image.shape() != [side, side] {
        return Err(Error::shape("write_image", "[side, side]", image.shape()));
    }
    let mut buf = Vec::with_capacity(9 + image.len() * 8);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(side as u32).to_le_bytes());
    buf.push(VALUE_F64_LE);
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < 9 || &buf[..4] != IMAGE_MAGIC {
        return Err(bad("bad image magic"));
    }
    let side = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    if buf[8] != VALUE_F64_LE {
        return Err(bad("unsupported value type"));
    }
    if buf.len() != 9 + side * side * 8 {
        return Err(bad("truncated image payload"));
    }
    let data = buf[9..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![side, side], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Split name to ordered sample ids.
    pub splits: Vec<(String, Vec<String>)>,
}

fn labels_header() -> String {
    let mut h = String::from("sample_id");
    for name in BIOMARKER_NAMES {
        h.push(',');
        h.push_str(name);
    }
    h.push_str(",severity\n");
    h
}

fn labels_row(id: &str, gt: &GroundTruth) -> String {
    let mut row = id.to_string();
    for b in gt.biomarkers {
        row.push_str(if b { ",1" } else { ",0" });
    }
    row.push_str(&format!(",{}\n", gt.severity));
    row
}

/// Writes a dataset directory: `manifest.json`, `images/<id>.img` and
/// optionally a `labels_file` with ground truth.
pub fn write_dataset_dir(
    dir: &Path,
    config: &SynthConfig,
    config_hash: &str,
    splits: &[(&str, &Dataset)],
    ground_truth: Option<(&str, Vec<(String, GroundTruth)>)>,
) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = Manifest {
        config: config.clone(),
        seed: config.seed,
        config_hash: config_hash.to_string(),
        splits: Vec::new(),
    };
    for (name, ds) in splits {
        for s in &ds.samples {
            write_image(&images.join(format!("{}.img", s.id)), &s.image)?;
        }
        manifest.splits.push((name.to_string(), ds.ids()));
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some((file, rows)) = ground_truth {
        write_labels(&dir.join(file), &rows)?;
    }
    Ok(())
}

/// Ground-truth CSV: `sample_id,bio_a,..,bio_e,severity`.
pub fn write_labels(path: &Path, rows: &[(String, GroundTruth)]) -> Result<()> {
    let mut out = labels_header();
    for (id, gt) in rows {
        out.push_str(&labels_row(id, gt));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, GroundTruth)>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(|l| format!("{l}\n")) != Some(labels_header()) {
        return Err(bad("unexpected labels header".into()));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != N_BIOMARKERS + 2 {
                return Err(bad(format!("expected {} columns: {line}", N_BIOMARKERS + 2)));
            }
            let mut biomarkers = [false; N_BIOMARKERS];
            for (b, c) in biomarkers.iter_mut().zip(&cols[1..=N_BIOMARKERS]) {
                *b = match *c {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("bad label value {other}"))),
                };
            }
            let severity = cols[N_BIOMARKERS + 1]
                .parse()
                .map_err(|_| bad(format!("bad severity in {line}")))?;
            Ok((cols[0].to_string(), GroundTruth { severity, biomarkers }))
        })
        .collect()
}

/// Loads one split; labels are attached when `labels` is given.
pub fn read_split(
    dir: &Path,
    manifest: &Manifest,
    split: &str,
    labels: Option<&[(String, GroundTruth)]>,
) -> Result<Dataset> {
    let ids = manifest
        .splits
        .iter()
        .find(|(n, _)| n == split)
        .map(|(_, ids)| ids)
        .ok_or_else(|| Error::Format {
            path: dir.join("manifest.json"),
            reason: format!("no split named {split}"),
        })?;
    let lookup: std::collections::HashMap<&str, &GroundTruth> = labels
        .unwrap_or(&[])
        .iter()
        .map(|(id, gt)| (id.as_str(), gt))
        .collect();
    let samples = ids
        .iter()
        .map(|id| {
            let image = read_image(&dir.join("images").join(format!("{id}.img")))?;
            let gt = if labels.is_some() {
                Some(lookup.get(id.as_str()).copied().ok_or_else(|| Error::Format {
                    path: dir.to_path_buf(),
                    reason: format!("label column missing for {id}"),
                })?)
            } else {
                None
            };
            Ok(ImageSample {
                id: id.clone(),
                image,
                biomarkers: gt.map(|g| g.biomarkers),
                severity: gt.map(|g| g.severity),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

/// Tiles `[side, side]` images into a grid and writes a binary PGM (P5).
pub fn write_contact_sheet(path: &Path, images: &[&Tensor], columns: usize) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("contact sheet needs at least one image".into()))?;
    let side = first.shape()[0];
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let (w, h) = (columns * (side + 1) + 1, rows * (side + 1) + 1);
    let mut pixels = vec![255u8; w * h];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != [side, side] {
            return Err(Error::shape("contact sheet", [side, side], img.shape()));
        }
        let (ox, oy) = (1 + (k % columns) * (side + 1), 1 + (k / columns) * (side + 1));
        for y in 0..side {
            for x in 0..side {
                let v = img.data()[y * side + x].clamp(0.0, 1.0);
                pixels[(oy + y) * w + ox + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn healthy_is_clean_and_deterministic() {
        let a = generate_healthy(20, &small()).unwrap();
        let b = generate_healthy(20, &small()).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert_eq!(s.severity, Some(0));
            assert_eq!(s.biomarkers, Some([false; N_BIOMARKERS]));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unlabeled_hides_ground_truth() {
        let c = generate_unlabeled(50, 4, &small()).unwrap();
        assert!(c.view().samples.iter().all(|s| s.biomarkers.is_none() && s.severity.is_none()));
        for gt in c.ground_truth() {
            assert_eq!(gt.severity == 0, gt.biomarkers.iter().all(|b| !b));
            assert!(gt.biomarkers.iter().filter(|&&b| b).count() as u32 <= gt.severity);
        }
    }

    #[test]
    fn lesions_always_change_the_image() {
        let cfg = small();
        for (i, kind) in LesionKind::ALL.iter().enumerate() {
            for s in 0..10u64 {
                let (with, without) = render_pair(&cfg, mix(99, s * 7 + i as u64), &[*kind]);
                let d: f64 = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0, "{kind:?} seed {s}");
            }
        }
    }

    #[test]
    fn labeled_splits_are_balanced_and_disjoint() {
        let splits = generate_labeled_splits(40, 20, 10, 4, &small()).unwrap();
        assert_eq!(splits.binary_tests.len(), N_BIOMARKERS);
        let mut test_ids = std::collections::HashSet::new();
        for (b, ds) in splits.binary_tests.iter().enumerate() {
            let col = ds.label_column(b).unwrap();
            assert_eq!(col.iter().filter(|&&v| v).count(), 10);
            assert_eq!(col.len(), 20);
            test_ids.extend(ds.ids());
        }
        test_ids.extend(splits.multilabel_test.ids());
        assert!(splits.train.ids().iter().all(|id| !test_ids.contains(id)));
    }

    #[test]
    fn odd_test_size_is_rejected() {
        assert!(generate_labeled_splits(4, 3, 2, 4, &small()).is_err());
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = generate_healthy(1, &small()).unwrap().samples.remove(0).image;
        let p = dir.path().join("x.img");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        fs::write(&p, b"nope").unwrap();
        assert!(read_image(&p).is_err());
    }
}
