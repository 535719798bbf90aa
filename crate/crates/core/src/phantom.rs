//! Synthetic brain-like phantoms with simulated regional hypometabolism.
//!
//! Images are built on a nonnegative uptake scale `u` in `[0, 1]` and mapped
//! to `[-1, 1]` at the end. A subject fixes the anatomy (head ellipse,
//! cortical ribbon folding, subcortical nuclei, smooth intensity modulation);
//! slices of one subject differ by axial position and acquisition noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_uptake, to_uptake, ImageTensor};
use crate::io::{read_image, read_json, write_image, write_json};
use crate::noise::{sample_field, NoiseConfig, NoiseKind};
use crate::seed;

/// Uptake above which a pixel counts as head tissue.
pub const HEAD_UPTAKE_THRESHOLD: f64 = 0.15;
const MIN_REGION_FRACTION: f64 = 0.05;
const MAX_REGION_FRACTION: f64 = 0.20;
const REGION_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyRegion {
    AngularSector,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub hypometabolism_fraction: f64,
    pub anomaly_region: AnomalyRegion,
    pub mask_smoothing_sigma: f64,
    pub acquisition_noise_std: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_subjects: 30,
            slices_per_subject: 4,
            hypometabolism_fraction: 0.30,
            anomaly_region: AnomalyRegion::AngularSector,
            mask_smoothing_sigma: 1.5,
            acquisition_noise_std: 0.02,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config("phantom.size must be >= 16"));
        }
        if self.n_subjects < 10 {
            return Err(Error::config(format!(
                "phantom.n_subjects must be >= 10 for the splits, got {}",
                self.n_subjects
            )));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::config("phantom.slices_per_subject must be >= 1"));
        }
        if !(self.hypometabolism_fraction > 0.0 && self.hypometabolism_fraction < 1.0) {
            return Err(Error::config("phantom.hypometabolism_fraction must lie in (0, 1)"));
        }
        if !(self.mask_smoothing_sigma >= 0.0) || !(self.acquisition_noise_std >= 0.0) {
            return Err(Error::config("phantom smoothing and noise must be nonnegative"));
        }
        let fractions_ok =
            self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0;
        if !fractions_ok {
            return Err(Error::config(
                "phantom split fractions must be positive and sum below 1",
            ));
        }
        Ok(())
    }
}

/// Per-subject anatomy, drawn once from the subject seed.
#[derive(Debug, Clone)]
struct Anatomy {
    center: (f64, f64),
    axes: (f64, f64),
    rotation: f64,
    base_uptake: f64,
    ribbon_uptake: f64,
    ribbon_radius: f64,
    fold_count: f64,
    fold_phase: f64,
    fold_depth: f64,
    nuclei: Vec<Nucleus>,
    ventricle_depth: f64,
    modulation_seed: u64,
}

#[derive(Debug, Clone)]
struct Nucleus {
    x: f64,
    y: f64,
    radius: f64,
    uptake: f64,
}

impl Anatomy {
    fn sample(subject_seed: u64) -> Self {
        let mut rng = seed::rng(&[subject_seed, seed::label("anatomy")]);
        let n_nuclei = rng.random_range(2..=4);
        let nuclei = (0..n_nuclei)
            .map(|_| {
                let r = rng.random_range(0.1..0.45);
                let phi = rng.random_range(0.0..2.0 * PI);
                Nucleus {
                    x: r * phi.cos(),
                    y: r * phi.sin(),
                    radius: rng.random_range(0.07..0.13),
                    uptake: rng.random_range(0.25..0.4),
                }
            })
            .collect();
        Self {
            center: (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)),
            axes: (rng.random_range(0.7..0.8), rng.random_range(0.8..0.9)),
            rotation: rng.random_range(-0.15..0.15),
            base_uptake: rng.random_range(0.38..0.48),
            ribbon_uptake: rng.random_range(0.38..0.5),
            ribbon_radius: rng.random_range(0.82..0.88),
            fold_count: f64::from(rng.random_range(5..=9u32)),
            fold_phase: rng.random_range(0.0..2.0 * PI),
            fold_depth: rng.random_range(0.02..0.04),
            nuclei,
            ventricle_depth: rng.random_range(0.1..0.2),
            modulation_seed: rng.random(),
        }
    }

    /// Noise-free uptake of the slice at axial position `z` in `[-1, 1]`.
    fn render(&self, size: usize, z: f64) -> ImageTensor {
        let level = (1.0 - 0.25 * z * z).sqrt();
        let (a, b) = (self.axes.0 * level, self.axes.1 * level);
        let (sin, cos) = self.rotation.sin_cos();
        let modulation = sample_field(
            size,
            size,
            &NoiseConfig {
                kind: NoiseKind::Simplex,
                octaves: 2,
                base_frequency: 2.0,
                persistence: 0.5,
                seed: self.modulation_seed,
            },
            0,
        )
        .expect("phantom size is a valid noise field size");
        ImageTensor::from_fn(size, size, |row, col| {
            let x = 2.0 * (col as f64 + 0.5) / size as f64 - 1.0 - self.center.0;
            let y = 2.0 * (row as f64 + 0.5) / size as f64 - 1.0 - self.center.1;
            let xr = cos * x + sin * y;
            let yr = -sin * x + cos * y;
            let r = ((xr / a).powi(2) + (yr / b).powi(2)).sqrt();
            let edge = ((1.0 - r) / 0.04).clamp(0.0, 1.0);
            if edge == 0.0 {
                return 0.0;
            }
            let theta = yr.atan2(xr);
            let ribbon_r = self.ribbon_radius + self.fold_depth * (self.fold_count * theta + self.fold_phase).sin();
            let mut u = self.base_uptake + self.ribbon_uptake * (-((r - ribbon_r) / 0.06).powi(2)).exp();
            for n in &self.nuclei {
                let d2 = ((xr - n.x * level).powi(2) + (yr - n.y * level).powi(2)) / (n.radius * n.radius);
                u += n.uptake * (-d2).exp();
            }
            let vent = (xr / 0.12).powi(2) + (yr / 0.22).powi(2);
            u -= self.ventricle_depth * (-vent).exp();
            let m = (1.0 + 0.04 * modulation.values.get(row, col)).clamp(0.85, 1.15);
            (u * m * edge).clamp(0.0, 1.0)
        })
    }
}

fn add_acquisition_noise(uptake: &mut ImageTensor, std: f64, noise_seed: u64) {
    if std == 0.0 {
        return;
    }
    let mut rng = seed::rng(&[noise_seed, seed::label("acquisition")]);
    let normal = Normal::new(0.0, std).expect("validated std");
    for u in uptake.as_mut_slice() {
        *u = (*u + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

fn slice_position(slice: usize, n_slices: usize) -> f64 {
    if n_slices <= 1 {
        0.0
    } else {
        -0.6 + 1.2 * slice as f64 / (n_slices - 1) as f64
    }
}

/// A healthy slice of the subject at axial position `z`, in `[-1, 1]`.
pub fn generate_healthy_slice(subject_seed: u64, z: f64, noise_seed: u64, cfg: &PhantomConfig) -> ImageTensor {
    let mut u = Anatomy::sample(subject_seed).render(cfg.size, z);
    add_acquisition_noise(&mut u, cfg.acquisition_noise_std, noise_seed);
    u.map(from_uptake)
}

/// The central healthy slice of a subject, in `[-1, 1]`.
pub fn generate_healthy(subject_seed: u64, cfg: &PhantomConfig) -> ImageTensor {
    generate_healthy_slice(subject_seed, 0.0, subject_seed, cfg)
}

/// Head geometry estimated from the image: centroid, principal axes and
/// the ellipse with matching second moments.
struct HeadFrame {
    cy: f64,
    cx: f64,
    axes: [(f64, f64); 2],
    radii: [f64; 2],
    area: usize,
}

impl HeadFrame {
    fn estimate(head: &[bool], size: usize) -> Option<Self> {
        let pts: Vec<(f64, f64)> = (0..size * size)
            .filter(|&i| head[i])
            .map(|i| ((i / size) as f64, (i % size) as f64))
            .collect();
        if pts.len() < 16 {
            return None;
        }
        let n = pts.len() as f64;
        let cy = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let cx = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
        for (y, x) in &pts {
            syy += (y - cy).powi(2);
            sxx += (x - cx).powi(2);
            sxy += (y - cy) * (x - cx);
        }
        let (syy, sxx, sxy) = (syy / n, sxx / n, sxy / n);
        let tr = syy + sxx;
        let disc = ((syy - sxx).powi(2) / 4.0 + sxy * sxy).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = (tr / 2.0 - disc).max(1e-9);
        let angle = 0.5 * (2.0 * sxy).atan2(syy - sxx);
        let v1 = (angle.cos(), angle.sin());
        let v2 = (-angle.sin(), angle.cos());
        // a uniform ellipse has variance radius^2 / 4 along each axis
        Some(Self {
            cy,
            cx,
            axes: [v1, v2],
            radii: [2.0 * l1.sqrt(), 2.0 * l2.sqrt()],
            area: pts.len(),
        })
    }

    /// Elliptical radius and angle of pixel `(row, col)`.
    fn polar(&self, row: usize, col: usize) -> (f64, f64) {
        let (dy, dx) = (row as f64 - self.cy, col as f64 - self.cx);
        let p = (dy * self.axes[0].0 + dx * self.axes[0].1) / self.radii[0];
        let q = (dy * self.axes[1].0 + dx * self.axes[1].1) / self.radii[1];
        ((p * p + q * q).sqrt(), q.atan2(p))
    }
}

fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn propose_region(frame: &HeadFrame, kind: AnomalyRegion, size: usize, rng: &mut impl Rng) -> Vec<bool> {
    let target = rng.random_range(0.07..0.17);
    match kind {
        AnomalyRegion::AngularSector => {
            let inner = 0.55;
            let half_width = target * PI / (1.0 - inner * inner);
            let center = rng.random_range(-PI..PI);
            (0..size * size)
                .map(|i| {
                    let (r, theta) = frame.polar(i / size, i % size);
                    (inner..=1.2).contains(&r) && angle_distance(theta, center) <= half_width
                })
                .collect()
        }
        AnomalyRegion::Blob => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let rel = target.sqrt();
            let (ra, rb) = (rel * aspect.sqrt(), rel / aspect.sqrt());
            let dist = rng.random_range(0.0..0.6);
            let phi = rng.random_range(-PI..PI);
            let rot = rng.random_range(0.0..PI);
            let (p0, q0) = (dist * phi.cos(), dist * phi.sin());
            (0..size * size)
                .map(|i| {
                    let (r, theta) = frame.polar(i / size, i % size);
                    let (p, q) = (r * theta.cos() - p0, r * theta.sin() - q0);
                    let (u, v) = (p * rot.cos() + q * rot.sin(), -p * rot.sin() + q * rot.cos());
                    (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
                })
                .collect()
        }
    }
}

/// Simulated regional hypometabolism. Returns the abnormal image and the
/// binary region mask.
///
/// The region (cortical sector or blob covering 5 to 20% of the head) is
/// blurred into weights `w`, and uptake is scaled by `1 - fraction * w`.
/// Pixels with `w = 0` are returned unchanged.
pub fn apply_hypometabolism(
    healthy: &ImageTensor,
    cfg: &PhantomConfig,
    anomaly_seed: u64,
) -> Result<(ImageTensor, ImageTensor)> {
    let (h, w) = healthy.shape();
    if h != w {
        return Err(Error::domain("phantom images must be square"));
    }
    if healthy.as_slice().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::domain("healthy image must lie in [-1, 1]"));
    }
    let head: Vec<bool> = healthy
        .as_slice()
        .iter()
        .map(|&x| to_uptake(x) > HEAD_UPTAKE_THRESHOLD)
        .collect();
    let frame = HeadFrame::estimate(&head, h).ok_or_else(|| Error::domain("no head found in image"))?;
    let mut rng = seed::rng(&[anomaly_seed, seed::label("hypometabolism")]);
    for _ in 0..REGION_ATTEMPTS {
        let region = propose_region(&frame, cfg.anomaly_region, h, &mut rng);
        let mask: Vec<bool> = region.iter().zip(&head).map(|(&r, &hd)| r && hd).collect();
        let area = mask.iter().filter(|&&m| m).count() as f64 / frame.area as f64;
        if !(MIN_REGION_FRACTION..=MAX_REGION_FRACTION).contains(&area) {
            continue;
        }
        let mask = ImageTensor::new(h, w, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
        let weights = mask.gaussian_blur(cfg.mask_smoothing_sigma);
        let abnormal = healthy.zip_map(&weights, |x, wt| {
            let factor = 1.0 - cfg.hypometabolism_fraction * wt.min(1.0);
            if wt <= 0.0 || factor == 1.0 {
                x
            } else {
                from_uptake(to_uptake(x) * factor).clamp(-1.0, x)
            }
        })?;
        return Ok((abnormal, mask));
    }
    Err(Error::domain(format!(
        "no valid anomaly region after {REGION_ATTEMPTS} attempts"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject counts for `(train, val, test)`: each held-out split gets
/// `floor(fraction * n)` subjects but at least one.
pub fn split_sizes(n_subjects: usize, cfg: &PhantomConfig) -> Result<(usize, usize, usize)> {
    if n_subjects < 10 {
        return Err(Error::config(format!(
            "need at least 10 subjects for the splits, got {n_subjects}"
        )));
    }
    let test = ((cfg.test_fraction * n_subjects as f64).floor() as usize).max(1);
    let val = ((cfg.val_fraction * n_subjects as f64).floor() as usize).max(1);
    if test + val >= n_subjects {
        return Err(Error::config("no subjects left for training"));
    }
    Ok((n_subjects - test - val, val, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub slice_id: usize,
    pub noise_seed: u64,
    /// Healthy image, relative to the dataset root.
    pub healthy: PathBuf,
    pub anomaly_seed: Option<u64>,
    pub abnormal: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: usize,
    pub split: Split,
    pub seed: u64,
    pub slices: Vec<SliceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub phantom: PhantomConfig,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn image_size(&self) -> usize {
        self.phantom.size
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }
}

/// One generated slice with its anomalous counterpart for test subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub subject_id: usize,
    pub slice_id: usize,
    pub healthy: ImageTensor,
    pub abnormal: Option<ImageTensor>,
    pub mask: Option<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PhantomSample>,
}

pub fn slice_file_name(subject_id: usize, slice_id: usize) -> String {
    format!("s{subject_id:04}_{slice_id:02}.abfn")
}

/// Directory of a split's healthy images, relative to the dataset root.
fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test_cn",
    }
}

/// Plans subject-level splits and seeds from `cfg.seed` and generates every
/// image.
pub fn build_dataset(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n_train, n_val, _) = split_sizes(cfg.n_subjects, cfg)?;
    let mut order: Vec<usize> = (0..cfg.n_subjects).collect();
    let mut rng = seed::rng(&[cfg.seed, seed::label("split")]);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut split_of = vec![Split::Train; cfg.n_subjects];
    for (rank, &subject) in order.iter().enumerate() {
        split_of[subject] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let subjects: Vec<SubjectEntry> = (0..cfg.n_subjects)
        .map(|id| {
            let subject_seed = seed::mix(&[cfg.seed, seed::label("subject"), id as u64]);
            let split = split_of[id];
            let slices = (0..cfg.slices_per_subject)
                .map(|slice_id| {
                    let name = slice_file_name(id, slice_id);
                    let is_test = split == Split::Test;
                    SliceEntry {
                        slice_id,
                        noise_seed: seed::mix(&[subject_seed, seed::label("slice"), slice_id as u64]),
                        healthy: Path::new(split_dir(split)).join(&name),
                        anomaly_seed: is_test
                            .then(|| seed::mix(&[subject_seed, seed::label("anomaly"), slice_id as u64])),
                        abnormal: is_test.then(|| Path::new("test_sad/abnormal").join(&name)),
                        mask: is_test.then(|| Path::new("test_sad/mask").join(&name)),
                    }
                })
                .collect();
            SubjectEntry {
                subject_id: id,
                split,
                seed: subject_seed,
                slices,
            }
        })
        .collect();

    let jobs: Vec<(usize, u64, &SliceEntry)> = subjects
        .iter()
        .flat_map(|s| s.slices.iter().map(move |e| (s.subject_id, s.seed, e)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(subject_id, subject_seed, entry)| {
            let z = slice_position(entry.slice_id, cfg.slices_per_subject);
            let healthy = generate_healthy_slice(subject_seed, z, entry.noise_seed, cfg);
            let (abnormal, mask) = match entry.anomaly_seed {
                Some(s) => {
                    let (a, m) = apply_hypometabolism(&healthy, cfg, s)?;
                    (Some(a), Some(m))
                }
                None => (None, None),
            };
            Ok(PhantomSample {
                subject_id,
                slice_id: entry.slice_id,
                healthy,
                abnormal,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        manifest: DatasetManifest {
            master_seed: cfg.seed,
            phantom: cfg.clone(),
            subjects,
        },
        samples,
    })
}

impl Dataset {
    /// Writes every image and `manifest.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let entries = self.manifest.subjects.iter().flat_map(|s| s.slices.iter());
        for (sample, entry) in self.samples.iter().zip(entries) {
            write_image(&root.join(&entry.healthy), &sample.healthy)?;
            if let (Some(a), Some(path)) = (&sample.abnormal, &entry.abnormal) {
                write_image(&root.join(path), a)?;
            }
            if let (Some(m), Some(path)) = (&sample.mask, &entry.mask) {
                write_image(&root.join(path), m)?;
            }
        }
        write_json(&root.join("manifest.json"), &self.manifest)
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    manifest.phantom.seed = manifest.master_seed;
    Ok(manifest)
}

/// Loads the healthy images of every subject in `split`, in manifest order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<(usize, usize, ImageTensor)>> {
    manifest
        .subjects_in(split)
        .flat_map(|s| s.slices.iter().map(move |e| (s.subject_id, e)))
        .map(|(id, e)| Ok((id, e.slice_id, read_image(&root.join(&e.healthy))?)))
        .collect()
}
