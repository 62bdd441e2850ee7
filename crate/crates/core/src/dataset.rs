//! Synthetic stimulus/response datasets with the shape of a voxelwise fMRI
//! experiment: colored shapes at random poses, trial-repeated voxel responses
//! split into a low-level (pixel-driven) and a high-level (category-driven)
//! region, templated captions, and a disjoint train/test split.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, splitmix64};
use crate::tensor::Tensor;

/// Caption vocabulary. Token ids index into this table.
pub const VOCABULARY: [&str; 16] = [
    "small", "large", "red", "green", "blue", "purple", "square", "circle", "triangle", "cross",
    "upper", "middle", "lower", "left", "center", "right",
];

const SIZE_TOKENS: usize = 0;
const COLOR_TOKENS: usize = 2;
const SHAPE_TOKENS: usize = 6;
const ROW_TOKENS: usize = 10;
const COL_TOKENS: usize = 13;

/// Shape tint for each class. Every tint has channel mean 0.6, so the
/// luminance-driven region cannot tell classes apart by color.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.9, 0.45, 0.45],
    [0.45, 0.9, 0.45],
    [0.45, 0.45, 0.9],
    [0.75, 0.3, 0.75],
];

pub const MAX_CLASSES: usize = CLASS_COLORS.len();
pub const CHANNELS: usize = 3;
/// Length of the coarse-pose code: row bin, column bin, size bin (one-hot each).
pub const COARSE_POSE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Roi {
    Lvc,
    Hvc,
}

impl Roi {
    pub fn parse_set(s: &str) -> Result<Vec<Roi>> {
        match s {
            "all" => Ok(vec![Roi::Lvc, Roi::Hvc]),
            "lvc" => Ok(vec![Roi::Lvc]),
            "hvc" => Ok(vec![Roi::Hvc]),
            other => Err(Error::Config(format!("unknown roi set `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    pub lvc_voxels: usize,
    pub hvc_voxels: usize,
    pub train_stimuli: usize,
    pub test_stimuli: usize,
    /// Response noise sd as a fraction of each voxel's signal sd.
    pub noise: f64,
    pub max_trials: usize,
    /// Side of the luminance grid the low-level region sees.
    pub lvc_grid: usize,
    pub max_caption_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 4,
            lvc_voxels: 512,
            hvc_voxels: 512,
            train_stimuli: 512,
            test_stimuli: 64,
            noise: 0.1,
            max_trials: 3,
            lvc_grid: 16,
            max_caption_tokens: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return err("classes must be in 2..=4");
        }
        if self.image_size < 16 {
            return err("image_size must be at least 16");
        }
        if self.lvc_voxels < 8 || self.hvc_voxels < 8 {
            return err("each roi needs at least 8 voxels");
        }
        if self.train_stimuli == 0 || self.test_stimuli == 0 {
            return err("train and test splits must be non-empty");
        }
        if self.max_trials == 0 {
            return err("max_trials must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise must be a finite non-negative number");
        }
        if self.lvc_grid == 0 || !self.image_size.is_multiple_of(self.lvc_grid) {
            return err("lvc_grid must divide image_size");
        }
        if self.max_caption_tokens < 5 {
            return err("captions need at least 5 token slots");
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.lvc_voxels + self.hvc_voxels
    }
}

/// Ground-truth placement of the rendered shape, in pixels and radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub row: f64,
    pub col: f64,
    pub size: f64,
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stimulus {
    pub id: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub caption: Vec<usize>,
    pub class_id: usize,
    pub pose: Pose,
    /// One `[D_x]` tensor per recorded trial.
    pub trials: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainResponse {
    pub voxels: Tensor,
    pub roi_labels: Arc<[Roi]>,
    pub trial_count: usize,
}

/// Fixed linear maps that generate the synthetic responses.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelModel {
    /// `[lvc_voxels, grid*grid]` receptive-field weights over the luminance grid.
    pub lvc_weights: Tensor,
    /// `[hvc_voxels, classes + COARSE_POSE_DIM]`.
    pub hvc_weights: Tensor,
    /// Voxel position -> (roi, row in that roi's weight matrix).
    pub layout: Vec<(Roi, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: Option<u64>,
    pub roi_labels: Arc<[Roi]>,
    pub stimuli: Vec<Stimulus>,
    /// Indices into `stimuli`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Present for synthesized data only.
    pub voxel_model: Option<VoxelModel>,
}

fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u.abs() <= 0.85 && v.abs() <= 0.85,
        1 => u * u + v * v <= 1.0,
        2 => {
            // upward triangle with vertices (0,-1), (±0.866, 0.5)
            let s3 = 3f64.sqrt();
            v <= 0.5 && (s3 * u - v) <= 1.0 && (-s3 * u - v) <= 1.0
        }
        _ => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
    }
}

/// Renders one anti-aliased shape (4×4 supersampling) on a black background.
pub fn render(class: usize, pose: &Pose, size: usize) -> Tensor {
    const SS: usize = 4;
    let (sin, cos) = pose.orientation.sin_cos();
    let color = CLASS_COLORS[class];
    let mut img = Tensor::zeros(&[CHANNELS, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - pose.row;
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - pose.col;
                    let u = (cos * px + sin * py) / pose.size;
                    let v = (-sin * px + cos * py) / pose.size;
                    if shape_contains(class, u, v) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SS * SS) as f64;
            for (c, &col) in color.iter().enumerate() {
                img.data_mut()[c * plane + y * size + x] = cover * col;
            }
        }
    }
    img
}

fn bin3(pos: f64, extent: f64) -> usize {
    ((3.0 * pos / extent).floor() as usize).min(2)
}

fn size_bin(cfg: &SynthConfig, size: f64) -> usize {
    let (lo, hi) = size_range(cfg);
    usize::from(size >= 0.5 * (lo + hi))
}

fn size_range(cfg: &SynthConfig) -> (f64, f64) {
    let s = cfg.image_size as f64;
    (0.15 * s, 0.28 * s)
}

/// Caption tokens: size, color, shape, vertical position, horizontal position.
pub fn caption_for(cfg: &SynthConfig, class: usize, pose: &Pose) -> Vec<usize> {
    let s = cfg.image_size as f64;
    vec![
        SIZE_TOKENS + size_bin(cfg, pose.size),
        COLOR_TOKENS + class,
        SHAPE_TOKENS + class,
        ROW_TOKENS + bin3(pose.row, s),
        COL_TOKENS + bin3(pose.col, s),
    ]
}

pub fn caption_text(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| VOCABULARY.get(t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Class one-hot followed by the coarse-pose code.
pub fn semantic_code(cfg: &SynthConfig, class: usize, pose: &Pose) -> Vec<f64> {
    let s = cfg.image_size as f64;
    let mut v = vec![0.0; cfg.classes + COARSE_POSE_DIM];
    v[class] = 1.0;
    v[cfg.classes + bin3(pose.row, s)] = 1.0;
    v[cfg.classes + 3 + bin3(pose.col, s)] = 1.0;
    v[cfg.classes + 6 + size_bin(cfg, pose.size)] = 1.0;
    v
}

/// Channel-mean image block-averaged onto a `grid × grid` lattice.
pub fn luminance_grid(image: &Tensor, grid: usize) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (by, bx) = (h / grid, w / grid);
    let c = image.shape()[0];
    let d = image.data();
    let mut out = vec![0.0; grid * grid];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y / by) * grid + x / bx] += d[(ch * h + y) * w + x];
            }
        }
    }
    let n = (c * by * bx) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

impl VoxelModel {
    fn generate(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let g = cfg.lvc_grid;
        let mut lvc = Tensor::zeros(&[cfg.lvc_voxels, g * g]);
        for v in 0..cfg.lvc_voxels {
            let cy = rng.gen_range(0.0..g as f64);
            let cx = rng.gen_range(0.0..g as f64);
            let sigma = rng.gen_range(0.6..1.6) * g as f64 / 16.0;
            let gain = 1.0 + 0.25 * rng.sample::<f64, _>(StandardNormal);
            let row = &mut lvc.data_mut()[v * g * g..(v + 1) * g * g];
            for y in 0..g {
                for x in 0..g {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    row[y * g + x] = gain * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let sem = cfg.classes + COARSE_POSE_DIM;
        let hvc = Tensor::randn(&[cfg.hvc_voxels, sem], 1.0, rng);
        let mut layout: Vec<(Roi, usize)> = (0..cfg.lvc_voxels)
            .map(|i| (Roi::Lvc, i))
            .chain((0..cfg.hvc_voxels).map(|i| (Roi::Hvc, i)))
            .collect();
        layout.shuffle(rng);
        Self {
            lvc_weights: lvc,
            hvc_weights: hvc,
            layout,
        }
    }

    /// Noise-free response to one stimulus.
    pub fn signal(&self, cfg: &SynthConfig, image: &Tensor, class: usize, pose: &Pose) -> Vec<f64> {
        let lum = luminance_grid(image, cfg.lvc_grid);
        let sem = semantic_code(cfg, class, pose);
        let dot = |w: &Tensor, row: usize, x: &[f64]| -> f64 {
            let n = x.len();
            w.data()[row * n..(row + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()
        };
        self.layout
            .iter()
            .map(|&(roi, r)| match roi {
                Roi::Lvc => dot(&self.lvc_weights, r, &lum),
                Roi::Hvc => dot(&self.hvc_weights, r, &sem),
            })
            .collect()
    }
}

/// Builds a dataset as a pure function of `(config, seed)`.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut map_rng = seeded(splitmix64(seed ^ 0x6d61_7073));
    let mut stim_rng = seeded(splitmix64(seed ^ 0x7374_696d));
    let mut noise_rng = seeded(splitmix64(seed ^ 0x6e6f_6973));

    let model = VoxelModel::generate(cfg, &mut map_rng);
    let n = cfg.train_stimuli + cfg.test_stimuli;
    let s = cfg.image_size as f64;
    let (smin, smax) = size_range(cfg);

    let mut drafts = Vec::with_capacity(n);
    for id in 0..n {
        let class = stim_rng.gen_range(0..cfg.classes);
        let size = stim_rng.gen_range(smin..smax);
        let margin = size + 1.0;
        let pose = Pose {
            row: stim_rng.gen_range(margin..s - margin),
            col: stim_rng.gen_range(margin..s - margin),
            size,
            orientation: if class == 1 {
                0.0
            } else {
                stim_rng.gen_range(0.0..std::f64::consts::FRAC_PI_2)
            },
        };
        let trials = stim_rng.gen_range(1..=cfg.max_trials);
        let image = render(class, &pose, cfg.image_size);
        let signal = model.signal(cfg, &image, class, &pose);
        drafts.push((id, class, pose, trials, image, signal));
    }

    // per-voxel signal sd over all stimuli sets the noise scale
    let d = cfg.voxels();
    let mut sd = vec![0.0; d];
    for (j, sd_j) in sd.iter_mut().enumerate() {
        let mean = drafts.iter().map(|x| x.5[j]).sum::<f64>() / n as f64;
        let var = drafts.iter().map(|x| (x.5[j] - mean).powi(2)).sum::<f64>() / n as f64;
        *sd_j = var.sqrt();
    }

    let roi_labels: Arc<[Roi]> = model.layout.iter().map(|&(r, _)| r).collect();
    let mut stimuli = Vec::with_capacity(n);
    for (id, class, pose, trial_count, image, signal) in drafts {
        let trials = (0..trial_count)
            .map(|_| {
                let v: Vec<f64> = signal
                    .iter()
                    .zip(&sd)
                    .map(|(&x, &s)| x + cfg.noise * s * noise_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::from_vec(v)
            })
            .collect();
        stimuli.push(Stimulus {
            id,
            caption: caption_for(cfg, class, &pose),
            image,
            class_id: class,
            pose,
            trials,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        seed: Some(seed),
        roi_labels,
        stimuli,
        train: (0..cfg.train_stimuli).collect(),
        test: (cfg.train_stimuli..n).collect(),
        voxel_model: Some(model),
    })
}

/// Elementwise mean over trials.
pub fn average_trials(responses: &[BrainResponse]) -> Result<BrainResponse> {
    let first = responses
        .first()
        .ok_or_else(|| Error::contract("average_trials needs at least one response"))?;
    let d = first.voxels.len();
    let mut sum = vec![0.0; d];
    for r in responses {
        if r.voxels.len() != d {
            return Err(Error::contract(format!(
                "trial voxel counts differ: {} vs {d}",
                r.voxels.len()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(r.voxels.data()) {
            *s += v;
        }
    }
    let k = responses.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(BrainResponse {
        voxels: Tensor::from_vec(sum),
        roi_labels: first.roi_labels.clone(),
        trial_count: responses.len(),
    })
}

/// Keeps voxels whose tag is in `rois`, preserving order.
pub fn roi_subset(response: &BrainResponse, rois: &[Roi]) -> Result<BrainResponse> {
    if rois.is_empty() {
        return Err(Error::contract("roi selection is empty"));
    }
    let keep: Vec<f64> = response
        .voxels
        .data()
        .iter()
        .zip(response.roi_labels.iter())
        .filter(|(_, r)| rois.contains(r))
        .map(|(&v, _)| v)
        .collect();
    if keep.is_empty() {
        return Err(Error::contract("roi selection matches no voxels"));
    }
    let labels: Arc<[Roi]> = response.roi_labels.iter().copied().filter(|r| rois.contains(r)).collect();
    Ok(BrainResponse {
        voxels: Tensor::from_vec(keep),
        roi_labels: labels,
        trial_count: response.trial_count,
    })
}

impl Dataset {
    pub fn voxel_count(&self) -> usize {
        self.roi_labels.len()
    }

    pub fn trial_responses(&self, idx: usize) -> Vec<BrainResponse> {
        self.stimuli[idx]
            .trials
            .iter()
            .map(|t| BrainResponse {
                voxels: t.clone(),
                roi_labels: self.roi_labels.clone(),
                trial_count: 1,
            })
            .collect()
    }

    pub fn averaged(&self, idx: usize) -> BrainResponse {
        average_trials(&self.trial_responses(idx)).expect("stimulus has at least one trial")
    }

    /// Indices of voxels tagged with one of `rois`.
    pub fn voxel_indices(&self, rois: &[Roi]) -> Vec<usize> {
        (0..self.voxel_count())
            .filter(|&i| rois.contains(&self.roi_labels[i]))
            .collect()
    }

    /// `[N, D]` trial-averaged responses of `items`, restricted to `rois`.
    pub fn design_matrix(&self, items: &[usize], rois: &[Roi]) -> Result<Tensor> {
        let cols = self.voxel_indices(rois);
        if cols.is_empty() || items.is_empty() {
            return Err(Error::contract("empty design matrix"));
        }
        let mut data = Vec::with_capacity(items.len() * cols.len());
        for &i in items {
            let avg = self.averaged(i);
            data.extend(cols.iter().map(|&c| avg.voxels.data()[c]));
        }
        Tensor::new([items.len(), cols.len()], data)
    }

    /// The last `fraction` of the training split, used for validation sweeps.
    pub fn validation_split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n_val = ((self.train.len() as f64 * fraction).round() as usize).clamp(1, self.train.len() - 1);
        let cut = self.train.len() - n_val;
        (self.train[..cut].to_vec(), self.train[cut..].to_vec())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("stimuli"))?;
        let mut entries = Vec::with_capacity(self.stimuli.len());
        for s in &self.stimuli {
            let image_file = format!("stimuli/{:05}.image.mdt", s.id);
            let voxel_file = format!("stimuli/{:05}.voxels.mdt", s.id);
            s.image.save(dir.join(&image_file))?;
            let d = self.voxel_count();
            let mut flat = Vec::with_capacity(d * s.trials.len());
            for t in &s.trials {
                flat.extend_from_slice(t.data());
            }
            Tensor::new([s.trials.len(), d], flat)?.save(dir.join(&voxel_file))?;
            entries.push(StimulusEntry {
                id: s.id,
                image: image_file,
                voxels: voxel_file,
                caption: s.caption.clone(),
                class_id: s.class_id,
                pose: s.pose,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
            roi_labels: self.roi_labels.to_vec(),
            train: self.train.iter().map(|&i| self.stimuli[i].id).collect(),
            test: self.test.iter().map(|&i| self.stimuli[i].id).collect(),
            stimuli: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a dataset directory. Synthesized datasets get their generating
    /// maps rebuilt from the recorded seed.
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).map_err(Error::file(&mpath))?)?;
        let bad = |m: String| Error::format(&mpath, m);
        if manifest.format != MANIFEST_FORMAT {
            return Err(bad(format!("unknown format `{}`", manifest.format)));
        }
        let d = manifest.roi_labels.len();
        if d == 0 {
            return Err(bad("no voxels".into()));
        }
        let size = manifest.config.image_size;
        let mut stimuli = Vec::with_capacity(manifest.stimuli.len());
        for e in &manifest.stimuli {
            let image = Tensor::load(dir.join(&e.image))?;
            if image.shape() != [CHANNELS, size, size] {
                return Err(bad(format!("stimulus {} image shape {:?}", e.id, image.shape())));
            }
            if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(bad(format!("stimulus {} has pixels outside [0,1]", e.id)));
            }
            let vox = Tensor::load(dir.join(&e.voxels))?;
            if vox.rank() != 2 || vox.shape()[1] != d {
                return Err(bad(format!("stimulus {} voxel shape {:?}", e.id, vox.shape())));
            }
            if e.caption.len() > manifest.config.max_caption_tokens
                || e.caption.iter().any(|&t| t >= manifest.vocabulary.len())
            {
                return Err(bad(format!("stimulus {} caption out of range", e.id)));
            }
            let trials = (0..vox.shape()[0])
                .map(|t| Tensor::from_vec(vox.data()[t * d..(t + 1) * d].to_vec()))
                .collect();
            stimuli.push(Stimulus {
                id: e.id,
                image,
                caption: e.caption.clone(),
                class_id: e.class_id,
                pose: e.pose,
                trials,
            });
        }
        let position = |id: usize| -> Result<usize> {
            stimuli
                .iter()
                .position(|s| s.id == id)
                .ok_or_else(|| bad(format!("split references unknown stimulus {id}")))
        };
        let train = manifest.train.iter().map(|&i| position(i)).collect::<Result<Vec<_>>>()?;
        let test = manifest.test.iter().map(|&i| position(i)).collect::<Result<Vec<_>>>()?;
        let a: BTreeSet<_> = train.iter().collect();
        if test.iter().any(|i| a.contains(i)) {
            return Err(bad("train and test splits overlap".into()));
        }
        let voxel_model = match manifest.seed {
            Some(seed) if manifest.config.validate().is_ok() => {
                let mut map_rng = seeded(splitmix64(seed ^ 0x6d61_7073));
                let m = VoxelModel::generate(&manifest.config, &mut map_rng);
                (m.layout.len() == d).then_some(m)
            }
            _ => None,
        };
        Ok(Dataset {
            config: manifest.config,
            seed: manifest.seed,
            roi_labels: manifest.roi_labels.into(),
            stimuli,
            train,
            test,
            voxel_model,
        })
    }
}

const MANIFEST_FORMAT: &str = "mindloop-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: SynthConfig,
    seed: Option<u64>,
    vocabulary: Vec<String>,
    roi_labels: Vec<Roi>,
    train: Vec<usize>,
    test: Vec<usize>,
    stimuli: Vec<StimulusEntry>,
}

#[derive(Serialize, Deserialize)]
struct StimulusEntry {
    id: usize,
    image: String,
    voxels: String,
    caption: Vec<usize>,
    class_id: usize,
    pose: Pose,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            lvc_voxels: 40,
            hvc_voxels: 24,
            train_stimuli: 30,
            test_stimuli: 6,
            ..Default::default()
        }
    }

    fn response(v: Vec<f64>, labels: &[Roi]) -> BrainResponse {
        BrainResponse {
            voxels: Tensor::from_vec(v),
            roi_labels: labels.into(),
            trial_count: 1,
        }
    }

    #[test]
    fn degenerate_configs_fail() {
        for cfg in [
            SynthConfig { lvc_voxels: 0, ..small() },
            SynthConfig { train_stimuli: 0, ..small() },
            SynthConfig { classes: 1, ..small() },
            SynthConfig { image_size: 8, ..small() },
        ] {
            assert!(matches!(synthesize(&cfg, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn noiseless_responses_repeat() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let ds = synthesize(&cfg, 3).unwrap();
        for s in &ds.stimuli {
            for t in &s.trials {
                assert_eq!(t, &s.trials[0]);
            }
        }
        let again = synthesize(&cfg, 3).unwrap();
        assert_eq!(ds.stimuli[0].trials[0], again.stimuli[0].trials[0]);
    }

    #[test]
    fn seeded_synthesis_is_identical() {
        let a = synthesize(&small(), 7).unwrap();
        let b = synthesize(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&small(), 8).unwrap();
        assert_ne!(a.stimuli[0].image, c.stimuli[0].image);
    }

    #[test]
    fn images_and_captions_respect_bounds() {
        let ds = synthesize(&small(), 2).unwrap();
        for s in &ds.stimuli {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.caption.len() <= ds.config.max_caption_tokens);
            assert!((1..=3).contains(&s.trials.len()));
        }
        assert!(ds.train.iter().all(|i| !ds.test.contains(i)));
        assert_eq!(ds.roi_labels.iter().filter(|&&r| r == Roi::Lvc).count(), 40);
    }

    #[test]
    fn caption_reads_naturally() {
        let cfg = SynthConfig::default();
        let pose = Pose { row: 3.0, col: 3.0, size: 5.0, orientation: 0.0 };
        assert_eq!(caption_text(&caption_for(&cfg, 0, &pose)), "small red square upper left");
    }

    #[test]
    fn average_of_single_trial_is_identity() {
        let labels = [Roi::Lvc, Roi::Hvc, Roi::Lvc];
        let r = response(vec![1.0, -2.0, 0.5], &labels);
        let avg = average_trials(std::slice::from_ref(&r)).unwrap();
        assert_eq!(avg.voxels, r.voxels);
        assert_eq!(avg.trial_count, 1);
    }

    #[test]
    fn opposite_trials_cancel() {
        let labels = [Roi::Lvc, Roi::Hvc, Roi::Lvc];
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let avg = average_trials(&[response(v, &labels), response(neg, &labels)]).unwrap();
        assert!(avg.voxels.data().iter().all(|&x| x == 0.0));
        assert_eq!(avg.trial_count, 2);
    }

    #[test]
    fn average_matches_scalar_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let labels = vec![Roi::Lvc; 7];
        let trials: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rs: Vec<_> = trials.iter().map(|t| response(t.clone(), &labels)).collect();
        let avg = average_trials(&rs).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for t in &trials {
                s += t[j];
            }
            assert_eq!(avg.voxels.data()[j], s / 3.0);
        }
    }

    #[test]
    fn average_errors() {
        assert!(average_trials(&[]).is_err());
        let a = response(vec![1.0], &[Roi::Lvc]);
        let b = response(vec![1.0, 2.0], &[Roi::Lvc, Roi::Lvc]);
        assert!(average_trials(&[a, b]).is_err());
    }

    #[test]
    fn roi_subset_counts_and_permutation() {
        let mut labels = vec![Roi::Lvc; 10];
        labels.extend([Roi::Hvc; 5]);
        labels.swap(2, 12);
        let v: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let r = response(v.clone(), &labels);
        assert_eq!(roi_subset(&r, &[Roi::Lvc, Roi::Hvc]).unwrap(), r);
        let lvc = roi_subset(&r, &[Roi::Lvc]).unwrap();
        let hvc = roi_subset(&r, &[Roi::Hvc]).unwrap();
        assert_eq!(lvc.voxels.len(), 10);
        let mut joined: Vec<f64> = lvc.voxels.data().iter().chain(hvc.voxels.data()).copied().collect();
        joined.sort_by(f64::total_cmp);
        assert_eq!(joined, v);
        assert!(roi_subset(&r, &[]).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let ds = synthesize(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
