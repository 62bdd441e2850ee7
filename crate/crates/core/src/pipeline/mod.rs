//! End-to-end orchestration: data, encoders, generator training, decoders,
//! two-stage reconstruction, evaluation and the files a run leaves behind.

mod config;
mod store;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    AblationSection, DecoderSection, EncoderSection, ExperimentConfig, GeneratorSection, RoiChoice, StageSeeds,
};
pub use store::{
    file_sha256, key_of, sha256_hex, FileRecord, RunLock, RunManifest, RunStore, StageRecord, LOCK_FILE, MANIFEST_FILE,
};
pub use sweep::{export_roi_weights, k_sweep, write_roi_weights, RoiWeightRow, RoiWeightSummary, SweepReport, SweepRow};

use crate::aligner::{self, split_layers, Ablation, FeatureTargets, LayerMasks, ReconstructionRecord};
use crate::checkpoint::Checkpoint;
use crate::dataset::{synthesize, Dataset, Stimulus};
use crate::decoder::{cv_accuracy, fit_ridge, select_top_k, FeatureSelector, RidgeModel};
use crate::encoders::{train_autoencoder, LatentAutoencoder, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::exec;
use crate::generator::{make_schedule, train_denoiser, Denoiser, DiffusionGenerator, NoiseSchedule};
use crate::image_io::write_image;
use crate::metrics::{self, MetricsReport};
use crate::rng::{seeded, splitmix64};
use crate::tensor::Tensor;

pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const RECORDS_FILE: &str = "records.json";
pub const RECON_META_FILE: &str = "reconstruction.json";

fn timed<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    log::info!("{stage}: start");
    let out = f().map_err(|e| e.in_stage(stage))?;
    log::info!("{stage}: done in {:.1?}", start.elapsed());
    Ok(out)
}

/// Synthesizes the dataset from the dataset seed, or loads `config.dataset`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(dir) => Dataset::load(dir),
        None => synthesize(&config.data, config.seeds().dataset),
    }
}

/// Digest of every image and trial in the dataset.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in &ds.stimuli {
        for v in s.image.data().iter().chain(s.trials.iter().flat_map(|t| t.data())) {
            h.update(v.to_le_bytes());
        }
    }
    for &i in ds.train.iter().chain(&ds.test) {
        h.update((i as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

pub fn text_encoder(config: &ExperimentConfig) -> TextEncoder {
    TextEncoder::new(
        crate::dataset::VOCABULARY.len(),
        config.encoders.text_dim,
        config.data.max_caption_tokens,
        config.seeds().text,
    )
}

/// Random conv stack with its head fitted to the centered caption embeddings
/// of the training stimuli.
pub fn visual_encoder(config: &ExperimentConfig, ds: &Dataset, text: &TextEncoder) -> Result<VisualEncoder> {
    let mut enc = VisualEncoder::new(config.encoders.visual.clone(), config.seeds().visual)?;
    let targets = ds
        .train
        .iter()
        .map(|&i| text.sentence(&ds.stimuli[i].caption))
        .collect::<Result<Vec<_>>>()?;
    let n = targets.len() as f64;
    let mut mean = vec![0.0; config.encoders.text_dim];
    for t in &targets {
        for (m, v) in mean.iter_mut().zip(t.data()) {
            *m += v / n;
        }
    }
    let targets = targets
        .iter()
        .map(|t| t.zip_map(&Tensor::new([mean.len()], mean.clone())?, |a, b| a - b))
        .collect::<Result<Vec<_>>>()?;
    enc.fit_head(&training_images(ds), &targets, config.encoders.head_lambda)?;
    Ok(enc)
}

pub fn schedule(config: &ExperimentConfig) -> Result<NoiseSchedule> {
    let g = &config.generator;
    make_schedule(g.timesteps, g.beta_min, g.beta_max)
}

fn training_images(ds: &Dataset) -> Vec<Tensor> {
    ds.train.iter().map(|&i| ds.stimuli[i].image.clone()).collect()
}

/// Trains the autoencoder on the training images.
pub fn train_autoencoder_stage(config: &ExperimentConfig, ds: &Dataset) -> Result<(LatentAutoencoder, Vec<f64>)> {
    train_autoencoder(
        &training_images(ds),
        &config.encoders.autoencoder,
        &config.encoders.ae_training,
        config.seeds().autoencoder,
    )
}

pub fn train_denoiser_stage(
    config: &ExperimentConfig,
    ds: &Dataset,
    ae: &LatentAutoencoder,
) -> Result<(Denoiser, Vec<f64>)> {
    let g = &config.generator;
    train_denoiser(
        ds,
        ae,
        &text_encoder(config),
        &schedule(config)?,
        &g.denoiser,
        &g.training,
        config.seeds().denoiser,
    )
}

fn low_layers(config: &ExperimentConfig) -> BTreeSet<usize> {
    config.encoders.low_layers.iter().copied().collect()
}

/// True `(c, z, Z_CLIP)` of one stimulus.
pub fn true_features(
    stim: &Stimulus,
    text: &TextEncoder,
    visual: &VisualEncoder,
    ae: &LatentAutoencoder,
    layers: &BTreeSet<usize>,
) -> Result<FeatureTargets> {
    Ok(FeatureTargets {
        c: text.encode(&stim.caption)?,
        z: ae.encode(&stim.image)?,
        zclip: visual.encode_visual(&stim.image, layers)?,
    })
}

fn flat_zclip(f: &FeatureTargets) -> Vec<f64> {
    f.zclip.values().flat_map(|t| t.data().iter().copied()).collect()
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / width.max(1);
    Tensor::new([n, width], data)
}

/// Fitted decoders for one ROI choice plus the structural feature selector.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSet {
    pub roi: RoiChoice,
    /// Dataset voxel indices the decoders read, ascending.
    pub columns: Vec<usize>,
    pub c: RidgeModel,
    pub z: RidgeModel,
    pub zclip: RidgeModel,
    pub accuracy_c: Tensor,
    pub accuracy_z: Tensor,
    pub selector: FeatureSelector,
}

impl DecoderSet {
    const SPACES: [&'static str; 3] = ["c", "z", "zclip"];

    pub fn files() -> Vec<String> {
        let mut f: Vec<String> = Self::SPACES.iter().map(|s| format!("decoder_{s}.ckpt")).collect();
        f.push("accuracy_c.mdt".into());
        f.push("accuracy_z.mdt".into());
        f.push("selector.ckpt".into());
        f
    }

    /// Writes the decoder files into `dir`; returns their names.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        for (space, model) in Self::SPACES.iter().zip([&self.c, &self.z, &self.zclip]) {
            model
                .to_checkpoint(json!({ "space": space, "roi": self.roi }))?
                .save(dir.join(format!("decoder_{space}.ckpt")))?;
        }
        self.accuracy_c.save(dir.join("accuracy_c.mdt"))?;
        self.accuracy_z.save(dir.join("accuracy_z.mdt"))?;
        self.selector.to_checkpoint().save(dir.join("selector.ckpt"))?;
        Ok(Self::files())
    }

    pub fn load(dir: &Path, dataset: &Dataset) -> Result<Self> {
        let mut models = Vec::new();
        let mut roi = None;
        for space in Self::SPACES {
            let path = dir.join(format!("decoder_{space}.ckpt"));
            let ck = Checkpoint::load(&path)?;
            let r: RoiChoice = serde_json::from_value(ck.meta["extra"]["roi"].clone())
                .map_err(|e| Error::format(&path, format!("roi: {e}")))?;
            if roi.is_some_and(|prev| prev != r) {
                return Err(Error::format(&path, "decoders were fitted on different ROI sets"));
            }
            roi = Some(r);
            models.push(RidgeModel::from_checkpoint(ck, &path)?);
        }
        let roi = roi.expect("three spaces");
        let columns = dataset.voxel_indices(&roi.rois());
        if models.iter().any(|m| m.inputs() != columns.len()) {
            return Err(Error::format(dir, "decoder input count does not match the dataset's ROI"));
        }
        let sel_path = dir.join("selector.ckpt");
        let selector = FeatureSelector::from_checkpoint(Checkpoint::load(&sel_path)?, &sel_path)?;
        let zclip = models.pop().unwrap();
        let z = models.pop().unwrap();
        let c = models.pop().unwrap();
        Ok(Self {
            roi,
            columns,
            c,
            z,
            zclip,
            accuracy_c: Tensor::load(dir.join("accuracy_c.mdt"))?,
            accuracy_z: Tensor::load(dir.join("accuracy_z.mdt"))?,
            selector,
        })
    }

    /// Same decoders with the selector re-thresholded at `k_percent`.
    pub fn with_k(&self, k_percent: f64) -> Result<Self> {
        let mut out = self.clone();
        out.selector = select_top_k(&self.selector.accuracy, k_percent)?;
        Ok(out)
    }

    pub fn decoding_summary(&self) -> DecodingSummary {
        DecodingSummary {
            roi: self.roi,
            mean_accuracy_c: self.accuracy_c.mean(),
            mean_accuracy_z: self.accuracy_z.mean(),
            mean_accuracy_zclip: self.selector.accuracy.mean(),
            k_percent: self.selector.k_percent,
            retained_zclip: self.selector.retained().len(),
            mean_retained_accuracy_zclip: self.selector.mean_retained_accuracy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingSummary {
    pub roi: RoiChoice,
    pub mean_accuracy_c: f64,
    pub mean_accuracy_z: f64,
    pub mean_accuracy_zclip: f64,
    pub k_percent: f64,
    pub retained_zclip: usize,
    pub mean_retained_accuracy_zclip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftSummary {
    pub mean_clip_sim: f64,
    pub mean_ssim: f64,
    pub mean_pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub mean_initial_loss: f64,
    pub mean_best_loss: f64,
    pub mean_steps: f64,
    /// Items whose best loss is at most the initial loss.
    pub items_not_worse: usize,
    /// Items whose final pixel correlation beats the draft's.
    pub items_pcc_improved: usize,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: AblationSection,
    pub items: usize,
    pub metrics: MetricsReport,
    pub draft: DraftSummary,
    pub stage2: Option<Stage2Summary>,
    pub decoding: DecodingSummary,
}

/// Everything needed to decode and reconstruct: dataset, frozen encoders,
/// the trained generator and cached true features of every stimulus.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
    pub dataset: Dataset,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub autoencoder: LatentAutoencoder,
    pub denoiser: Option<Denoiser>,
    pub schedule: NoiseSchedule,
    /// Indexed like `dataset.stimuli`.
    pub truth: Vec<FeatureTargets>,
    pub ae_history: Vec<f64>,
    pub denoiser_history: Vec<f64>,
}

impl Experiment {
    pub fn new(
        config: ExperimentConfig,
        dataset: Dataset,
        autoencoder: LatentAutoencoder,
        denoiser: Option<Denoiser>,
    ) -> Result<Self> {
        config.validate()?;
        let text = text_encoder(&config);
        let visual = visual_encoder(&config, &dataset, &text)?;
        let layers = low_layers(&config);
        let truth = exec::map(&dataset.stimuli, |s| true_features(s, &text, &visual, &autoencoder, &layers))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seeds: config.seeds(),
            schedule: schedule(&config)?,
            config,
            dataset,
            text,
            visual,
            autoencoder,
            denoiser,
            truth,
            ae_history: Vec::new(),
            denoiser_history: Vec::new(),
        })
    }

    /// Runs data, autoencoder and denoiser stages in memory.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        Self::prepare_with(config, None)
    }

    /// As [`prepare`](Self::prepare), checkpointing models into the run store
    /// and reusing them when a previous run's stage key matches.
    pub fn prepare_with(config: &ExperimentConfig, mut store: Option<&mut RunStore>) -> Result<Self> {
        config.validate().map_err(|e| e.in_stage("config"))?;
        let dataset = timed("dataset", || load_dataset(config))?;
        let data_key = dataset_fingerprint(&dataset);

        let ae_key = key_of(&(
            &data_key,
            config.seeds().autoencoder,
            &config.encoders.autoencoder,
            &config.encoders.ae_training,
        ))?;
        let ae_rel = format!("models/{AUTOENCODER_FILE}");
        let (autoencoder, ae_history) = timed("train-ae", || {
            let reused = store.as_deref_mut().is_some_and(|s| s.reuse("train-ae", &ae_key));
            match store.as_deref_mut() {
                Some(s) if reused => {
                    let p = s.path(&ae_rel);
                    Ok((LatentAutoencoder::from_checkpoint(Checkpoint::load(&p)?, &p)?, Vec::new()))
                }
                other => {
                    let out = train_autoencoder_stage(config, &dataset)?;
                    if let Some(s) = other {
                        fs::create_dir_all(s.path("models"))?;
                        out.0.to_checkpoint().save(s.path(&ae_rel))?;
                        s.record("train-ae", &ae_key, &[&ae_rel])?;
                    }
                    Ok(out)
                }
            }
        })?;

        let dn_key = key_of(&(
            &ae_key,
            config.seeds().denoiser,
            config.seeds().text,
            config.encoders.text_dim,
            &config.generator.timesteps,
            config.generator.beta_min,
            config.generator.beta_max,
            &config.generator.denoiser,
            &config.generator.training,
        ))?;
        let dn_rel = format!("models/{DENOISER_FILE}");
        let (denoiser, denoiser_history) = timed("train-denoiser", || {
            let reused = store.as_deref_mut().is_some_and(|s| s.reuse("train-denoiser", &dn_key));
            match store {
                Some(s) if reused => {
                    let p = s.path(&dn_rel);
                    Ok((Denoiser::from_checkpoint(Checkpoint::load(&p)?, &p)?, Vec::new()))
                }
                other => {
                    let out = train_denoiser_stage(config, &dataset, &autoencoder)?;
                    if let Some(s) = other {
                        out.0.to_checkpoint().save(s.path(&dn_rel))?;
                        s.record("train-denoiser", &dn_key, &[&dn_rel])?;
                    }
                    Ok(out)
                }
            }
        })?;

        let mut exp = timed("features", || Self::new(config.clone(), dataset, autoencoder, Some(denoiser)))?;
        exp.ae_history = ae_history;
        exp.denoiser_history = denoiser_history;
        Ok(exp)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.visual.layer_dims(self.config.data.image_size)
    }

    /// `[N, D]` targets of one feature space for `items`.
    fn targets(&self, items: &[usize], pick: impl Fn(&FeatureTargets) -> Vec<f64>) -> Result<Tensor> {
        let width = pick(&self.truth[items[0]]).len();
        stack(items.iter().map(|&i| pick(&self.truth[i])), width)
    }

    /// Fits the three decoders on `items` (all ROI voxels of `roi`),
    /// cross-validates every output dimension and selects the top-k%
    /// structural dimensions.
    pub fn fit_decoders(&self, roi: RoiChoice, items: &[usize]) -> Result<DecoderSet> {
        let d = &self.config.decoder;
        let rois = roi.rois();
        let columns = self.dataset.voxel_indices(&rois);
        let x = self.dataset.design_matrix(items, &rois)?;
        let vpt = d.voxels_per_target.min(columns.len());
        let yc = self.targets(items, |f| f.c.data().to_vec())?;
        let yz = self.targets(items, |f| f.z.data().to_vec())?;
        let yzc = self.targets(items, flat_zclip)?;
        let fit = |y: &Tensor| fit_ridge(&x, y, d.lambda, vpt);
        let cv = |y: &Tensor| cv_accuracy(&x, y, d.cv_folds, d.lambda, vpt);
        let accuracy_zclip = cv(&yzc)?;
        Ok(DecoderSet {
            roi,
            columns,
            c: fit(&yc)?,
            z: fit(&yz)?,
            zclip: fit(&yzc)?,
            accuracy_c: cv(&yc)?,
            accuracy_z: cv(&yz)?,
            selector: select_top_k(&accuracy_zclip, d.k_percent)?,
        })
    }

    /// Features decoded from the trial-averaged response of stimulus `item`.
    pub fn decode(&self, dec: &DecoderSet, item: usize) -> Result<FeatureTargets> {
        let avg = self.dataset.averaged(item);
        let x: Vec<f64> = dec.columns.iter().map(|&j| avg.voxels.data()[j]).collect();
        let truth = &self.truth[item];
        let c = dec.c.predict(&x)?.reshape(truth.c.shape())?;
        let z = dec.z.predict(&x)?.reshape(truth.z.shape())?;
        let flat = dec.zclip.predict(&x)?;
        let layers = low_layers(&self.config);
        let zclip = split_layers(flat.data(), &layers, &self.layer_dims())?
            .into_iter()
            .map(|(l, v)| (l, Tensor::from_vec(v)))
            .collect();
        Ok(FeatureTargets { c, z, zclip })
    }

    pub fn masks(&self, selector: &FeatureSelector) -> Result<LayerMasks> {
        split_layers(&selector.mask, &low_layers(&self.config), &self.layer_dims())
    }

    fn denoiser(&self) -> Result<&Denoiser> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| Error::contract("no denoiser loaded for generation"))
    }

    /// Generator for stimulus `item`, with its forward-diffusion noise fixed
    /// by the sampler seed and the stimulus id.
    pub fn generator(&self, item: usize) -> Result<DiffusionGenerator<'_>> {
        let shape = self.autoencoder.latent_shape(self.config.data.image_size);
        let id = self.dataset.stimuli[item].id as u64;
        let eps = Tensor::randn(&shape, 1.0, &mut seeded(splitmix64(self.seeds.sampler ^ id)));
        Ok(DiffusionGenerator {
            autoencoder: &self.autoencoder,
            predictor: self.denoiser()?,
            schedule: &self.schedule,
            sampler: self.config.generator.sampler.clone(),
            eps,
        })
    }

    /// Two-stage reconstruction of `items` under `variant`. The variant's ROI
    /// must match the decoders'.
    pub fn reconstruct_items(
        &self,
        dec: &DecoderSet,
        items: &[usize],
        variant: &AblationSection,
    ) -> Result<Vec<ReconstructionRecord>> {
        if variant.roi != dec.roi {
            return Err(Error::contract(format!(
                "variant asks for roi {} but decoders use {}",
                variant.roi, dec.roi
            )));
        }
        let masks = self.masks(&dec.selector)?;
        exec::map(items, |&item| -> Result<ReconstructionRecord> {
            let features = if variant.upper_bound {
                self.truth[item].clone()
            } else {
                self.decode(dec, item)?
            };
            let generator = self.generator(item)?;
            aligner::reconstruct(
                item,
                &features,
                &masks,
                &generator,
                &self.visual,
                &self.config.align,
                variant.drop,
            )
        })
        .into_iter()
        .collect()
    }

    pub fn evaluate_images(&self, pairs: &[(usize, &Tensor)]) -> Result<MetricsReport> {
        score_images(&self.visual, self.seeds.visual, &self.dataset, pairs)
    }

    pub fn report(&self, dec: &DecoderSet, records: &[ReconstructionRecord], variant: &AblationSection) -> Result<Report> {
        let items: Vec<ReportItem<'_>> = records
            .iter()
            .map(|r| ReportItem {
                item: r.item,
                draft: &r.draft,
                image: &r.image,
                trace: r.trace.as_ref(),
            })
            .collect();
        build_report(&self.visual, self.seeds.visual, &self.dataset, variant, dec.decoding_summary(), &items)
    }
}

/// Metrics of each `(item, image)` against the stimulus image of `item`.
pub fn score_images(
    visual: &VisualEncoder,
    encoder_seed: u64,
    dataset: &Dataset,
    pairs: &[(usize, &Tensor)],
) -> Result<MetricsReport> {
    let triples: Vec<(usize, &Tensor, &Tensor)> = pairs
        .iter()
        .map(|&(i, img)| (i, &dataset.stimuli[i].image, img))
        .collect();
    metrics::evaluate(&triples, visual, encoder_seed)
}

/// One reconstructed item as the report sees it.
#[derive(Clone, Copy, Debug)]
pub struct ReportItem<'a> {
    pub item: usize,
    pub draft: &'a Tensor,
    pub image: &'a Tensor,
    pub trace: Option<&'a aligner::AlignTrace>,
}

pub fn build_report(
    visual: &VisualEncoder,
    encoder_seed: u64,
    dataset: &Dataset,
    variant: &AblationSection,
    decoding: DecodingSummary,
    items: &[ReportItem<'_>],
) -> Result<Report> {
    let finals: Vec<(usize, &Tensor)> = items.iter().map(|r| (r.item, r.image)).collect();
    let drafts: Vec<(usize, &Tensor)> = items.iter().map(|r| (r.item, r.draft)).collect();
    let metrics = score_images(visual, encoder_seed, dataset, &finals)?;
    let draft = score_images(visual, encoder_seed, dataset, &drafts)?;
    let traces: Vec<&aligner::AlignTrace> = items.iter().filter_map(|r| r.trace).collect();
    let stage2 = (!traces.is_empty()).then(|| {
        let n = traces.len() as f64;
        Stage2Summary {
            mean_initial_loss: traces.iter().map(|t| t.initial_loss()).sum::<f64>() / n,
            mean_best_loss: traces.iter().map(|t| t.best_loss()).sum::<f64>() / n,
            mean_steps: traces.iter().map(|t| t.losses.len() as f64).sum::<f64>() / n,
            items_not_worse: traces.iter().filter(|t| t.best_loss() <= t.initial_loss()).count(),
            items_pcc_improved: metrics
                .items
                .iter()
                .zip(&draft.items)
                .filter(|(f, d)| f.pcc > d.pcc)
                .count(),
        }
    });
    Ok(Report {
        variant: variant.clone(),
        items: items.len(),
        draft: DraftSummary {
            mean_clip_sim: draft.mean_clip_sim,
            mean_ssim: draft.mean_ssim,
            mean_pcc: draft.mean_pcc,
        },
        metrics,
        stage2,
        decoding,
    })
}

/// Per-item entry of `records.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub item: usize,
    pub stimulus_id: usize,
    pub class_id: usize,
    pub draft: String,
    pub image: String,
    pub stage2: Option<aligner::AlignTrace>,
}

/// Writes draft/final tensors, PNG/PPM previews and `records.json` under `dir`;
/// returns the written paths relative to `dir`.
pub fn write_reconstructions(
    dir: &Path,
    exp: &Experiment,
    records: &[ReconstructionRecord],
    meta: &ReconstructionMeta,
    image_format: &str,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir.join("recon"))?;
    fs::create_dir_all(dir.join("images"))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for r in records {
        let stim = &exp.dataset.stimuli[r.item];
        let draft = format!("recon/{:05}.draft.mdt", stim.id);
        let image = format!("recon/{:05}.final.mdt", stim.id);
        r.draft.save(dir.join(&draft))?;
        r.image.save(dir.join(&image))?;
        for (tag, img) in [("stimulus", &stim.image), ("draft", &r.draft), ("final", &r.image)] {
            let rel = format!("images/{:05}_{tag}.{image_format}", stim.id);
            write_image(&dir.join(&rel), img)?;
            written.push(rel);
        }
        written.push(draft.clone());
        written.push(image.clone());
        entries.push(RecordEntry {
            item: r.item,
            stimulus_id: stim.id,
            class_id: stim.class_id,
            draft,
            image,
            stage2: r.trace.clone(),
        });
    }
    fs::write(dir.join(RECORDS_FILE), serde_json::to_string_pretty(&entries)?)?;
    fs::write(dir.join(RECON_META_FILE), serde_json::to_string_pretty(meta)?)?;
    written.push(RECORDS_FILE.into());
    written.push(RECON_META_FILE.into());
    Ok(written)
}

/// Variant and decoder summary stored next to `records.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMeta {
    pub variant: AblationSection,
    pub decoding: DecodingSummary,
}

/// A reconstruction directory loaded back from disk.
#[derive(Clone, Debug)]
pub struct StoredReconstructions {
    pub meta: ReconstructionMeta,
    /// Entry, draft, final.
    pub items: Vec<(RecordEntry, Tensor, Tensor)>,
}

impl StoredReconstructions {
    /// Report for these reconstructions, scored with `visual`.
    pub fn report(&self, visual: &VisualEncoder, encoder_seed: u64, dataset: &Dataset) -> Result<Report> {
        if let Some((e, _, _)) = self.items.iter().find(|(e, _, _)| e.item >= dataset.stimuli.len()) {
            return Err(Error::contract(format!("record refers to item {} outside the dataset", e.item)));
        }
        let items: Vec<ReportItem<'_>> = self
            .items
            .iter()
            .map(|(e, d, f)| ReportItem {
                item: e.item,
                draft: d,
                image: f,
                trace: e.stage2.as_ref(),
            })
            .collect();
        build_report(visual, encoder_seed, dataset, &self.meta.variant, self.meta.decoding.clone(), &items)
    }
}

/// Reads `records.json`, its metadata and the draft and final tensors.
pub fn read_reconstructions(dir: &Path) -> Result<StoredReconstructions> {
    let entries: Vec<RecordEntry> = serde_json::from_str(&fs::read_to_string(dir.join(RECORDS_FILE)).map_err(Error::file(dir.join(RECORDS_FILE)))?)?;
    let meta: ReconstructionMeta = serde_json::from_str(&fs::read_to_string(dir.join(RECON_META_FILE)).map_err(Error::file(dir.join(RECON_META_FILE)))?)?;
    let items = entries
        .into_iter()
        .map(|e| {
            let draft = Tensor::load(dir.join(&e.draft))?;
            let image = Tensor::load(dir.join(&e.image))?;
            Ok((e, draft, image))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredReconstructions { meta, items })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: Report,
    pub manifest: RunManifest,
}

/// Full run: every stage in order, all artifacts written under
/// `config.output`, a manifest of their checksums last.
pub fn run_experiment(config: &ExperimentConfig, resume: bool) -> Result<RunSummary> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let mut store = RunStore::open(&config.output, resume).map_err(|e| e.in_stage("lock"))?;
    let config_text = config.to_toml()?;
    fs::write(store.path("config.toml"), &config_text).map_err(|e| Error::from(e).in_stage("config"))?;

    let exp = Experiment::prepare_with(config, Some(&mut store))?;
    let variant = &config.ablation;

    let dec_key = key_of(&(
        dataset_fingerprint(&exp.dataset),
        file_sha256(&store.path(&format!("models/{AUTOENCODER_FILE}")))?,
        config.seeds().text,
        config.seeds().visual,
        &config.encoders,
        &config.decoder,
        variant.roi,
    ))?;
    let dec_files: Vec<String> = DecoderSet::files().iter().map(|f| format!("models/{f}")).collect();
    let decoders = timed("fit-decoders", || {
        if store.reuse("fit-decoders", &dec_key) {
            return DecoderSet::load(&store.path("models"), &exp.dataset);
        }
        let dec = exp.fit_decoders(variant.roi, &exp.dataset.train)?;
        dec.save(&store.path("models"))?;
        let refs: Vec<&str> = dec_files.iter().map(String::as_str).collect();
        store.record("fit-decoders", &dec_key, &refs)?;
        Ok(dec)
    })?;

    let records = timed("reconstruct", || {
        let recs = exp.reconstruct_items(&decoders, &exp.dataset.test, variant)?;
        let meta = ReconstructionMeta {
            variant: variant.clone(),
            decoding: decoders.decoding_summary(),
        };
        write_reconstructions(&store.dir, &exp, &recs, &meta, &config.image_format)?;
        Ok(recs)
    })?;

    let report = timed("evaluate", || {
        let report = exp.report(&decoders, &records, variant)?;
        fs::write(store.path("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    })?;

    timed("export-weights", || {
        let rows = export_roi_weights(&decoders, &exp.dataset);
        write_roi_weights(&store.path("roi_weights.csv"), &rows)
    })?;

    let manifest = timed("manifest", || store.finish(&exp.seeds, &config_text))?;
    Ok(RunSummary {
        dir: config.output.clone(),
        report,
        manifest,
    })
}

/// Loads the autoencoder and, when present, the denoiser from a models
/// directory and rebuilds the experiment around `dataset`.
pub fn experiment_from_models(config: &ExperimentConfig, dataset: Dataset, models: &Path) -> Result<Experiment> {
    let ae_path = models.join(AUTOENCODER_FILE);
    let ae = LatentAutoencoder::from_checkpoint(Checkpoint::load(&ae_path)?, &ae_path)?;
    let dn_path = models.join(DENOISER_FILE);
    let dn = if dn_path.exists() {
        Some(Denoiser::from_checkpoint(Checkpoint::load(&dn_path)?, &dn_path)?)
    } else {
        None
    };
    Experiment::new(config.clone(), dataset, ae, dn)
}

/// Ablation variants that differ from `base` in exactly one field.
pub fn ablation_variants(base: &AblationSection) -> BTreeMap<&'static str, AblationSection> {
    let mut out = BTreeMap::new();
    out.insert("full", base.clone());
    out.insert("upper_bound", AblationSection { upper_bound: true, ..base.clone() });
    for (name, drop) in [("without_c", Ablation::C), ("without_z", Ablation::Z), ("without_zclip", Ablation::Zclip)] {
        out.insert(name, AblationSection { drop, ..base.clone() });
    }
    out
}
