use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderSet, Experiment};
use crate::dataset::{Dataset, Roi};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_percent: f64,
    pub metric: String,
    /// Mean cross-validated accuracy of the retained structural dimensions.
    pub decoding_accuracy: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub validation_items: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reconstructs the validation tail of the training split once per `k`,
/// with decoders fitted on the remaining training items.
pub fn k_sweep(exp: &Experiment, ks: &[f64]) -> Result<SweepReport> {
    let (fit, val) = exp.dataset.validation_split(exp.config.decoder.validation_fraction);
    let base = exp.fit_decoders(exp.config.ablation.roi, &fit)?;
    k_sweep_with(exp, &base, &val, ks)
}

/// [`k_sweep`] with decoders and validation items supplied by the caller.
pub fn k_sweep_with(exp: &Experiment, base: &DecoderSet, items: &[usize], ks: &[f64]) -> Result<SweepReport> {
    if ks.is_empty() {
        return Err(Error::contract("k_sweep needs at least one k"));
    }
    if let Some(k) = ks.iter().find(|&&k| !(k > 0.0 && k <= 100.0)) {
        return Err(Error::contract(format!("k must be in (0, 100], got {k}")));
    }
    let mut rows = Vec::with_capacity(ks.len() * 3);
    for &k in ks {
        let dec = base.with_k(k)?;
        let records = exp.reconstruct_items(&dec, items, &exp.config.ablation)?;
        let pairs: Vec<_> = records.iter().map(|r| (r.item, &r.image)).collect();
        let m = exp.evaluate_images(&pairs)?;
        let acc = dec.selector.mean_retained_accuracy();
        for (metric, value) in [("clip_sim", m.mean_clip_sim), ("ssim", m.mean_ssim), ("pcc", m.mean_pcc)] {
            rows.push(SweepRow {
                k_percent: k,
                metric: metric.into(),
                decoding_accuracy: acc,
                value,
            });
        }
    }
    Ok(SweepReport {
        validation_items: items.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiWeightRow {
    pub voxel: usize,
    pub roi: Roi,
    pub c: f64,
    pub z: f64,
    pub zclip: f64,
}

/// Per-voxel mean |weight| over all targets of each decoder. Voxels outside
/// the decoders' ROI, or never selected, get 0.
pub fn export_roi_weights(dec: &DecoderSet, dataset: &Dataset) -> Vec<RoiWeightRow> {
    let mut rows: Vec<RoiWeightRow> = dataset
        .roi_labels
        .iter()
        .enumerate()
        .map(|(voxel, &roi)| RoiWeightRow {
            voxel,
            roi,
            c: 0.0,
            z: 0.0,
            zclip: 0.0,
        })
        .collect();
    let (wc, wz, wzc) = (dec.c.mean_abs_weight(), dec.z.mean_abs_weight(), dec.zclip.mean_abs_weight());
    for (k, &voxel) in dec.columns.iter().enumerate() {
        let r = &mut rows[voxel];
        r.c = wc[k];
        r.z = wz[k];
        r.zclip = wzc[k];
    }
    rows
}

pub fn write_roi_weights(path: &Path, rows: &[RoiWeightRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of each decoder's per-voxel weight within one ROI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiWeightSummary {
    pub c: f64,
    pub z: f64,
    pub zclip: f64,
}

impl RoiWeightSummary {
    pub fn of(rows: &[RoiWeightRow], roi: Roi) -> Self {
        let sel: Vec<&RoiWeightRow> = rows.iter().filter(|r| r.roi == roi).collect();
        let n = sel.len().max(1) as f64;
        Self {
            c: sel.iter().map(|r| r.c).sum::<f64>() / n,
            z: sel.iter().map(|r| r.z).sum::<f64>() / n,
            zclip: sel.iter().map(|r| r.zclip).sum::<f64>() / n,
        }
    }
}
