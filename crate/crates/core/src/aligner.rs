//! Stage 2: gradient descent on `(c, z)` through the generator so the image's
//! low-level visual features match decoded targets on the selected dimensions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::generator::ImageGenerator;
use crate::tensor::Tensor;

/// Differentiable access to flattened per-layer features of an image.
pub trait FeatureEncoder: Sync {
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;

    fn features(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Var,
        layers: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, Var>>;
}

impl FeatureEncoder for VisualEncoder {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        VisualEncoder::bind(self, tape)
    }

    fn features(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Var,
        layers: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, Var>> {
        VisualEncoder::features(self, tape, params, image, layers)
    }
}

/// Per-layer boolean masks over flattened features.
pub type LayerMasks = BTreeMap<usize, Vec<bool>>;

/// Splits a flat vector laid out as consecutive layers into per-layer pieces.
pub fn split_layers<T: Clone>(flat: &[T], layers: &BTreeSet<usize>, dims: &[usize]) -> Result<BTreeMap<usize, Vec<T>>> {
    let need: usize = layers.iter().map(|&l| dims.get(l - 1).copied().unwrap_or(0)).sum();
    if layers.iter().any(|&l| l == 0 || l > dims.len()) || need != flat.len() {
        return Err(Error::contract(format!(
            "flat length {} does not match layers {layers:?}",
            flat.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut at = 0;
    for &l in layers {
        let n = dims[l - 1];
        out.insert(l, flat[at..at + n].to_vec());
        at += n;
    }
    Ok(out)
}

fn check_cover(features: &BTreeSet<usize>, targets: &BTreeMap<usize, Tensor>, masks: &LayerMasks) -> Result<()> {
    let t: BTreeSet<usize> = targets.keys().copied().collect();
    let m: BTreeSet<usize> = masks.keys().copied().collect();
    if &t != features || &m != features {
        return Err(Error::contract(format!(
            "layer sets differ: features {features:?}, targets {t:?}, masks {m:?}"
        )));
    }
    Ok(())
}

/// `Σ_layers ‖mask ⊙ (feature − target)‖²` on the tape.
pub fn structural_loss_var(
    tape: &mut Tape,
    features: &BTreeMap<usize, Var>,
    targets: &BTreeMap<usize, Tensor>,
    masks: &LayerMasks,
) -> Result<Var> {
    check_cover(&features.keys().copied().collect(), targets, masks)?;
    let mut total: Option<Var> = None;
    for (l, &f) in features {
        let (t, m) = (&targets[l], &masks[l]);
        let n = tape.value(f).len();
        if t.len() != n || m.len() != n {
            return Err(Error::shape(
                "structural_loss",
                format!("layer {l}: feature {n}, target {}, mask {}", t.len(), m.len()),
            ));
        }
        let target = tape.constant(t.clone().reshape(&[n])?);
        let mask = tape.constant(Tensor::from_vec(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()));
        let diff = tape.sub(f, target)?;
        let kept = tape.mul(diff, mask)?;
        let term = tape.sum_squares(kept)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Value-only structural loss of `image`.
pub fn structural_loss(
    image: &Tensor,
    targets: &BTreeMap<usize, Tensor>,
    encoder: &dyn FeatureEncoder,
    masks: &LayerMasks,
) -> Result<f64> {
    let layers: BTreeSet<usize> = targets.keys().copied().collect();
    check_cover(&layers, targets, masks)?;
    let mut tape = Tape::new();
    let p = encoder.bind(&mut tape);
    let img = tape.constant(image.clone());
    let feats = encoder.features(&mut tape, &p, img, &layers)?;
    let loss = structural_loss_var(&mut tape, &feats, targets, masks)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOptions {
    pub lr: f64,
    pub max_steps: usize,
    /// Relative loss improvement over `window` steps below which the loop stops.
    pub tol: f64,
    pub window: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_steps: 100,
            tol: 1e-4,
            window: 5,
        }
    }
}

impl AlignOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.max_steps == 0 || !(self.tol >= 0.0) || self.window == 0 {
            return Err(Error::Config(format!(
                "align options need lr > 0, max_steps >= 1, tol >= 0, window >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which of `(c, z)` the optimizer may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Free {
    pub c: bool,
    pub z: bool,
}

impl Free {
    pub const BOTH: Free = Free { c: true, z: true };
}

/// Mutable optimizer state for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignState {
    pub c: Tensor,
    pub z: Tensor,
    pub step: usize,
    pub losses: Vec<f64>,
    pub opts: AlignOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignTrace {
    pub losses: Vec<f64>,
    pub best_step: usize,
    pub converged: bool,
}

impl AlignTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_step]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOutcome {
    pub c: Tensor,
    pub z: Tensor,
    pub image: Tensor,
    pub trace: AlignTrace,
}

impl AlignState {
    pub fn new(c: Tensor, z: Tensor, opts: AlignOptions) -> Result<Self> {
        opts.validate()?;
        Ok(Self {
            c,
            z,
            step: 0,
            losses: Vec::new(),
            opts,
        })
    }

    fn stalled(&self) -> bool {
        let w = self.opts.window;
        let s = self.losses.len() - 1;
        if self.losses[s] == 0.0 {
            return true;
        }
        if s < w {
            return false;
        }
        let before = self.losses[s - w];
        before > 0.0 && (before - self.losses[s]) / before < self.opts.tol
    }
}

/// Gradient descent on the structural loss. Returns the iterate with the
/// lowest recorded loss along with the full trace.
pub fn align(
    c0: &Tensor,
    z0: &Tensor,
    targets: &BTreeMap<usize, Tensor>,
    masks: &LayerMasks,
    generator: &dyn ImageGenerator,
    encoder: &dyn FeatureEncoder,
    opts: &AlignOptions,
    free: Free,
) -> Result<AlignOutcome> {
    let layers: BTreeSet<usize> = targets.keys().copied().collect();
    check_cover(&layers, targets, masks)?;
    let mut state = AlignState::new(c0.clone(), z0.clone(), opts.clone())?;
    let mut best: Option<(usize, Tensor, Tensor, Tensor)> = None;
    let mut converged = false;
    while state.step < opts.max_steps {
        let mut tape = Tape::new();
        let gp = generator.bind(&mut tape);
        let ep = encoder.bind(&mut tape);
        let cv = tape.leaf(state.c.clone(), free.c);
        let zv = tape.leaf(state.z.clone(), free.z);
        let step = state.step;
        let at_step = |e: Error| Error::numeric("align", format!("step {step}: {e}"));
        let image = generator.generate(&mut tape, &gp, cv, zv).map_err(at_step)?;
        let feats = encoder.features(&mut tape, &ep, image, &layers)?;
        let loss = structural_loss_var(&mut tape, &feats, targets, masks).map_err(at_step)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::numeric("align", format!("non-finite loss at step {step}")));
        }
        state.losses.push(value);
        state.step += 1;
        if best.as_ref().is_none_or(|b| value < state.losses[b.0]) {
            best = Some((step, state.c.clone(), state.z.clone(), tape.value(image).clone()));
        }
        if state.stalled() {
            converged = true;
            break;
        }
        if state.step == opts.max_steps || !(free.c || free.z) {
            break;
        }
        tape.backward(loss)?;
        for (var, on, target) in [(cv, free.c, &mut state.c), (zv, free.z, &mut state.z)] {
            if !on {
                continue;
            }
            let g = tape
                .grad(var)
                .ok_or_else(|| Error::numeric("align", format!("missing gradient at step {step}")))?;
            if !g.is_finite() {
                return Err(Error::numeric("align", format!("non-finite gradient at step {step}")));
            }
            target.axpy(-opts.lr, &g)?;
        }
    }
    let (best_step, c, z, image) = best.expect("at least one step runs");
    Ok(AlignOutcome {
        c,
        z,
        image,
        trace: AlignTrace {
            losses: state.losses,
            best_step,
            converged,
        },
    })
}

/// Feature ablations: the named input is zeroed and held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    C,
    Z,
    Zclip,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "c" => Ok(Self::C),
            "z" => Ok(Self::Z),
            "zclip" => Ok(Self::Zclip),
            _ => Err(Error::Config(format!("unknown ablation '{s}' (none|c|z|zclip)"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::C => "c",
            Self::Z => "z",
            Self::Zclip => "zclip",
        })
    }
}

/// Decoded (or true) features for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTargets {
    pub c: Tensor,
    pub z: Tensor,
    pub zclip: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRecord {
    pub item: usize,
    pub draft: Tensor,
    pub image: Tensor,
    /// Absent when Stage 2 is ablated.
    pub trace: Option<AlignTrace>,
    pub c: Tensor,
    pub z: Tensor,
}

/// Stage 1 draft from `(c, z)` followed by Stage 2 alignment.
pub fn reconstruct(
    item: usize,
    features: &FeatureTargets,
    masks: &LayerMasks,
    generator: &dyn ImageGenerator,
    encoder: &dyn FeatureEncoder,
    opts: &AlignOptions,
    ablation: Ablation,
) -> Result<ReconstructionRecord> {
    let c = match ablation {
        Ablation::C => Tensor::zeros(features.c.shape()),
        _ => features.c.clone(),
    };
    let z = match ablation {
        Ablation::Z => Tensor::zeros(features.z.shape()),
        _ => features.z.clone(),
    };
    let mut tape = Tape::new();
    let gp = generator.bind(&mut tape);
    let (cv, zv) = (tape.constant(c.clone()), tape.constant(z.clone()));
    let draft = generator.generate(&mut tape, &gp, cv, zv)?;
    let draft = tape.value(draft).clone();
    if ablation == Ablation::Zclip {
        return Ok(ReconstructionRecord {
            item,
            image: draft.clone(),
            draft,
            trace: None,
            c,
            z,
        });
    }
    let free = Free {
        c: ablation != Ablation::C,
        z: ablation != Ablation::Z,
    };
    let out = align(&c, &z, &features.zclip, masks, generator, encoder, opts, free)?;
    Ok(ReconstructionRecord {
        item,
        draft,
        image: out.image,
        trace: Some(out.trace),
        c: out.c,
        z: out.z,
    })
}
