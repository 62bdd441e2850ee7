//! Linear stand-ins for the generator and the feature encoder, so the
//! structural objective becomes a masked least-squares problem.

use std::collections::{BTreeMap, BTreeSet};

use mindloop_core::aligner::{FeatureEncoder, LayerMasks};
use mindloop_core::generator::ImageGenerator;
use mindloop_core::rng::seeded;
use mindloop_core::{Result, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const IMAGE: [usize; 3] = [3, 4, 4];
pub const PIXELS: usize = 48;

/// `image = [vec(c), vec(z)] · A + b`.
pub struct LinearGenerator {
    pub a: Tensor,
    pub b: Tensor,
}

impl ImageGenerator for LinearGenerator {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        vec![tape.constant(self.a.clone()), tape.constant(self.b.clone())]
    }

    fn generate(&self, tape: &mut Tape, params: &[Var], c: Var, z: Var) -> Result<Var> {
        let (nc, nz) = (tape.value(c).len(), tape.value(z).len());
        let cr = tape.reshape(c, &[1, nc])?;
        let zr = tape.reshape(z, &[1, nz])?;
        let x = tape.concat(&[cr, zr], 1)?;
        let img = tape.matmul(x, params[0])?;
        let img = tape.add(img, params[1])?;
        tape.reshape(img, &IMAGE)
    }
}

/// Layer `l` features are `vec(image) · M_l`.
pub struct LinearEncoder {
    pub maps: BTreeMap<usize, Tensor>,
}

impl FeatureEncoder for LinearEncoder {
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.maps.values().map(|m| tape.constant(m.clone())).collect()
    }

    fn features(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: Var,
        layers: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, Var>> {
        let row = tape.reshape(image, &[1, PIXELS])?;
        let mut out = BTreeMap::new();
        for (&l, &p) in self.maps.keys().zip(params) {
            if layers.contains(&l) {
                let f = tape.matmul(row, p)?;
                let n = tape.value(f).len();
                out.insert(l, tape.reshape(f, &[n])?);
            }
        }
        Ok(out)
    }
}

pub struct Problem {
    pub generator: LinearGenerator,
    pub encoder: LinearEncoder,
    pub targets: BTreeMap<usize, Tensor>,
    pub masks: LayerMasks,
    pub c0: Tensor,
    pub z0: Tensor,
}

/// Random overdetermined instance: 6 + 8 unknowns, two layers of 24 and 20
/// features with about a quarter of them masked out.
pub fn problem(seed: u64) -> Problem {
    let mut rng = seeded(seed);
    let unknowns = 14;
    let a = Tensor::randn(&[unknowns, PIXELS], (1.0 / unknowns as f64).sqrt(), &mut rng);
    let b = Tensor::randn(&[1, PIXELS], 0.1, &mut rng);
    let mut maps = BTreeMap::new();
    let mut targets = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for (l, d) in [(1usize, 24usize), (2, 20)] {
        maps.insert(l, Tensor::randn(&[PIXELS, d], (1.0 / PIXELS as f64).sqrt(), &mut rng));
        targets.insert(l, Tensor::randn(&[d], 1.0, &mut rng));
        masks.insert(l, (0..d).map(|_| rng.gen::<f64>() > 0.25).collect());
    }
    Problem {
        generator: LinearGenerator { a, b },
        encoder: LinearEncoder { maps },
        targets,
        masks,
        c0: Tensor::randn(&[2, 3], 1.0, &mut rng),
        z0: Tensor::randn(&[2, 2, 2], 1.0, &mut rng),
    }
}

impl Problem {
    /// Rows of the masked linear system `J x ≈ r` in `x = [vec(c), vec(z)]`.
    pub fn system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.c0.len() + self.z0.len();
        let a = DMatrix::from_row_slice(p, PIXELS, self.generator.a.data());
        let b = DMatrix::from_row_slice(1, PIXELS, self.generator.b.data());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs = Vec::new();
        for (l, m) in &self.encoder.maps {
            let d = m.shape()[1];
            let mm = DMatrix::from_row_slice(PIXELS, d, m.data());
            let am = &a * &mm;
            let bm = &b * &mm;
            for k in 0..d {
                if self.masks[l][k] {
                    rows.push(am.column(k).iter().copied().collect());
                    rhs.push(self.targets[l].data()[k] - bm[(0, k)]);
                }
            }
        }
        let j = DMatrix::from_fn(rows.len(), p, |i, q| rows[i][q]);
        (j, DVector::from_vec(rhs))
    }

    /// Least-squares minimizer from the normal equations.
    pub fn oracle(&self) -> Vec<f64> {
        let (j, r) = self.system();
        let x = (j.transpose() * &j).lu().solve(&(j.transpose() * r)).expect("full column rank");
        x.iter().copied().collect()
    }

    /// Step `1 / (2 λ_max(JᵀJ))` for gradient descent on `‖Jx − r‖²`, half the
    /// largest step that still contracts.
    pub fn stable_lr(&self) -> f64 {
        let (j, _) = self.system();
        let top = (j.transpose() * &j).symmetric_eigenvalues().max();
        0.5 / top
    }
}
