//! Hard concrete gate masks (one per layer) and rank-position masks (one per
//! layer and rank position).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tensor};

/// Lower stretch bound `l`.
pub const STRETCH_LO: f64 = -0.1;
/// Upper stretch bound `r`.
pub const STRETCH_HI: f64 = 1.1;
/// Temperature `beta`.
pub const TEMPERATURE: f64 = 2.0 / 3.0;

/// Gates start biased closed.
pub const GATE_INIT: f64 = -2.5;
/// Rank masks start biased open.
pub const RANK_INIT: f64 = 2.5;

/// `beta·ln(-l/r)`, the shift between `log_alpha` and the logit of `P(M>0)`.
fn open_shift() -> f64 {
    TEMPERATURE * (-STRETCH_LO / STRETCH_HI).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    pub log_alpha: f64,
}

impl HardConcrete {
    pub fn new(log_alpha: f64) -> Self {
        Self { log_alpha }
    }

    /// Stretched and clamped sample for uniform noise `u ∈ (0, 1)`.
    pub fn sample(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Input(format!("hard concrete noise {u} outside (0, 1)")));
        }
        Ok(stretch(sigmoid(((u / (1.0 - u)).ln() + self.log_alpha) / TEMPERATURE)))
    }

    /// `d sample(u) / d log_alpha`; zero where the clamp is active.
    pub fn sample_grad(&self, u: f64) -> Result<f64> {
        let z = self.sample(u)?;
        if z <= 0.0 || z >= 1.0 {
            return Ok(0.0);
        }
        let s = sigmoid(((u / (1.0 - u)).ln() + self.log_alpha) / TEMPERATURE);
        Ok((STRETCH_HI - STRETCH_LO) * s * (1.0 - s) / TEMPERATURE)
    }

    /// Test-time value: the sample at `u = 0.5`.
    pub fn deterministic(&self) -> f64 {
        stretch(sigmoid(self.log_alpha / TEMPERATURE))
    }

    /// `P(M > 0)`.
    pub fn active_prob(&self) -> f64 {
        sigmoid(self.log_alpha - open_shift())
    }
}

fn stretch(s: f64) -> f64 {
    (s * (STRETCH_HI - STRETCH_LO) + STRETCH_LO).clamp(0.0, 1.0)
}

/// Keep rule for test-time masks; exactly 0.5 keeps.
pub fn binarize(x: f64) -> bool {
    x >= 0.5
}

/// Soft keep value of a token given its layer gate and rank-position mask.
pub fn effective_keep(gate: f64, rank: f64) -> f64 {
    1.0 - gate * (1.0 - rank)
}

/// All mask parameters of a model: `gate[i]` for layer `i`, `rank[i][j]` for
/// rank position `j + 1` of layer `i`. Rank position 1 is reserved for the
/// classification token and always kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub gate: Vec<HardConcrete>,
    pub rank: Vec<Vec<HardConcrete>>,
}

impl MaskSet {
    pub fn new(num_layers: usize, n_max: usize) -> Self {
        Self {
            gate: vec![HardConcrete::new(GATE_INIT); num_layers],
            rank: vec![vec![HardConcrete::new(RANK_INIT); n_max]; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.gate.len()
    }

    pub fn n_max(&self) -> usize {
        self.rank.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, num_layers: usize, n_max: usize) -> Result<()> {
        if self.gate.len() != num_layers || self.rank.len() != num_layers || self.rank.iter().any(|r| r.len() != n_max)
        {
            return Err(Error::Dimension(format!(
                "mask set must cover {num_layers} layers and {n_max} rank positions"
            )));
        }
        let finite = self
            .gate
            .iter()
            .chain(self.rank.iter().flatten())
            .all(|p| p.log_alpha.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite mask parameter".into()));
        }
        Ok(())
    }

    pub fn gate_probs(&self) -> Vec<f64> {
        self.gate.iter().map(HardConcrete::active_prob).collect()
    }

    /// Active probabilities of layer `i`'s rank positions, position 1 pinned to 1.
    pub fn rank_probs(&self, layer: usize) -> Vec<f64> {
        let mut p: Vec<f64> = self.rank[layer].iter().map(HardConcrete::active_prob).collect();
        if let Some(first) = p.first_mut() {
            *first = 1.0;
        }
        p
    }

    /// Deterministic rank values of layer `i`, position 1 pinned to 1.
    pub fn rank_deterministic(&self, layer: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.rank[layer].iter().map(HardConcrete::deterministic).collect();
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        v
    }

    /// Records every `log_alpha` as a tape leaf.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> MaskVars {
        let gate = self
            .gate
            .iter()
            .map(|g| tape.leaf(Tensor::scalar(g.log_alpha), trainable))
            .collect();
        let rank = self
            .rank
            .iter()
            .map(|r| tape.leaf(Tensor::vector(r.iter().map(|p| p.log_alpha).collect()), trainable))
            .collect();
        MaskVars { gate, rank }
    }

    /// Flattened `log_alpha` values: gates first, then ranks layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.gate
            .iter()
            .chain(self.rank.iter().flatten())
            .map(|p| p.log_alpha)
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.gate.len() + self.rank.iter().map(Vec::len).sum::<usize>();
        if flat.len() != total {
            return Err(Error::Dimension("flat mask vector has the wrong length".into()));
        }
        for (p, &v) in self.gate.iter_mut().chain(self.rank.iter_mut().flatten()).zip(flat) {
            p.log_alpha = v;
        }
        Ok(())
    }
}

/// Tape handles for a [`MaskSet`]: one scalar per gate, one `n_max` vector
/// per layer of rank masks.
#[derive(Clone, Debug)]
pub struct MaskVars {
    pub gate: Vec<Var>,
    pub rank: Vec<Var>,
}

impl MaskVars {
    /// Gradients in [`MaskSet::to_flat`] order (zeros where none flowed).
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in self.gate.iter().chain(&self.rank) {
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        out
    }
}

/// Uniform noise for one training step: one draw per gate and one per rank
/// position (position 1 is pinned and consumes no draw).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskNoise {
    pub gate: Vec<f64>,
    pub rank: Vec<Vec<f64>>,
}

impl MaskNoise {
    pub fn draw(rng: &mut Rng, num_layers: usize, n_max: usize) -> Self {
        let gate = (0..num_layers).map(|_| rng.uniform_open()).collect();
        let rank = (0..num_layers)
            .map(|_| {
                let mut v = vec![0.5; n_max];
                for u in v.iter_mut().skip(1) {
                    *u = rng.uniform_open();
                }
                v
            })
            .collect();
        Self { gate, rank }
    }
}

/// Plain-value samples for one step: gate values and pinned rank values.
pub fn sample_masks(masks: &MaskSet, noise: &MaskNoise) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let gate = masks
        .gate
        .iter()
        .zip(&noise.gate)
        .map(|(p, &u)| p.sample(u))
        .collect::<Result<Vec<_>>>()?;
    let mut rank = Vec::with_capacity(masks.rank.len());
    for (ps, us) in masks.rank.iter().zip(&noise.rank) {
        let mut row = ps
            .iter()
            .zip(us)
            .map(|(p, &u)| p.sample(u))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = row.first_mut() {
            *first = 1.0;
        }
        rank.push(row);
    }
    Ok((gate, rank))
}

/// Differentiable hard concrete sample; `u` has the shape of `log_alpha`.
pub fn sample_on_tape(tape: &mut Tape, log_alpha: Var, u: &Tensor) -> Result<Var> {
    if u.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Input("hard concrete noise outside (0, 1)".into()));
    }
    let logit = Tensor::new(
        u.shape().to_vec(),
        u.data().iter().map(|&v| (v / (1.0 - v)).ln()).collect(),
    )?;
    let x = tape.add_const(log_alpha, &logit)?;
    let x = tape.scale(x, 1.0 / TEMPERATURE);
    let s = tape.sigmoid(x);
    let s = tape.scale(s, STRETCH_HI - STRETCH_LO);
    let s = tape.add_scalar(s, STRETCH_LO);
    Ok(tape.clamp(s, 0.0, 1.0))
}

/// Differentiable `P(M > 0)`.
pub fn active_prob_on_tape(tape: &mut Tape, log_alpha: Var) -> Var {
    let x = tape.add_scalar(log_alpha, -open_shift());
    tape.sigmoid(x)
}

/// Replaces element 0 of a vector node by the constant 1.
pub fn pin_first(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let one = tape.constant(Tensor::ones(&[1, 1]));
    if n == 1 {
        return tape.reshape(one, vec![1]);
    }
    let row = tape.reshape(v, vec![1, n])?;
    let rest = tape.slice_cols(row, 1, n)?;
    let joined = tape.concat_cols(&[one, rest])?;
    tape.reshape(joined, vec![n])
}
