//! Expected FLOPs of a masked encoder, the Lagrangian budget penalty and the
//! target-sparsity schedule.
//!
//! FLOPs are multiply-accumulate counts. A layer that receives `T_{i-1}`
//! tokens runs attention over all of them, prunes using that attention, and
//! runs its feed-forward block on the `T_i` survivors:
//!
//! `c = Σ_i [mha(T_{i-1}) + ffn(T_i)]`, `mha(T) = 4d²T + 2dT² + N_h·T²`,
//! `ffn(T) = 2dd'T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masks::{active_prob_on_tape, pin_first, MaskSet, MaskVars};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub fn mha_flops(t: f64, cfg: &ModelConfig) -> f64 {
    let d = cfg.hidden as f64;
    4.0 * d * d * t + 2.0 * d * t * t + cfg.heads as f64 * t * t
}

pub fn ffn_flops(t: f64, cfg: &ModelConfig) -> f64 {
    2.0 * cfg.hidden as f64 * cfg.ffn_inner as f64 * t
}

/// Cost of one layer that keeps all `t` tokens.
pub fn layer_flops(t: f64, cfg: &ModelConfig) -> f64 {
    mha_flops(t, cfg) + ffn_flops(t, cfg)
}

/// Cost of the unpruned encoder on `n` tokens.
pub fn full_flops(cfg: &ModelConfig, n: usize) -> f64 {
    cfg.num_layers as f64 * layer_flops(n as f64, cfg)
}

/// Soft indicator that rank position `j` (1-based) is occupied when `t`
/// tokens are present.
pub fn occupancy(t: f64, j: usize) -> f64 {
    (t - (j as f64 - 1.0)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsBudget {
    pub full_flops: f64,
    pub target_sparsity: f64,
}

impl FlopsBudget {
    pub fn new(full_flops: f64, target_sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_sparsity) || !(full_flops >= 0.0) {
            return Err(Error::Config(format!(
                "target sparsity {target_sparsity} must lie in [0, 1)"
            )));
        }
        Ok(Self {
            full_flops,
            target_sparsity,
        })
    }

    pub fn target_flops(&self) -> f64 {
        self.full_flops * (1.0 - self.target_sparsity)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Expected token counts: `t[0] = n` enters layer 1, `t[i]` leaves layer `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedTokens {
    pub t: Vec<f64>,
}

impl ExpectedTokens {
    pub fn flops(&self, cfg: &ModelConfig) -> f64 {
        self.t
            .windows(2)
            .map(|w| mha_flops(w[0], cfg) + ffn_flops(w[1], cfg))
            .sum()
    }
}

/// `T_i = (1-g_i)·T_{i-1} + g_i·Σ_j p_ij·occ(T_{i-1}, j)` from explicit gate
/// and rank-position probabilities.
pub fn expected_tokens_from_probs(gate: &[f64], rank: &[Vec<f64>], n: usize) -> Result<ExpectedTokens> {
    if gate.len() != rank.len() {
        return Err(Error::Dimension("one rank row per gate required".into()));
    }
    if rank.iter().any(|r| r.len() < n) {
        return Err(Error::Input(format!("{n} tokens exceed the rank mask length")));
    }
    let mut t = Vec::with_capacity(gate.len() + 1);
    let mut prev = n as f64;
    t.push(prev);
    for (g, p) in gate.iter().zip(rank) {
        let kept: f64 = (1..=n).map(|j| p[j - 1] * occupancy(prev, j)).sum();
        prev = (1.0 - g) * prev + g * kept;
        t.push(prev);
    }
    Ok(ExpectedTokens { t })
}

pub fn expected_tokens(masks: &MaskSet, n: usize) -> Result<ExpectedTokens> {
    let rank: Vec<Vec<f64>> = (0..masks.num_layers()).map(|i| masks.rank_probs(i)).collect();
    expected_tokens_from_probs(&masks.gate_probs(), &rank, n)
}

pub fn expected_model_flops(masks: &MaskSet, cfg: &ModelConfig, n: usize) -> Result<f64> {
    Ok(expected_tokens(masks, n)?.flops(cfg))
}

/// Differentiable expected FLOPs for `n` tokens; returns the FLOPs and the
/// token counts `T_1..T_L`.
pub fn expected_flops_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &MaskVars,
    n: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.hidden as f64;
    let quad = 2.0 * d + cfg.heads as f64;
    let mha = |tape: &mut Tape, t: Var| -> Result<Var> {
        let lin = tape.scale(t, 4.0 * d * d);
        let sq = tape.mul(t, t)?;
        let sq = tape.scale(sq, quad);
        tape.add(lin, sq)
    };
    let offsets = Tensor::vector((0..n).map(|j| -(j as f64)).collect());
    let mut prev = tape.constant(Tensor::scalar(n as f64));
    let mut total: Option<Var> = None;
    let mut tokens = Vec::with_capacity(vars.gate.len());
    for (&gate, &rank) in vars.gate.iter().zip(&vars.rank) {
        let n_max = tape.value(rank).len();
        if n > n_max {
            return Err(Error::Input(format!("{n} tokens exceed the rank mask length")));
        }
        let g = active_prob_on_tape(tape, gate);
        let p = active_prob_on_tape(tape, rank);
        let p = pin_first(tape, p)?;
        let p = if n < n_max {
            let row = tape.reshape(p, vec![1, n_max])?;
            let row = tape.slice_cols(row, 0, n)?;
            tape.reshape(row, vec![n])?
        } else {
            p
        };
        let spread = tape.broadcast(prev, &[n])?;
        let occ = tape.add_const(spread, &offsets)?;
        let occ = tape.clamp(occ, 0.0, 1.0);
        let kept = tape.mul(p, occ)?;
        let kept = tape.sum(kept);
        let delta = tape.sub(kept, prev)?;
        let delta = tape.mul(g, delta)?;
        let next = tape.add(prev, delta)?;
        let a = mha(tape, prev)?;
        let f = tape.scale(next, 2.0 * d * cfg.ffn_inner as f64);
        let layer = tape.add(a, f)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, layer)?,
            None => layer,
        });
        tokens.push(next);
        prev = next;
    }
    let total = total.ok_or_else(|| Error::Input("model has no layers".into()))?;
    Ok((total, tokens))
}

/// `λ1·(c − C) + λ2·(c − C)²`.
pub fn lagrangian_penalty(c: f64, target: f64, ls: &LagrangeState) -> f64 {
    let gap = c - target;
    ls.lambda1 * gap + ls.lambda2 * gap * gap
}

/// Differentiable penalty; `lambda1` and `lambda2` are scalar nodes.
pub fn penalty_on_tape(tape: &mut Tape, c: Var, target: f64, lambda1: Var, lambda2: Var) -> Result<Var> {
    let gap = tape.add_scalar(c, -target);
    let lin = tape.mul(lambda1, gap)?;
    let sq = tape.mul(gap, gap)?;
    let quad = tape.mul(lambda2, sq)?;
    tape.add(lin, quad)
}

/// Linear ramp from 0 to `target` over `warmup_steps`, then constant.
pub fn sparsity_schedule(step: usize, warmup_steps: usize, target: f64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    Ok(target.min(target * step as f64 / warmup_steps as f64))
}
