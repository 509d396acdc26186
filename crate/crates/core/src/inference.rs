//! Hard token-dropping inference from a binarized [`PrunePlan`], with a
//! multiply-accumulate counter, latency measurement and retained-token
//! reporting.
//!
//! An active layer scores tokens with its own attention, then runs its
//! feed-forward block only on the tokens whose rank position is kept. The
//! first token (the classification token) always holds rank 1 and is kept.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::real_length;
use crate::error::{Error, Result};
use crate::masks::{binarize, MaskSet};
use crate::model::{EncoderModel, LayerParams, ModelConfig};
use crate::scoring::{rank_tokens, weighted_received_attention, ImportanceScores};
use crate::tensor::{gelu, layer_norm_rows, matmul_rm, matmul_rm_t, weighted_softmax_row, Tensor, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub active: bool,
    /// `keep_rank[j]` keeps the token at rank position `j + 1`.
    pub keep_rank: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    layers: Vec<LayerPlan>,
}

impl PrunePlan {
    /// Validates rank-1 pinning in active layers.
    pub fn new(layers: Vec<LayerPlan>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.active && l.keep_rank.first() != Some(&true) {
                return Err(Error::DegeneratePlan { layer: i + 1 });
            }
        }
        Ok(Self { layers })
    }

    pub fn noop(num_layers: usize, n_max: usize) -> Self {
        Self {
            layers: vec![
                LayerPlan {
                    active: false,
                    keep_rank: vec![true; n_max],
                };
                num_layers
            ],
        }
    }

    pub fn layers(&self) -> &[LayerPlan] {
        &self.layers
    }

    pub fn num_active(&self) -> usize {
        self.layers.iter().filter(|l| l.active).count()
    }

    /// Token counts `T_0..T_L` for an input of `n` real tokens.
    pub fn token_counts(&self, n: usize) -> Vec<usize> {
        let mut t = vec![n];
        let mut cur = n;
        for l in &self.layers {
            if l.active {
                cur = l.keep_rank.iter().take(cur).filter(|&&k| k).count();
            }
            t.push(cur);
        }
        t
    }

    /// The binary gate and rank values as mask probabilities, for checking
    /// the expected-FLOPs model against the counter.
    pub fn as_probs(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        (
            self.layers.iter().map(|l| f(l.active)).collect(),
            self.layers
                .iter()
                .map(|l| l.keep_rank.iter().map(|&k| f(k)).collect())
                .collect(),
        )
    }
}

/// Binarizes the deterministic masks: a layer is active when its gate value
/// is at least 0.5, and keeps the rank positions whose value is.
pub fn build_plan(masks: &MaskSet) -> PrunePlan {
    let layers = (0..masks.num_layers())
        .map(|i| LayerPlan {
            active: binarize(masks.gate[i].deterministic()),
            keep_rank: masks.rank_deterministic(i).into_iter().map(binarize).collect(),
        })
        .collect();
    PrunePlan { layers }
}

/// Multiply-accumulate counter for the executed products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub macs: u64,
}

impl FlopCounter {
    pub fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m * k * n) as u64;
    }

    /// Softmax allowance: one unit per attention entry per head.
    pub fn softmax(&mut self, heads: usize, rows: usize, cols: usize) {
        self.macs += (heads * rows * cols) as u64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub logits: Vec<f64>,
    /// Real-token count leaving each layer.
    pub retained: Vec<usize>,
    /// Original positions of the tokens entering each layer.
    pub layer_positions: Vec<Vec<usize>>,
    /// Importance scores of the tokens entering each layer, aligned with
    /// `layer_positions`.
    pub layer_scores: Vec<Vec<f64>>,
    pub flops: u64,
    pub nanos: u128,
}

impl InferenceResult {
    /// Real-token count entering each layer.
    pub fn input_counts(&self) -> Vec<usize> {
        self.layer_positions.iter().map(Vec::len).collect()
    }
}

fn project(x: &[f64], w: &Tensor, rows: usize, fc: &mut FlopCounter) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    fc.matmul(rows, k, n);
    matmul_rm(x, w.data(), rows, k, n)
}

/// Multi-head attention over `t` rows; returns `X' = LN(X + MHA(X))` and
/// the per-head attention matrices.
fn attention(
    cfg: &ModelConfig,
    lp: &LayerParams<Tensor>,
    x: &[f64],
    t: usize,
    fc: &mut FlopCounter,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let d = cfg.hidden;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(x, &lp.wq, t, fc);
    let k = project(x, &lp.wk, t, fc);
    let v = project(x, &lp.wv, t, fc);
    let mut cat = vec![0.0; t * d];
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut exps = vec![0.0; t];
    for h in 0..cfg.heads {
        let slice = |m: &[f64]| -> Vec<f64> {
            (0..t)
                .flat_map(|r| m[r * d + h * dh..r * d + (h + 1) * dh].iter().copied())
                .collect()
        };
        let (qh, kh, vh) = (slice(&q), slice(&k), slice(&v));
        fc.matmul(t, dh, t);
        let mut logits = matmul_rm_t(&qh, &kh, t, dh, t);
        for l in &mut logits {
            *l *= scale;
        }
        fc.softmax(1, t, t);
        let mut a = vec![0.0; t * t];
        for r in 0..t {
            weighted_softmax_row(&logits[r * t..(r + 1) * t], None, &mut a[r * t..(r + 1) * t], &mut exps)?;
        }
        fc.matmul(t, t, dh);
        let out = matmul_rm(&a, &vh, t, t, dh);
        for r in 0..t {
            cat[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&out[r * dh..(r + 1) * dh]);
        }
        heads.push(Tensor::new(vec![t, t], a)?);
    }
    let att = project(&cat, &lp.wo, t, fc);
    let res: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
    let (y, _, _) = layer_norm_rows(&res, d, lp.ln1_gamma.data(), lp.ln1_beta.data(), LN_EPS);
    Ok((y, heads))
}

fn feed_forward(cfg: &ModelConfig, lp: &LayerParams<Tensor>, x: &[f64], t: usize, fc: &mut FlopCounter) -> Vec<f64> {
    let mut h = project(x, &lp.w1, t, fc);
    for v in &mut h {
        *v = gelu(*v);
    }
    let f = project(&h, &lp.w2, t, fc);
    let res: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + b).collect();
    layer_norm_rows(&res, cfg.hidden, lp.ln2_gamma.data(), lp.ln2_beta.data(), LN_EPS).0
}

/// Runs the encoder on the real tokens of `tokens` (padding is ignored),
/// dropping tokens as the plan dictates.
pub fn infer(model: &EncoderModel, plan: &PrunePlan, tokens: &[u32]) -> Result<InferenceResult> {
    let start = Instant::now();
    let cfg = &model.config;
    let p = &model.params;
    if plan.layers.len() != cfg.num_layers {
        return Err(Error::Dimension("plan and model disagree on layer count".into()));
    }
    let n = real_length(tokens);
    if n == 0 {
        return Err(Error::Input("no real tokens".into()));
    }
    if n > cfg.max_len {
        return Err(Error::Input(format!("{n} tokens exceed max_len {}", cfg.max_len)));
    }
    if let Some(&bad) = tokens[..n].iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} out of range")));
    }
    let d = cfg.hidden;
    let mut x = Vec::with_capacity(n * d);
    for (i, &tok) in tokens[..n].iter().enumerate() {
        let e = p.tok_emb.row(tok as usize);
        let q = p.pos_emb.row(i);
        x.extend(e.iter().zip(q).map(|(a, b)| a + b));
    }
    let mut positions: Vec<usize> = (0..n).collect();
    let mut fc = FlopCounter::default();
    let mut retained = Vec::with_capacity(cfg.num_layers);
    let mut layer_positions = Vec::with_capacity(cfg.num_layers);
    let mut layer_scores = Vec::with_capacity(cfg.num_layers);
    for (lp, lplan) in p.layers.iter().zip(&plan.layers) {
        let t = positions.len();
        let (xp, heads) = attention(cfg, lp, &x, t, &mut fc)?;
        let scores = weighted_received_attention(&heads, &vec![1.0; t])?;
        layer_positions.push(positions.clone());
        let (xp, t) = if lplan.active {
            let ranking = rank_tokens(&ImportanceScores::from_values(0, scores.clone()).with_cls(0));
            let keep: Vec<usize> = (0..t)
                .filter(|&r| {
                    let rank = ranking.rank_of[r].expect("all rows are ranked");
                    lplan.keep_rank.get(rank - 1).copied().unwrap_or(false)
                })
                .collect();
            if keep.is_empty() {
                return Err(Error::DegeneratePlan {
                    layer: layer_positions.len(),
                });
            }
            let rows: Vec<f64> = keep
                .iter()
                .flat_map(|&r| xp[r * d..(r + 1) * d].iter().copied())
                .collect();
            positions = keep.iter().map(|&r| positions[r]).collect();
            (rows, keep.len())
        } else {
            (xp, t)
        };
        layer_scores.push(scores);
        x = feed_forward(cfg, lp, &xp, t, &mut fc);
        retained.push(t);
    }
    let cls = &x[..d];
    let logits = matmul_rm(cls, p.classifier.data(), 1, d, cfg.num_classes);
    Ok(InferenceResult {
        logits,
        retained,
        layer_positions,
        layer_scores,
        flops: fc.macs,
        nanos: start.elapsed().as_nanos(),
    })
}

/// Counted multiply-accumulates of one plan execution.
pub fn count_flops_instrumented(model: &EncoderModel, plan: &PrunePlan, tokens: &[u32]) -> Result<u64> {
    Ok(infer(model, plan, tokens)?.flops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
    pub p95_ns: f64,
}

/// Per-example wall-clock latency at batch size 1. The first pass warms up
/// and is discarded.
pub fn latency_bench(
    model: &EncoderModel,
    plan: &PrunePlan,
    examples: &[Vec<u32>],
    repeats: usize,
) -> Result<LatencyStats> {
    if repeats < 3 {
        return Err(Error::Config("latency benchmark needs at least 3 repeats".into()));
    }
    if examples.is_empty() {
        return Err(Error::Data("no examples to benchmark".into()));
    }
    for ex in examples {
        infer(model, plan, ex)?;
    }
    let mut times = Vec::with_capacity(repeats * examples.len());
    for _ in 0..repeats {
        for ex in examples {
            let t0 = Instant::now();
            infer(model, plan, ex)?;
            times.push(t0.elapsed().as_nanos() as f64);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        samples: times.len(),
        median_ns: crate::scoring::quantile(&times, 0.5),
        mean_ns: times.iter().sum::<f64>() / times.len() as f64,
        p95_ns: crate::scoring::quantile(&times, 0.95),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedRow {
    /// 1-based layer index.
    pub layer: usize,
    /// Mean number of real tokens entering the layer.
    pub mean_input: f64,
    /// Mean number of real tokens leaving the layer.
    pub mean_retained: f64,
}

pub fn retained_tokens_report(results: &[InferenceResult]) -> Vec<RetainedRow> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    let count = results.len() as f64;
    (0..first.retained.len())
        .map(|i| RetainedRow {
            layer: i + 1,
            mean_input: results.iter().map(|r| r.layer_positions[i].len() as f64).sum::<f64>() / count,
            mean_retained: results.iter().map(|r| r.retained[i] as f64).sum::<f64>() / count,
        })
        .collect()
}
