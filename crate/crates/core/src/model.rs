//! Post-LN transformer encoder with a classification head.
//!
//! Each layer computes `X' = LN(X + MHA(X))` then `X_out = LN(X' + FFN(X'))`
//! with `FFN(x) = GELU(x·W₁)·W₂`. Attention logits are scaled by
//! `1/√(d/N_h)`. The classifier reads the hidden state of position 0 (CLS).
//!
//! Token masking on the tape is soft: a per-token keep value in `[0, 1]`
//! multiplies that token's attention probability as a key (rows are then
//! renormalized) and scales its residual updates. A keep value of exactly 0 is
//! indistinguishable from removing the token, which is what lets the training
//! forward and the hard-pruning runtime agree.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, LN_EPS};

/// Token ids with fixed meaning in every dataset.
pub mod special {
    pub const CLS: u32 = 0;
    pub const SEP: u32 = 1;
    pub const PAD: u32 = 2;
    pub const UNK: u32 = 3;
    pub const COUNT: u32 = 4;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.num_layers < 1 {
            return bad("num_layers must be at least 1");
        }
        if self.heads == 0 || self.hidden < self.heads || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.ffn_inner == 0 || self.num_classes == 0 {
            return bad("ffn_inner and num_classes must be positive");
        }
        if self.vocab_size <= special::COUNT as usize {
            return bad("vocab_size must exceed the special-token block");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Number of early layers that receive ranking distillation: `⌈L/3⌉`.
    pub fn distill_layers(&self) -> usize {
        self.num_layers.div_ceil(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub w1: T,
    pub w2: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

impl<T> LayerParams<T> {
    pub const NAMES: [&'static str; 10] = [
        "wq",
        "wk",
        "wv",
        "wo",
        "ln1_gamma",
        "ln1_beta",
        "w1",
        "w2",
        "ln2_gamma",
        "ln2_beta",
    ];

    fn refs(&self) -> [&T; 10] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.w2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            w1: f(&self.w1),
            w2: f(&self.w2),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
        }
    }
}

/// All encoder weights. `T` is [`Tensor`] for stored parameters and [`Var`]
/// once they are placed on a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T = Tensor> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub classifier: T,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            classifier: f(&self.classifier),
        }
    }

    /// Parameters in a fixed canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.push(&self.classifier);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.push(&mut self.classifier);
        out
    }

    /// Names aligned with [`EncoderParams::iter`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for (i, _) in self.layers.iter().enumerate() {
            out.extend(LayerParams::<T>::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        out.push("classifier".into());
        out
    }
}

impl EncoderParams<Tensor> {
    /// Weights drawn from `N(0, init_std²)`, LN gains 1 and shifts 0.
    pub fn init(cfg: &ModelConfig, init_std: f64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.hidden, cfg.ffn_inner);
        let mut normal = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, init_std)).collect()).expect("shape from config")
        };
        let tok_emb = normal(&[cfg.vocab_size, d]);
        let pos_emb = normal(&[cfg.max_len, d]);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(LayerParams {
                wq: normal(&[d, d]),
                wk: normal(&[d, d]),
                wv: normal(&[d, d]),
                wo: normal(&[d, d]),
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                w1: normal(&[d, f]),
                w2: normal(&[f, d]),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
            });
        }
        let classifier = normal(&[d, cfg.num_classes]);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            classifier,
        })
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::init(cfg, 0.0, &mut Rng::new(0))?;
        for ((name, a), b) in self.names().iter().zip(self.iter()).zip(reference.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: expected {:?}, found {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Dimension("layer count differs from config".into()));
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().iter().all(|t| t.all_finite())
    }

    /// Places every parameter on the tape as a trainable (or frozen) leaf.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> EncoderParams<Var> {
        self.map(|t| tape.leaf(t.clone(), trainable))
    }
}

/// A trained encoder: configuration plus weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: EncoderParams,
}

impl EncoderModel {
    pub fn init(config: ModelConfig, init_std: f64, rng: &mut Rng) -> Result<Self> {
        let params = EncoderParams::init(&config, init_std, rng)?;
        Ok(Self { config, params })
    }
}

/// Per-layer output of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// One `n×n` attention matrix per head, over the rows present in this layer.
    pub attention: Vec<Var>,
    /// Hidden state leaving the layer.
    pub hidden: Var,
    /// Key weights that entered the layer (`None` means all ones).
    pub key_weights: Option<Var>,
    /// Original input positions of the rows present in this layer.
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Var,
}

/// `E_tok[token] + E_pos[position]` for each token; rows follow `positions`.
pub fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &EncoderParams<Var>,
    tokens: &[u32],
    positions: &[usize],
) -> Result<Var> {
    if tokens.is_empty() || tokens.len() != positions.len() {
        return Err(Error::Input(
            "tokens and positions must be non-empty and aligned".into(),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_len) {
        return Err(Error::Input(format!("position {bad} exceeds max_len {}", cfg.max_len)));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(params.tok_emb, &ids)?;
    let pos = tape.gather_rows(params.pos_emb, positions)?;
    tape.add(tok, pos)
}

/// Multi-head self-attention over the rows of `x`. Returns the projected
/// output and one attention matrix per head.
pub fn mha_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    lp: &LayerParams<Var>,
    x: Var,
    key_weights: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(x, lp.wq)?;
    let k = tape.matmul(x, lp.wk)?;
    let v = tape.matmul(x, lp.wv)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let a = match key_weights {
            Some(w) => tape.weighted_softmax_rows(logits, w)?,
            None => tape.softmax_rows(logits)?,
        };
        outs.push(tape.matmul(a, vh)?);
        heads.push(a);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((tape.matmul(cat, lp.wo)?, heads))
}

fn residual(tape: &mut Tape, x: Var, update: Var, weights: Option<Var>) -> Result<Var> {
    let update = match weights {
        Some(w) => tape.scale_rows(update, w)?,
        None => update,
    };
    tape.add(x, update)
}

/// `X' = LN(X + w∘MHA(X))`; returns `X'` and the attention heads.
pub fn attention_block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    lp: &LayerParams<Var>,
    x: Var,
    key_weights: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let (att, heads) = mha_forward(tape, cfg, lp, x, key_weights)?;
    let r = residual(tape, x, att, key_weights)?;
    Ok((tape.layer_norm(r, lp.ln1_gamma, lp.ln1_beta, LN_EPS)?, heads))
}

/// `X_out = LN(X' + w∘FFN(X'))`.
pub fn ffn_block(tape: &mut Tape, lp: &LayerParams<Var>, x: Var, update_weights: Option<Var>) -> Result<Var> {
    let h = tape.matmul(x, lp.w1)?;
    let h = tape.gelu(h);
    let f = tape.matmul(h, lp.w2)?;
    let r = residual(tape, x, f, update_weights)?;
    tape.layer_norm(r, lp.ln2_gamma, lp.ln2_beta, LN_EPS)
}

/// One encoder layer with the same weights on keys and both residual updates.
pub fn layer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    lp: &LayerParams<Var>,
    x: Var,
    key_weights: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let (xp, heads) = attention_block(tape, cfg, lp, x, key_weights)?;
    Ok((ffn_block(tape, lp, xp, key_weights)?, heads))
}

/// Logits read from row 0 (the CLS token) of the final hidden state.
pub fn classify(tape: &mut Tape, params: &EncoderParams<Var>, hidden: Var) -> Result<Var> {
    let cls = tape.gather_rows(hidden, &[0])?;
    let logits = tape.matmul(cls, params.classifier)?;
    let c = tape.value(logits).len();
    tape.reshape(logits, vec![c])
}

/// Full forward with explicit per-layer key weights (`None` = unmasked).
/// Weights of layer `i` act on the keys and on both residual updates of
/// layer `i`.
pub fn model_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &EncoderParams<Var>,
    tokens: &[u32],
    key_weights: Option<&[Vec<f64>]>,
) -> Result<ForwardTrace> {
    if let Some(kw) = key_weights {
        if kw.len() != cfg.num_layers || kw.iter().any(|w| w.len() != tokens.len()) {
            return Err(Error::Dimension("one key weight per token per layer required".into()));
        }
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(tape, cfg, params, tokens, &positions)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (i, lp) in params.layers.iter().enumerate() {
        let w = key_weights.map(|kw| tape.constant(Tensor::vector(kw[i].clone())));
        let (out, heads) = layer_forward(tape, cfg, lp, x, w)?;
        layers.push(LayerTrace {
            attention: heads,
            hidden: out,
            key_weights: w,
            positions: positions.clone(),
        });
        x = out;
    }
    let logits = classify(tape, params, x)?;
    Ok(ForwardTrace { layers, logits })
}

/// Cross-entropy of `logits` against `label`, stabilized by the max logit.
pub fn downstream_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let vals = tape.value(logits).data();
    if label >= vals.len() {
        return Err(Error::Input(format!("label {label} out of range")));
    }
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m);
    let e = tape.exp(shifted);
    let z = tape.sum(e);
    let lse = tape.ln(z);
    let picked = tape.gather_rows(shifted, &[label])?;
    tape.sub(lse, picked)
}

/// Unmasked logits for one token sequence, evaluated without gradients.
pub fn predict_logits(model: &EncoderModel, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.params.record(&mut tape, false);
    let trace = model_forward(&mut tape, &model.config, &params, tokens, None)?;
    Ok(tape.value(trace.logits).data().to_vec())
}
