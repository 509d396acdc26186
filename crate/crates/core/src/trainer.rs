//! Teacher fine-tuning and joint pruning: model weights and mask parameters
//! descend on `L_down + L_reg + λ·L_distill` while the Lagrange multipliers
//! ascend on `L_reg`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Example;
use crate::distill::{distill_loss, ndcg, real_length, teacher_ranking, StudentScores, TeacherRanking};
use crate::error::{Error, Result};
use crate::flops::{
    expected_flops_on_tape, expected_model_flops, full_flops, penalty_on_tape, sparsity_schedule, LagrangeState,
};
use crate::inference::{build_plan, infer, retained_tokens_report, PrunePlan, RetainedRow};
use crate::masks::{sample_masks, MaskNoise, MaskSet};
use crate::model::{
    attention_block, classify, downstream_loss, embed, ffn_block, EncoderModel, EncoderParams, ModelConfig,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{Rng, RngState};
use crate::scoring::{rank_tokens, received_attention_on_tape, ImportanceScores};
use crate::tensor::Tensor;

/// Offsets that derive independent random streams from the run seed.
const INIT_STREAM: u64 = 0x5EED_0001;
const MASK_STREAM: u64 = 0x5EED_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Mask parameters and multipliers learn this many times faster.
    #[serde(default = "default_mask_lr_multiplier")]
    pub mask_lr_multiplier: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default)]
    pub target_sparsity: f64,
    #[serde(default)]
    pub lambda_distill_init: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_mask_lr_multiplier() -> f64 {
    10.0
}
fn default_seed() -> u64 {
    crate::rng::DEFAULT_SEED
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_init_std() -> f64 {
    0.02
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, total_epochs: usize) -> Self {
        Self {
            learning_rate,
            mask_lr_multiplier: default_mask_lr_multiplier(),
            batch_size,
            warmup_epochs: 0,
            total_epochs,
            target_sparsity: 0.0,
            lambda_distill_init: 0.0,
            seed: default_seed(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_weight_decay(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.mask_lr_multiplier > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.init_std > 0.0;
        if !ok {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn validate_for_pruning(&self) -> Result<()> {
        self.validate()?;
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity {} must lie in [0, 1)",
                self.target_sparsity
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config("warmup_epochs must be below total_epochs".into()));
        }
        if !(self.lambda_distill_init >= 0.0) {
            return Err(Error::Config("lambda_distill_init must be non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self, lr: f64, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Linear decay from `lambda_init` at step 0 to 0 at `warmup_steps`.
pub fn lambda_schedule(step: usize, warmup_steps: usize, lambda_init: f64) -> f64 {
    if step >= warmup_steps {
        0.0
    } else {
        lambda_init * (1.0 - step as f64 / warmup_steps as f64)
    }
}

pub fn flatten_params(p: &EncoderParams) -> Vec<f64> {
    p.iter().into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn set_flat_params(p: &mut EncoderParams, flat: &[f64]) -> Result<()> {
    if flat.len() != p.num_scalars() {
        return Err(Error::Dimension("flat parameter vector has the wrong length".into()));
    }
    let mut off = 0;
    for t in p.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Sampled mask values recorded on one example's tape.
pub struct SoftMasks<'a> {
    pub gate: &'a [Var],
    pub rank: &'a [Var],
    pub gate_values: &'a [f64],
}

pub struct StudentOutput {
    pub logits: Var,
    pub scores: Vec<StudentScores>,
}

/// Training-style forward over the real tokens `tokens`.
///
/// Layer `i` attends with keys weighted by the cumulative keep values that
/// entered it, scores tokens with that attention, maps the rank-position
/// masks onto tokens by their rank, multiplies the keep values by
/// `1 − g·(1 − r)` and scales its feed-forward update by the result. Tokens
/// whose keep value is exactly 0 are dropped from later layers, which is the
/// same as keeping them with zero weight.
pub fn soft_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &EncoderParams<Var>,
    tokens: &[u32],
    masks: Option<&SoftMasks>,
    score_layers: usize,
) -> Result<StudentOutput> {
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(tape, cfg, params, tokens, &positions)?;
    let mut keep: Option<Var> = None;
    let mut scores_out = Vec::with_capacity(score_layers);
    for (i, lp) in params.layers.iter().enumerate() {
        let (xp, heads) = attention_block(tape, cfg, lp, x, keep)?;
        let prune_here = masks.is_some_and(|m| m.gate_values[i] != 0.0);
        let scores = if i < score_layers || prune_here {
            Some(received_attention_on_tape(tape, &heads, keep)?)
        } else {
            None
        };
        if i < score_layers {
            scores_out.push(StudentScores {
                scores: scores.expect("computed above"),
                positions: positions.clone(),
            });
        }
        let mut next = keep;
        if let (true, Some(m), Some(s)) = (prune_here, masks, scores) {
            let values = tape.value(s).data().to_vec();
            let ranking = rank_tokens(&ImportanceScores::from_values(i + 1, values).with_cls(0));
            let idx: Vec<usize> = ranking
                .rank_of
                .iter()
                .map(|r| r.expect("all rows ranked") - 1)
                .collect();
            let r = tape.gather_rows(m.rank[i], &idx)?;
            let closed = tape.neg(r);
            let closed = tape.add_scalar(closed, 1.0);
            let drop = tape.mul_scalar(closed, m.gate[i])?;
            let drop = tape.neg(drop);
            let factor = tape.add_scalar(drop, 1.0);
            next = Some(match keep {
                Some(k) => tape.mul(k, factor)?,
                None => factor,
            });
        }
        x = ffn_block(tape, lp, xp, next)?;
        if let Some(k) = next {
            let vals = tape.value(k).data();
            if vals.contains(&0.0) {
                let live: Vec<usize> = (0..vals.len()).filter(|&r| vals[r] != 0.0).collect();
                x = tape.gather_rows(x, &live)?;
                next = Some(tape.gather_rows(k, &live)?);
                positions = live.iter().map(|&r| positions[r]).collect();
            }
        }
        keep = next;
    }
    let logits = classify(tape, params, x)?;
    Ok(StudentOutput {
        logits,
        scores: scores_out,
    })
}

/// Logits of the training-style forward with fixed mask values.
pub fn soft_logits(model: &EncoderModel, tokens: &[u32], gate: &[f64], rank: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.params.record(&mut tape, false);
    let g: Vec<Var> = gate.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect();
    let r: Vec<Var> = rank.iter().map(|v| tape.constant(Tensor::vector(v.clone()))).collect();
    let masks = SoftMasks {
        gate: &g,
        rank: &r,
        gate_values: gate,
    };
    let n = real_length(tokens);
    let out = soft_forward(&mut tape, &model.config, &params, &tokens[..n], Some(&masks), 0)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Values of the objective's parts for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub downstream: f64,
    pub reg: f64,
    pub distill: f64,
    /// `c(M)/full` at the batch's longest real length.
    pub flops_frac: f64,
    pub target_frac: f64,
}

/// Gradients of the objective: model (flat), masks (flat), multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub model: Vec<f64>,
    pub masks: Vec<f64>,
    pub lagrange: [f64; 2],
}

/// Everything the pruning objective depends on for one batch.
pub struct ObjectiveInput<'a> {
    pub model: &'a EncoderModel,
    pub masks: &'a MaskSet,
    pub lagrange: LagrangeState,
    pub noise: &'a MaskNoise,
    pub examples: &'a [&'a Example],
    pub teacher: &'a [&'a TeacherRanking],
    pub lambda_distill: f64,
    pub sparsity: f64,
}

fn check_finite(v: f64, step: usize, component: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            step,
            component: component.into(),
        })
    }
}

/// `mean_e[L_down + λ·L_distill] + L_reg` and its gradients.
pub fn objective(inp: &ObjectiveInput, step: usize) -> Result<(LossParts, Gradients)> {
    let cfg = &inp.model.config;
    let nl = cfg.num_layers;
    let n_max = inp.masks.n_max();
    let (gate_vals, rank_vals) = sample_masks(inp.masks, inp.noise)?;
    let batch = inp.examples.len() as f64;
    let mut g_model = vec![0.0; inp.model.params.num_scalars()];
    let mut g_gate = vec![0.0; nl];
    let mut g_rank = vec![vec![0.0; n_max]; nl];
    let mut down_sum = 0.0;
    let mut distill_sum = 0.0;
    let score_layers = if inp.lambda_distill > 0.0 {
        cfg.distill_layers()
    } else {
        0
    };
    for (e, ex) in inp.examples.iter().enumerate() {
        let n = real_length(&ex.tokens);
        let mut tape = Tape::new();
        let params = inp.model.params.record(&mut tape, true);
        let gv: Vec<Var> = gate_vals.iter().map(|&v| tape.param(Tensor::scalar(v))).collect();
        let rv: Vec<Var> = rank_vals
            .iter()
            .map(|v| tape.param(Tensor::vector(v.clone())))
            .collect();
        let masks = SoftMasks {
            gate: &gv,
            rank: &rv,
            gate_values: &gate_vals,
        };
        let out = soft_forward(&mut tape, cfg, &params, &ex.tokens[..n], Some(&masks), score_layers)?;
        let down = downstream_loss(&mut tape, out.logits, ex.label)?;
        down_sum += check_finite(tape.item(down), step, "downstream loss")?;
        let mut loss = down;
        if score_layers > 0 {
            let d = distill_loss(&mut tape, inp.teacher[e], &out.scores)?;
            distill_sum += check_finite(tape.item(d), step, "distillation loss")?;
            let d = tape.scale(d, inp.lambda_distill);
            loss = tape.add(loss, d)?;
        }
        let loss = tape.scale(loss, 1.0 / batch);
        tape.backward(loss)?;
        let mut off = 0;
        for v in params.iter() {
            let len = tape.value(*v).len();
            if let Some(g) = tape.grad(*v) {
                for (acc, x) in g_model[off..off + len].iter_mut().zip(g) {
                    *acc += x;
                }
            }
            off += len;
        }
        for i in 0..nl {
            if let Some(g) = tape.grad(gv[i]) {
                g_gate[i] += g[0];
            }
            if let Some(g) = tape.grad(rv[i]) {
                for (acc, x) in g_rank[i].iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    // Budget penalty on a separate tape.
    let n_batch = inp.examples.iter().map(|e| real_length(&e.tokens)).max().unwrap_or(1);
    let full = full_flops(cfg, n_batch);
    let target_frac = 1.0 - inp.sparsity;
    let mut tape = Tape::new();
    let vars = inp.masks.record(&mut tape, true);
    let l1 = tape.param(Tensor::scalar(inp.lagrange.lambda1));
    let l2 = tape.param(Tensor::scalar(inp.lagrange.lambda2));
    let (c, _) = expected_flops_on_tape(&mut tape, cfg, &vars, n_batch)?;
    let frac = tape.scale(c, 1.0 / full);
    let reg = penalty_on_tape(&mut tape, frac, target_frac, l1, l2)?;
    let reg_value = check_finite(tape.item(reg), step, "constraint penalty")?;
    let flops_frac = tape.item(frac);
    tape.backward(reg)?;
    let mut g_masks = vars.flat_grad(&tape);
    let lagrange = [tape.grad(l1).map_or(0.0, |g| g[0]), tape.grad(l2).map_or(0.0, |g| g[0])];

    // Chain the per-sample gradients back to log_alpha.
    for i in 0..nl {
        g_masks[i] += g_gate[i] * inp.masks.gate[i].sample_grad(inp.noise.gate[i])?;
        for j in 1..n_max {
            let slot = nl + i * n_max + j;
            g_masks[slot] += g_rank[i][j] * inp.masks.rank[i][j].sample_grad(inp.noise.rank[i][j])?;
        }
    }
    let downstream = down_sum / batch;
    let distill = distill_sum / batch;
    let parts = LossParts {
        total: downstream + reg_value + inp.lambda_distill * distill,
        downstream,
        reg: reg_value,
        distill,
        flops_frac,
        target_frac,
    };
    let grads = Gradients {
        model: g_model,
        masks: g_masks,
        lagrange,
    };
    for (name, g) in [("model gradient", &grads.model), ("mask gradient", &grads.masks)] {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                component: name.into(),
            });
        }
    }
    Ok((parts, grads))
}

/// Mean downstream loss over a batch of unpruned forwards, with gradients.
fn dense_objective(model: &EncoderModel, examples: &[&Example], step: usize) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.params.num_scalars()];
    let mut total = 0.0;
    let batch = examples.len() as f64;
    for ex in examples {
        let n = real_length(&ex.tokens);
        let mut tape = Tape::new();
        let params = model.params.record(&mut tape, true);
        let out = soft_forward(&mut tape, &model.config, &params, &ex.tokens[..n], None, 0)?;
        let loss = downstream_loss(&mut tape, out.logits, ex.label)?;
        total += check_finite(tape.item(loss), step, "downstream loss")?;
        let loss = tape.scale(loss, 1.0 / batch);
        tape.backward(loss)?;
        let mut off = 0;
        for v in params.iter() {
            let len = tape.value(*v).len();
            if let Some(g) = tape.grad(*v) {
                for (acc, x) in grad[off..off + len].iter_mut().zip(g) {
                    *acc += x;
                }
            }
            off += len;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            step,
            component: "model gradient".into(),
        });
    }
    Ok((total / batch, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lambda_distill: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub parts: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_downstream: f64,
    pub mean_reg: f64,
    pub mean_distill: f64,
    pub flops_frac: f64,
    pub target_frac: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_distill: f64,
}

impl EpochMetrics {
    fn from_logs(epoch: usize, logs: &[StepLog]) -> Self {
        let k = logs.len().max(1) as f64;
        let mean = |f: fn(&StepLog) -> f64| logs.iter().map(f).sum::<f64>() / k;
        let last = logs.last();
        Self {
            epoch,
            steps: logs.len(),
            mean_total: mean(|l| l.parts.total),
            mean_downstream: mean(|l| l.parts.downstream),
            mean_reg: mean(|l| l.parts.reg),
            mean_distill: mean(|l| l.parts.distill),
            flops_frac: last.map_or(1.0, |l| l.parts.flops_frac),
            target_frac: last.map_or(1.0, |l| l.parts.target_frac),
            lambda1: last.map_or(0.0, |l| l.lambda1),
            lambda2: last.map_or(0.0, |l| l.lambda2),
            lambda_distill: last.map_or(0.0, |l| l.lambda_distill),
        }
    }
}

/// Optimizer and schedule state; together with the model and masks it
/// resumes a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub data_rng: RngState,
    pub mask_rng: RngState,
    pub model_opt: AdamW,
    pub mask_opt: Option<AdamW>,
    pub lagrange_opt: Option<AdamW>,
    pub lagrange: LagrangeState,
    pub sparsity: f64,
    pub lambda_distill: f64,
    pub log: Vec<StepLog>,
    pub epochs: Vec<EpochMetrics>,
}

/// A resumable point between epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub model: EncoderModel,
    pub masks: Option<MaskSet>,
    pub state: TrainState,
}

fn steps_per_epoch(count: usize, batch: usize) -> usize {
    count.div_ceil(batch)
}

fn shuffled(rng: &mut Rng, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    order
}

/// Fresh model initialized from the configured seed.
pub fn init_model(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<EncoderModel> {
    model_cfg.validate()?;
    let mut rng = Rng::new(cfg.seed.wrapping_add(INIT_STREAM));
    EncoderModel::init(model_cfg.clone(), cfg.init_std, &mut rng)
}

fn check_examples(model: &EncoderModel, train: &[Example]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = &model.config;
    for (i, e) in train.iter().enumerate() {
        let n = real_length(&e.tokens);
        if n == 0 || n > cfg.max_len || e.label >= cfg.num_classes {
            return Err(Error::Data(format!("training example {i} does not fit the model")));
        }
        if e.tokens[..n].iter().any(|&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!("training example {i} has an out-of-range token")));
        }
    }
    Ok(())
}

/// Fine-tunes `model` on the downstream loss alone.
pub fn fine_tune(
    mut model: EncoderModel,
    train: &[Example],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<StepLog>)> {
    cfg.validate()?;
    check_examples(&model, train)?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamW::new(
        cfg.adamw(cfg.learning_rate, cfg.weight_decay),
        model.params.num_scalars(),
    );
    let mut flat = flatten_params(&model.params);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.total_epochs {
        let order = shuffled(&mut rng, train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = dense_objective(&model, &batch, step)?;
            opt.step(&mut flat, &grad)?;
            set_flat_params(&mut model.params, &flat)?;
            log.push(StepLog {
                step,
                epoch,
                lambda_distill: 0.0,
                lambda1: 0.0,
                lambda2: 0.0,
                parts: LossParts {
                    total: loss,
                    downstream: loss,
                    flops_frac: 1.0,
                    target_frac: 1.0,
                    ..LossParts::default()
                },
            });
            step += 1;
        }
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epochs: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Initializes and fine-tunes the unpruned teacher.
pub fn train_teacher(
    train: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TeacherReport)> {
    let model = init_model(model_cfg, cfg)?;
    let (model, log) = fine_tune(model, train, cfg)?;
    let train_accuracy = accuracy(&model, &PrunePlan::noop(model_cfg.num_layers, model_cfg.max_len), train)?;
    let report = TeacherReport {
        epochs: cfg.total_epochs,
        steps: log.len(),
        train_accuracy,
        final_loss: log.last().map_or(f64::NAN, |l| l.parts.total),
    };
    Ok((model, report))
}

pub fn accuracy(model: &EncoderModel, plan: &PrunePlan, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let mut correct = 0;
    for e in examples {
        let r = infer(model, plan, &e.tokens)?;
        if argmax(&r.logits) == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn teacher_rankings(teacher: &EncoderModel, examples: &[Example]) -> Result<Vec<TeacherRanking>> {
    examples.iter().map(|e| teacher_ranking(teacher, &e.tokens)).collect()
}

/// Pruning run driver; holds the moving parts between steps.
pub struct PruneRun<'a> {
    pub model: EncoderModel,
    pub masks: MaskSet,
    pub state: TrainState,
    train: &'a [Example],
    teacher: &'a [TeacherRanking],
    cfg: TrainConfig,
    data_rng: Rng,
    mask_rng: Rng,
}

impl<'a> PruneRun<'a> {
    pub fn new(
        teacher_model: &EncoderModel,
        train: &'a [Example],
        teacher: &'a [TeacherRanking],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate_for_pruning()?;
        check_examples(teacher_model, train)?;
        if teacher.len() != train.len() {
            return Err(Error::Input("teacher rankings do not cover the training set".into()));
        }
        let model = teacher_model.clone();
        let c = &model.config;
        let masks = MaskSet::new(c.num_layers, c.max_len);
        let mask_slots = masks.to_flat().len();
        let mask_lr = cfg.learning_rate * cfg.mask_lr_multiplier;
        let data_rng = Rng::new(cfg.seed);
        let mask_rng = Rng::new(cfg.seed.wrapping_add(MASK_STREAM));
        let state = TrainState {
            step: 0,
            epoch: 0,
            data_rng: data_rng.state(),
            mask_rng: mask_rng.state(),
            model_opt: AdamW::new(
                cfg.adamw(cfg.learning_rate, cfg.weight_decay),
                model.params.num_scalars(),
            ),
            mask_opt: Some(AdamW::new(cfg.adamw(mask_lr, 0.0), mask_slots)),
            lagrange_opt: Some(AdamW::new(cfg.adamw(mask_lr, 0.0), 2)),
            lagrange: LagrangeState::default(),
            sparsity: 0.0,
            lambda_distill: cfg.lambda_distill_init,
            log: Vec::new(),
            epochs: Vec::new(),
        };
        Ok(Self {
            model,
            masks,
            state,
            train,
            teacher,
            cfg: cfg.clone(),
            data_rng,
            mask_rng,
        })
    }

    pub fn resume(
        snapshot: Snapshot,
        train: &'a [Example],
        teacher: &'a [TeacherRanking],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut run = Self::new(&snapshot.model, train, teacher, cfg)?;
        let masks = snapshot
            .masks
            .ok_or_else(|| Error::Input("snapshot carries no masks".into()))?;
        masks.validate(run.model.config.num_layers, run.model.config.max_len)?;
        run.masks = masks;
        run.data_rng = Rng::from_state(snapshot.state.data_rng);
        run.mask_rng = Rng::from_state(snapshot.state.mask_rng);
        run.state = snapshot.state;
        Ok(run)
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut state = self.state.clone();
        state.data_rng = self.data_rng.state();
        state.mask_rng = self.mask_rng.state();
        Snapshot {
            model: self.model.clone(),
            masks: Some(self.masks.clone()),
            state,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.cfg.warmup_epochs * steps_per_epoch(self.train.len(), self.cfg.batch_size)).max(1)
    }

    pub fn done(&self) -> bool {
        self.state.epoch >= self.cfg.total_epochs
    }

    /// One optimization step on the given training indices.
    pub fn step(&mut self, batch_idx: &[usize]) -> Result<LossParts> {
        let step = self.state.step;
        let warm = self.warmup_steps();
        let sparsity = sparsity_schedule(step, warm, self.cfg.target_sparsity)?;
        let lambda_distill = lambda_schedule(step, warm, self.cfg.lambda_distill_init);
        let c = &self.model.config;
        let noise = MaskNoise::draw(&mut self.mask_rng, c.num_layers, c.max_len);
        let examples: Vec<&Example> = batch_idx.iter().map(|&i| &self.train[i]).collect();
        let teacher: Vec<&TeacherRanking> = batch_idx.iter().map(|&i| &self.teacher[i]).collect();
        let input = ObjectiveInput {
            model: &self.model,
            masks: &self.masks,
            lagrange: self.state.lagrange,
            noise: &noise,
            examples: &examples,
            teacher: &teacher,
            lambda_distill,
            sparsity,
        };
        let (parts, grads) = objective(&input, step)?;

        let mut flat = flatten_params(&self.model.params);
        self.state.model_opt.step(&mut flat, &grads.model)?;
        set_flat_params(&mut self.model.params, &flat)?;
        let mut mflat = self.masks.to_flat();
        self.state
            .mask_opt
            .as_mut()
            .expect("pruning runs carry a mask optimizer")
            .step(&mut mflat, &grads.masks)?;
        self.masks.set_flat(&mflat)?;
        let mut lam = [self.state.lagrange.lambda1, self.state.lagrange.lambda2];
        let ascent = [-grads.lagrange[0], -grads.lagrange[1]];
        self.state
            .lagrange_opt
            .as_mut()
            .expect("pruning runs carry a multiplier optimizer")
            .step(&mut lam, &ascent)?;
        self.state.lagrange = LagrangeState {
            lambda1: lam[0],
            lambda2: lam[1],
        };

        self.state.sparsity = sparsity;
        self.state.lambda_distill = lambda_distill;
        self.state.log.push(StepLog {
            step,
            epoch: self.state.epoch,
            lambda_distill,
            lambda1: self.state.lagrange.lambda1,
            lambda2: self.state.lagrange.lambda2,
            parts,
        });
        self.state.step += 1;
        Ok(parts)
    }

    /// Runs one full epoch.
    pub fn epoch(&mut self) -> Result<()> {
        let start = self.state.log.len();
        let order = shuffled(&mut self.data_rng, self.train.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            self.step(chunk)?;
        }
        let metrics = EpochMetrics::from_logs(self.state.epoch, &self.state.log[start..]);
        self.state.epochs.push(metrics);
        self.state.epoch += 1;
        self.state.data_rng = self.data_rng.state();
        self.state.mask_rng = self.mask_rng.state();
        Ok(())
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.done() {
            self.epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Evaluation of a pruned model on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target_sparsity: f64,
    pub lambda_distill_init: f64,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub accuracy: f64,
    /// `1 − c(M)/full` from the mask probabilities at the longest test length.
    pub expected_sparsity: f64,
    /// `1 − counted/full` of the binarized plan, summed over the test set.
    pub achieved_sparsity: f64,
    pub retained: Vec<RetainedRow>,
    /// Mean NDCG of the layer-1 scores against the teacher's final layer.
    pub layer1_ndcg: f64,
    /// Fraction of planted signal tokens present in the final layer's input.
    pub signal_retention: f64,
    pub lagrange: LagrangeState,
    pub plan: PrunePlan,
    pub epochs: Vec<EpochMetrics>,
}

pub fn evaluate(
    teacher: &EncoderModel,
    model: &EncoderModel,
    masks: &MaskSet,
    state: &TrainState,
    cfg: &TrainConfig,
    test: &[Example],
) -> Result<RunReport> {
    if test.is_empty() {
        return Err(Error::Data("no test examples".into()));
    }
    let c = &model.config;
    let plan = build_plan(masks);
    let teacher_accuracy = accuracy(teacher, &PrunePlan::noop(c.num_layers, c.max_len), test)?;
    let mut results = Vec::with_capacity(test.len());
    let mut correct = 0;
    let (mut counted, mut full) = (0.0, 0.0);
    let (mut ndcg_sum, mut signals, mut kept_signals) = (0.0, 0usize, 0usize);
    for e in test {
        let n = real_length(&e.tokens);
        let r = infer(model, &plan, &e.tokens)?;
        if argmax(&r.logits) == e.label {
            correct += 1;
        }
        counted += r.flops as f64;
        full += full_flops(c, n);
        let t = teacher_ranking(teacher, &e.tokens)?;
        ndcg_sum += ndcg(&r.layer_scores[0], &t.grades[..n])?;
        let last = r.layer_positions.last().expect("model has layers");
        signals += e.signal_positions.len();
        kept_signals += e.signal_positions.iter().filter(|p| last.contains(p)).count();
        results.push(r);
    }
    let n_max = test.iter().map(|e| real_length(&e.tokens)).max().unwrap_or(1);
    Ok(RunReport {
        target_sparsity: cfg.target_sparsity,
        lambda_distill_init: cfg.lambda_distill_init,
        seed: cfg.seed,
        teacher_accuracy,
        accuracy: correct as f64 / test.len() as f64,
        expected_sparsity: 1.0 - expected_model_flops(masks, c, n_max)? / full_flops(c, n_max),
        achieved_sparsity: 1.0 - counted / full,
        retained: retained_tokens_report(&results),
        layer1_ndcg: ndcg_sum / test.len() as f64,
        signal_retention: if signals == 0 {
            1.0
        } else {
            kept_signals as f64 / signals as f64
        },
        lagrange: state.lagrange,
        plan,
        epochs: state.epochs.clone(),
    })
}

/// Trained artifacts of a pruning run.
pub struct PruneOutcome {
    pub model: EncoderModel,
    pub masks: MaskSet,
    pub state: TrainState,
    pub report: RunReport,
}

/// Full pruning run from the teacher: warmup then fixed-sparsity training,
/// then evaluation on `test`.
pub fn prune_train(
    teacher: &EncoderModel,
    train: &[Example],
    teacher_ranks: &[TeacherRanking],
    test: &[Example],
    cfg: &TrainConfig,
) -> Result<PruneOutcome> {
    let mut run = PruneRun::new(teacher, train, teacher_ranks, cfg)?;
    run.run(|_| Ok(()))?;
    let report = evaluate(teacher, &run.model, &run.masks, &run.state, cfg, test)?;
    Ok(PruneOutcome {
        model: run.model,
        masks: run.masks,
        state: run.state,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_data, NeedleSpec};

    #[test]
    fn lambda_schedule_examples() {
        assert_eq!(lambda_schedule(0, 100, 1e-3), 1e-3);
        assert!((lambda_schedule(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
        assert_eq!(lambda_schedule(100, 100, 1e-3), 0.0);
        assert_eq!(lambda_schedule(400, 100, 1e-3), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(1e-3, 8, 4);
        c.warmup_epochs = 2;
        c.validate_for_pruning().unwrap();
        c.target_sparsity = 1.5;
        assert!(c.validate_for_pruning().is_err());
        c.target_sparsity = 0.5;
        c.warmup_epochs = 4;
        assert!(c.validate_for_pruning().is_err());
        let json = r#"{"learning_rate": 0.001, "batch_size": 4, "total_epochs": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    fn toy() -> (ModelConfig, Vec<Example>) {
        let spec = NeedleSpec {
            train_count: 64,
            test_count: 0,
            seq_len: 10,
            min_len: Some(8),
            vocab_size: 30,
            num_classes: 2,
            signals_per_example: 1,
            distractor_rate: 0.0,
            signal_set_size: 2,
            seed: 57,
        };
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            ffn_inner: 16,
            heads: 2,
            vocab_size: 30,
            max_len: 10,
            num_classes: 2,
        };
        (cfg, gen_data(&spec).unwrap().train)
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (mc, train) = toy();
        let c0 = TrainConfig::new(1e-2, 16, 0);
        let (m0, _) = train_teacher(&train, &mc, &c0).unwrap();
        assert_eq!(m0, init_model(&mc, &c0).unwrap());
        let c = TrainConfig::new(1e-2, 16, 2);
        let (a, _) = train_teacher(&train, &mc, &c).unwrap();
        let (b, _) = train_teacher(&train, &mc, &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, m0);
        assert!(train_teacher(&[], &mc, &c).is_err());
    }

    #[test]
    fn closed_masks_reduce_to_fine_tuning() {
        let (mc, train) = toy();
        let (teacher, _) = train_teacher(&train, &mc, &TrainConfig::new(1e-2, 16, 1)).unwrap();
        let ranks = teacher_rankings(&teacher, &train).unwrap();
        let mut cfg = TrainConfig::new(5e-3, 16, 2);
        cfg.warmup_epochs = 1;
        let (_, dense_log) = fine_tune(teacher.clone(), &train, &cfg).unwrap();
        let mut run = PruneRun::new(&teacher, &train, &ranks, &cfg).unwrap();
        for g in &mut run.masks.gate {
            g.log_alpha = -60.0;
        }
        run.run(|_| Ok(())).unwrap();
        assert_eq!(run.state.log.len(), dense_log.len());
        for (p, d) in run.state.log.iter().zip(&dense_log) {
            assert!((p.parts.total - d.parts.total).abs() < 1e-9);
            let sum = p.parts.downstream + p.parts.reg + p.lambda_distill * p.parts.distill;
            assert!((p.parts.total - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn open_masks_leave_model_gradient_to_the_task() {
        let (mc, train) = toy();
        let model = init_model(&mc, &TrainConfig::new(1e-2, 4, 1)).unwrap();
        let mut masks = MaskSet::new(2, 10);
        for p in masks.gate.iter_mut().chain(masks.rank.iter_mut().flatten()) {
            p.log_alpha = 60.0;
        }
        let ranks = teacher_rankings(&model, &train[..2]).unwrap();
        let noise = MaskNoise::draw(&mut Rng::new(1), 2, 10);
        let examples: Vec<&Example> = train[..2].iter().collect();
        let teacher: Vec<&TeacherRanking> = ranks.iter().collect();
        let mk = |lagrange: LagrangeState, sparsity: f64| ObjectiveInput {
            model: &model,
            masks: &masks,
            lagrange,
            noise: &noise,
            examples: &examples,
            teacher: &teacher,
            lambda_distill: 0.0,
            sparsity,
        };
        let (p0, g0) = objective(&mk(LagrangeState::default(), 0.0), 0).unwrap();
        let (p1, g1) = objective(
            &mk(
                LagrangeState {
                    lambda1: 3.0,
                    lambda2: 2.0,
                },
                0.4,
            ),
            0,
        )
        .unwrap();
        assert_eq!(g0.model, g1.model);
        assert!(p1.reg > 0.0 && p0.reg == 0.0);
    }

    #[test]
    fn snapshot_resume_reproduces_run() {
        let (mc, train) = toy();
        let (teacher, _) = train_teacher(&train, &mc, &TrainConfig::new(1e-2, 16, 1)).unwrap();
        let ranks = teacher_rankings(&teacher, &train).unwrap();
        let mut cfg = TrainConfig::new(5e-3, 16, 3);
        cfg.warmup_epochs = 2;
        cfg.target_sparsity = 0.5;
        cfg.lambda_distill_init = 1e-2;
        let mut full = PruneRun::new(&teacher, &train, &ranks, &cfg).unwrap();
        let mut snap = None;
        full.run(|r| {
            if r.state.epoch == 1 {
                snap = Some(serde_json::to_string(&r.snapshot()).unwrap());
            }
            Ok(())
        })
        .unwrap();
        let restored: Snapshot = serde_json::from_str(&snap.unwrap()).unwrap();
        let mut resumed = PruneRun::resume(restored, &train, &ranks, &cfg).unwrap();
        resumed.run(|_| Ok(())).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.masks, full.masks);
        assert_eq!(resumed.model, full.model);
    }
}
