use tokprune::autodiff::Tape;
use tokprune::data::{gen_data, Example, NeedleSpec};
use tokprune::distill::{distill_loss, ndcg, real_length, TeacherRanking};
use tokprune::inference::{build_plan, infer};
use tokprune::model::{EncoderModel, ModelConfig};
use tokprune::optim::{AdamW, AdamWConfig};
use tokprune::rng::Rng;
use tokprune::trainer::{
    fine_tune, flatten_params, prune_train, set_flat_params, soft_forward, teacher_rankings, train_teacher, PruneRun,
    Snapshot, TrainConfig,
};

fn toy(layers: usize) -> (ModelConfig, Vec<Example>) {
    let spec = NeedleSpec {
        train_count: 96,
        test_count: 0,
        seq_len: 12,
        min_len: Some(9),
        vocab_size: 40,
        num_classes: 2,
        signals_per_example: 2,
        distractor_rate: 0.0,
        signal_set_size: 3,
        seed: 57,
    };
    let cfg = ModelConfig {
        num_layers: layers,
        hidden: 8,
        ffn_inner: 16,
        heads: 2,
        vocab_size: 40,
        max_len: 12,
        num_classes: 2,
    };
    (cfg, gen_data(&spec).unwrap().train)
}

fn layer1_ndcg(model: &EncoderModel, examples: &[Example], ranks: &[TeacherRanking]) -> f64 {
    let plan = tokprune::inference::PrunePlan::noop(model.config.num_layers, model.config.max_len);
    let mut total = 0.0;
    for (e, r) in examples.iter().zip(ranks) {
        let n = real_length(&e.tokens);
        let out = infer(model, &plan, &e.tokens).unwrap();
        total += ndcg(&out.layer_scores[0], &r.grades[..n]).unwrap();
    }
    total / examples.len() as f64
}

#[test]
fn distillation_alone_raises_layer1_ndcg() {
    let (cfg, train) = toy(2);
    let (teacher, _) = train_teacher(&train, &cfg, &TrainConfig::new(1e-2, 16, 3)).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut student = EncoderModel::init(cfg.clone(), 0.3, &mut Rng::new(3)).unwrap();
    let before = layer1_ndcg(&student, &train, &ranks);
    let mut opt = AdamW::new(AdamWConfig::new(3e-3, 0.0), student.params.num_scalars());
    let mut flat = flatten_params(&student.params);
    for step in 0..200 {
        let e = step % train.len();
        let n = real_length(&train[e].tokens);
        let mut tape = Tape::new();
        let params = student.params.record(&mut tape, true);
        let out = soft_forward(&mut tape, &cfg, &params, &train[e].tokens[..n], None, 1).unwrap();
        let loss = distill_loss(&mut tape, &ranks[e], &out.scores).unwrap();
        tape.backward(loss).unwrap();
        let mut grad = Vec::with_capacity(flat.len());
        for v in params.iter() {
            match tape.grad(*v) {
                Some(g) => grad.extend_from_slice(g),
                None => grad.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
            }
        }
        opt.step(&mut flat, &grad).unwrap();
        set_flat_params(&mut student.params, &flat).unwrap();
    }
    let after = layer1_ndcg(&student, &train, &ranks);
    assert!(after > before, "layer-1 NDCG {before} -> {after}");
}

#[test]
fn closed_gates_without_distillation_continue_fine_tuning() {
    let (cfg, train) = toy(2);
    let base = TrainConfig::new(1e-2, 16, 1);
    let (teacher, _) = train_teacher(&train, &cfg, &base).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut cfg_run = TrainConfig::new(5e-3, 16, 3);
    cfg_run.warmup_epochs = 1;
    let (tuned, log) = fine_tune(teacher.clone(), &train, &cfg_run).unwrap();
    let mut run = PruneRun::new(&teacher, &train, &ranks, &cfg_run).unwrap();
    for g in &mut run.masks.gate {
        g.log_alpha = -50.0;
    }
    run.run(|_| Ok(())).unwrap();
    assert_eq!(run.state.log.len(), log.len());
    for (a, b) in run.state.log.iter().zip(&log) {
        assert!((a.parts.downstream - b.parts.downstream).abs() < 1e-9);
        assert_eq!(a.parts.distill, 0.0);
    }
    let pa = flatten_params(&run.model.params);
    let pb = flatten_params(&tuned.params);
    let worst = pa.iter().zip(&pb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "parameters drifted by {worst}");
}

#[test]
fn resume_through_json_matches_uninterrupted_run() {
    let (cfg, train) = toy(3);
    let (teacher, _) = train_teacher(&train, &cfg, &TrainConfig::new(1e-2, 16, 1)).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut c = TrainConfig::new(5e-3, 32, 4);
    c.warmup_epochs = 2;
    c.target_sparsity = 0.4;
    c.lambda_distill_init = 1e-2;
    let mut full = PruneRun::new(&teacher, &train, &ranks, &c).unwrap();
    full.run(|_| Ok(())).unwrap();
    for stop in [1, 2, 3] {
        let mut first = PruneRun::new(&teacher, &train, &ranks, &c).unwrap();
        while first.state.epoch < stop {
            first.epoch().unwrap();
        }
        let text = serde_json::to_string(&first.snapshot()).unwrap();
        let snap: Snapshot = serde_json::from_str(&text).unwrap();
        let mut second = PruneRun::resume(snap, &train, &ranks, &c).unwrap();
        second.run(|_| Ok(())).unwrap();
        assert_eq!(second.state, full.state, "resumed after epoch {stop}");
        assert_eq!(second.masks, full.masks);
        assert_eq!(second.model, full.model);
    }
}

#[test]
fn zero_target_keeps_every_token() {
    let (cfg, train) = toy(2);
    let (teacher, _) = train_teacher(&train, &cfg, &TrainConfig::new(1e-2, 16, 30)).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut c = TrainConfig::new(5e-3, 16, 4);
    c.warmup_epochs = 2;
    let out = prune_train(&teacher, &train, &ranks, &train, &c).unwrap();
    let plan = build_plan(&out.masks);
    for e in &train {
        let n = real_length(&e.tokens);
        assert!(plan.token_counts(n).iter().all(|&t| t == n));
    }
    let r = &out.report;
    assert!(r.teacher_accuracy > 0.9);
    assert!(
        (r.accuracy - r.teacher_accuracy).abs() <= 0.05,
        "{} vs {}",
        r.accuracy,
        r.teacher_accuracy
    );
    assert!(out.report.expected_sparsity.abs() < 0.05);
}

#[test]
fn pruned_run_reports_are_consistent() {
    let (cfg, train) = toy(3);
    let (teacher, _) = train_teacher(&train, &cfg, &TrainConfig::new(1e-2, 16, 2)).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut c = TrainConfig::new(5e-3, 16, 4);
    c.warmup_epochs = 2;
    c.target_sparsity = 0.5;
    c.lambda_distill_init = 1e-3;
    let out = prune_train(&teacher, &train, &ranks, &train, &c).unwrap();
    let r = &out.report;
    assert_eq!(r.epochs.len(), 4);
    assert_eq!(r.retained.len(), 3);
    assert!(r.retained.windows(2).all(|w| w[1].mean_input <= w[0].mean_input));
    assert!((0.0..=1.0).contains(&r.signal_retention));
    assert!((0.0..=1.0).contains(&r.layer1_ndcg));
    // The last epoch trains at the full target.
    assert_eq!(r.epochs[3].target_frac, 0.5);
    assert!(out.state.log.iter().all(|l| {
        let sum = l.parts.downstream + l.parts.reg + l.lambda_distill * l.parts.distill;
        (l.parts.total - sum).abs() < 1e-12
    }));
    assert!(out
        .state
        .log
        .iter()
        .skip_while(|l| l.lambda_distill > 0.0)
        .all(|l| l.parts.distill == 0.0));
}

#[test]
fn invalid_runs_are_rejected() {
    let (cfg, train) = toy(2);
    let (teacher, _) = train_teacher(&train, &cfg, &TrainConfig::new(1e-2, 16, 1)).unwrap();
    let ranks = teacher_rankings(&teacher, &train).unwrap();
    let mut c = TrainConfig::new(5e-3, 16, 2);
    c.warmup_epochs = 1;
    c.target_sparsity = 1.0;
    assert!(PruneRun::new(&teacher, &train, &ranks, &c).is_err());
    c.target_sparsity = 0.5;
    assert!(PruneRun::new(&teacher, &train, &ranks[..3], &c).is_err());
    let mut bad = train.clone();
    bad[0].tokens[1] = 99;
    assert!(fine_tune(teacher.clone(), &bad, &c).is_err());
}
