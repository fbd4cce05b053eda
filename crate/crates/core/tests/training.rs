use relpos::corpus::{SequenceBatch, SyntheticSpec};
use relpos::eval::{cost_report, PairedProbe, ProbeDataset, ProbeKind, ProbeConfig, probe_finetune};
use relpos::model::Mode;
use relpos::objectives::{select_pairs, Objective};
use relpos::trainer::{self, checkpoint, StepOutcome, TrainConfig, TrainError, Trainer};

fn small(objective: Objective) -> TrainConfig {
    let mut c = TrainConfig::desk().with_objective(objective);
    c.synthetic = Some(SyntheticSpec {
        vocab_size: 64,
        num_tokens: 6_000,
        seed: 1,
    });
    c.total_steps = 3;
    c.eval_batches = 1;
    c.deterministic = true;
    c
}

fn batch_for(cfg: &mut TrainConfig) -> SequenceBatch {
    let corpus = cfg.load_corpus().unwrap();
    relpos::corpus::next_batch(&corpus.sequences, cfg.batch_size, cfg.seed, 0).unwrap()
}

#[test]
fn every_objective_trains_one_finite_step() {
    for objective in Objective::ALL {
        let mut cfg = small(objective);
        let batch = batch_for(&mut cfg);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        match t.train_step(&batch).unwrap() {
            StepOutcome::Trained(m) => assert!(m.loss.is_finite() && m.loss > 0.0, "{objective}: {}", m.loss),
            StepOutcome::Skipped { .. } => panic!("{objective} skipped"),
        }
        assert!(t.params().all_finite());
    }
}

#[test]
fn reported_label_count_matches_pair_selection() {
    for objective in [Objective::Pmlm, Objective::Pplm, Objective::PplmSome, Objective::PplmBinary] {
        let mut cfg = small(objective);
        let batch = batch_for(&mut cfg);
        let t = Trainer::<f32>::new(cfg).unwrap();
        let plans = t.plans_for(&batch, 0);
        let expected: usize = plans.iter().map(|p| select_pairs(p, objective).map(|v| v.len()).unwrap_or(0)).sum();
        let (_, _, labels) = t.loss_and_grads(t.params(), &batch, &plans, Mode::Eval).unwrap();
        assert_eq!(labels, expected, "{objective}");
    }
}

#[test]
fn zero_rate_subset_objective_skips_without_updating() {
    let mut cfg = small(Objective::PplmSome);
    cfg.corruption_rate = 0.0;
    let batch = batch_for(&mut cfg);
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let before = t.params().clone();
    assert_eq!(t.train_step(&batch).unwrap(), StepOutcome::Skipped { step: 0 });
    assert_eq!(t.params(), &before);
    assert_eq!(t.optimizer().step, 0);
    assert_eq!(t.step(), 1);
}

#[test]
fn zero_steps_is_rejected_before_training() {
    let mut cfg = small(Objective::Pplm);
    cfg.total_steps = 0;
    assert!(matches!(trainer::run(cfg), Err(TrainError::Config(_))));
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Objective::Mlm);
    cfg.output_dir = Some(dir.path().to_path_buf());
    cfg.checkpoint_every = 2;
    let out = trainer::run(cfg).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,labels_per_batch,ms_per_step"));
    assert_eq!(lines.count(), 3);
    assert!(dir.path().join("ckpt-000002").join("manifest.json").exists());
    assert!(dir.path().join("ckpt-000003").join("tensors.bin").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["objective"], "mlm");
    assert!(summary["mlm_accuracy"].is_number());
    assert!(summary["relpos_accuracy"].is_null());
    assert!(summary["total_flops_estimate"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["adam_beta2"], 0.999);
    assert_eq!(out.summary.updates, 3);
}

#[test]
fn resume_refuses_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Objective::Pplm);
    cfg.output_dir = Some(dir.path().to_path_buf());
    trainer::run(cfg.clone()).unwrap();
    let mut other = cfg;
    other.model.num_layers = 1;
    let err = trainer::run_from(other, Some(&dir.path().join("ckpt-000003"))).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn checkpoint_manifest_lists_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Objective::PplmBinary);
    let batch = batch_for(&mut cfg);
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    t.train_step(&batch).unwrap();
    checkpoint::save(dir.path(), &t.checkpoint()).unwrap();
    let m = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(m.tensors.len(), 3 * t.params().len());
    assert_eq!(m.optimizer_step, 1);
    let total: u64 = m.tensors.iter().map(|e| e.length).sum();
    assert_eq!(total, m.blob_length);
    let back = Trainer::<f32>::from_checkpoint(checkpoint::load(dir.path()).unwrap()).unwrap();
    assert_eq!(back.params(), t.params());
    assert_eq!(back.optimizer(), t.optimizer());
}

#[test]
fn first_token_probe_is_learnable() {
    let mut cfg = small(Objective::Pplm);
    cfg.synthetic = Some(SyntheticSpec {
        vocab_size: 64,
        num_tokens: 40_000,
        seed: 2,
    });
    let corpus = cfg.load_corpus().unwrap();
    let t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let probe = ProbeDataset::generate(ProbeKind::FirstToken, &corpus.sequences, 32, 800, 200, 4).unwrap();
    let pc = ProbeConfig::for_dataset(&probe, 4);
    let rep = probe_finetune(t.params(), &cfg.model, &probe, &pc).unwrap();
    assert!(rep.test_accuracy > 0.95, "{rep:?}");
}

#[test]
fn paired_probe_reports_both_arms() {
    let mut cfg = small(Objective::Pplm);
    cfg.synthetic = Some(SyntheticSpec {
        vocab_size: 64,
        num_tokens: 20_000,
        seed: 2,
    });
    let corpus = cfg.load_corpus().unwrap();
    let t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let probe = PairedProbe {
        seeds: vec![0, 1],
        epochs: 1,
        n_train: 64,
        n_test: 30,
        ..PairedProbe::desk(ProbeKind::SpanOrder)
    };
    let rep = probe.compare(t.params(), &cfg.model, &corpus.sequences).unwrap();
    assert_eq!(rep.pretrained.len(), 2);
    assert_eq!(rep.baseline.len(), 2);
    let d = rep.mean_pretrained - rep.mean_baseline.unwrap();
    assert_eq!(rep.mean_difference.unwrap(), d);
}

#[test]
fn cost_report_orders_heads_at_paper_scale() {
    let cfg = TrainConfig::paper();
    let r = cost_report(&cfg.model, 128, 64, cfg.readout);
    let head = |o: Objective| r.rows.iter().find(|x| x.per_sequence.objective == o).unwrap().head_flops_per_batch;
    assert!(head(Objective::Mlm) > head(Objective::Pplm));
    assert!(head(Objective::Pplm) >= head(Objective::Pmlm));
    assert!(r.rows.iter().all(|x| x.per_sequence.body_flops == r.rows[0].per_sequence.body_flops));
}
