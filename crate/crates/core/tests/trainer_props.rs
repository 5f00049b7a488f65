//! Training-loop contracts: determinism, resume equivalence, checkpoint
//! failure modes and fixed-corpus training.

use std::fs;

use subspace_flow::archive::Archive;
use subspace_flow::backbone::BackboneConfig;
use subspace_flow::commands;
use subspace_flow::config::RunConfig;
use subspace_flow::trainer::{Trainer, METRICS_HEADER};

fn tiny(steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        backbone: BackboneConfig::tiny(),
        ..Default::default()
    };
    cfg.train.total_steps = steps;
    cfg.train.batch_size = 3;
    cfg.train.warmup_steps = 2;
    cfg.train.checkpoint_every = 0;
    cfg.aux.pretrain_steps = 5;
    cfg.world.t_v_min = 3;
    cfg.world.t_v_max = 6;
    cfg
}

fn trace(t: &mut Trainer, steps: usize) -> Vec<[f64; 4]> {
    (0..steps)
        .map(|_| {
            let l = t.train_step().unwrap();
            [l.loss.total, l.loss.fm, l.loss.slm, l.loss.sem]
        })
        .collect()
}

#[test]
fn same_seed_same_trace() {
    let cfg = tiny(4);
    let a = trace(&mut Trainer::new(&cfg).unwrap(), 4);
    let b = trace(&mut Trainer::new(&cfg).unwrap(), 4);
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(a, trace(&mut Trainer::new(&other).unwrap(), 4));
}

#[test]
fn resumed_run_reproduces_unbroken_trace() {
    let cfg = tiny(8);
    let full = trace(&mut Trainer::new(&cfg).unwrap(), 8);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(&cfg).unwrap();
    let mut resumed = trace(&mut first, 3);
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let mut second = Trainer::load_checkpoint(&path).unwrap();
    assert_eq!(second.step, 3);
    resumed.extend(trace(&mut second, 5));

    for (i, (a, b)) in full.iter().zip(&resumed).enumerate() {
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() <= 1e-12, "step {i} term {k}: {} vs {}", a[k], b[k]);
        }
    }
}

#[test]
fn run_writes_metrics_and_resumes_appending() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(4);
    cfg.train.checkpoint_every = 2;
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(Some(dir.path()), |_| {}).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,"));

    let mut longer = cfg.clone();
    longer.train.total_steps = 6;
    let mut t = Trainer::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    t.cfg.train.total_steps = longer.train.total_steps;
    t.run(Some(dir.path()), |_| {}).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn corrupted_payload_is_rejected_without_partial_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let t = Trainer::new(&tiny(2)).unwrap();
    t.save_checkpoint(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = Trainer::load_checkpoint(&path).err().expect("truncated archive loads");
    assert!(err.to_string().contains("payload"), "{err}");

    // a tensor of the wrong size is named and nothing is returned
    let mut a = Archive::from_bytes(&bytes).unwrap();
    let slot = a.tensors.iter_mut().find(|(n, _)| n.starts_with("opt.v.")).unwrap();
    let name = slot.0.clone();
    slot.1 = subspace_flow::Tensor::zeros(&[1]);
    let err = Trainer::from_checkpoint(&a).err().unwrap();
    assert!(err.to_string().contains(&name), "{err}");
}

#[test]
fn failed_step_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(2);
    cfg.train.checkpoint_every = 1;
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(Some(dir.path()), |_| {}).unwrap();
    let ckpt = dir.path().join("checkpoint.bin");
    let before = fs::read(&ckpt).unwrap();

    t.cfg.train.total_steps = 4;
    t.store.tensors_mut()[0].data_mut()[0] = f64::NAN;
    assert!(t.run(Some(dir.path()), |_| {}).is_err());
    assert!(fs::read(&ckpt).unwrap() == before);
    assert_eq!(Trainer::load_checkpoint(&ckpt).unwrap().step, 2);
}

#[test]
fn trains_from_an_exported_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus.bin");
    let mut cfg = tiny(3);
    commands::export_dataset(&cfg, 5, 9, &data).unwrap();
    cfg.train.dataset = Some(data.to_string_lossy().into_owned());
    let a = trace(&mut Trainer::new(&cfg).unwrap(), 3);
    let b = trace(&mut Trainer::new(&cfg).unwrap(), 3);
    assert_eq!(a, b);
    assert!(a.iter().all(|l| l[0].is_finite()));

    // a corpus for a different latent size is refused up front
    let mut wrong = cfg.clone();
    wrong.backbone.latent_dim = 4;
    let err = Trainer::new(&wrong).err().unwrap().to_string();
    assert!(err.contains("train.dataset"), "{err}");
}

#[test]
fn zero_lr_step_leaves_parameters_unchanged() {
    let mut cfg = tiny(2);
    cfg.train.base_lr = 0.0;
    let mut t = Trainer::new(&cfg).unwrap();
    let before = t.store.clone();
    t.train_step().unwrap();
    assert_eq!(t.store, before);
}
