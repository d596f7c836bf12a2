use rada::checkpoint::Checkpoint;
use rada::data::TrainSample;
use rada::train::{TrainConfig, Trainer};
use rada::{Error, Tensor};

fn small() -> TrainConfig {
    let mut c = TrainConfig::smoke();
    c.model.dim = 16;
    c.data.pairs = 16;
    c.warmup_steps = 0;
    c.batch_size = 1;
    c
}

fn max_diff(a: &rada::ParamStore, b: &rada::ParamStore) -> f64 {
    a.iter().map(|(n, t)| t.max_abs_diff(b.get(n).unwrap())).fold(0.0, f64::max)
}

#[test]
fn accumulated_batches_equal_one_concatenated_batch() {
    // The MMD term couples the pairs of a batch, so it is switched off here.
    let mut cfg = small();
    cfg.lambda_mmd = 0.0;
    let corpus = cfg.data.load().unwrap();

    let mut accumulated = Trainer::new(TrainConfig { accumulation_batches: 16, ..cfg.clone() }, corpus.clone()).unwrap();
    let mut grad_sum: Option<std::collections::BTreeMap<String, Tensor>> = None;
    for (i, s) in corpus.iter().enumerate() {
        let bg = accumulated.batch_gradients(&[s]).unwrap();
        match grad_sum.as_mut() {
            None => grad_sum = Some(bg.grads),
            Some(acc) => acc.iter_mut().for_each(|(n, g)| g.add_assign(&bg.grads[n])),
        }
        let out = accumulated.train_step(&[s]).unwrap();
        assert_eq!(out.update.is_some(), i == 15);
    }

    let mut joint = Trainer::new(TrainConfig { accumulation_batches: 1, batch_size: 16, ..cfg }, corpus.clone()).unwrap();
    let refs: Vec<&TrainSample> = corpus.iter().collect();
    let full = joint.batch_gradients(&refs).unwrap();
    let grad_gap = grad_sum.unwrap().iter().map(|(n, g)| g.scale(1.0 / 16.0).max_abs_diff(&full.grads[n])).fold(0.0, f64::max);
    assert!(grad_gap < 1e-6, "gradient gap {grad_gap}");
    joint.train_step(&refs).unwrap();
    assert_eq!((accumulated.step, joint.step), (1, 1));
    let gap = max_diff(&accumulated.params, &joint.params);
    assert!(gap < 1e-6, "parameter gap {gap}");
}

#[test]
fn thirty_two_batches_with_accumulation_sixteen_make_two_updates() {
    let mut cfg = small();
    cfg.accumulation_batches = 16;
    cfg.data.pairs = 4;
    let corpus = cfg.data.load().unwrap();
    let mut t = Trainer::new(cfg, corpus).unwrap();
    let mut updates = 0;
    for k in 0..32 {
        let idx = t.batch_indices(k);
        let batch: Vec<TrainSample> = idx.iter().map(|&i| t.corpus()[i].clone()).collect();
        updates += t.train_step(&batch.iter().collect::<Vec<_>>()).unwrap().update.is_some() as usize;
    }
    assert_eq!((updates, t.step, t.batches), (2, 2, 32));
}

#[test]
fn same_seed_gives_identical_runs() {
    let mut cfg = small();
    cfg.data.pairs = 4;
    cfg.accumulation_batches = 2;
    let corpus = cfg.data.load().unwrap();
    let run = || {
        let mut t = Trainer::new(cfg.clone(), corpus.clone()).unwrap();
        let mut log = Vec::new();
        let summaries = t.run_until(4, &mut log, None).unwrap();
        (String::from_utf8(log).unwrap(), summaries, t.params)
    };
    let (log_a, sum_a, params_a) = run();
    let (log_b, sum_b, params_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(sum_a, sum_b);
    assert_eq!(params_a, params_b);
    assert_eq!(log_a.lines().filter(|l| l.contains(" name=total ")).count(), 4);
    assert!(log_a.lines().all(|l| l.starts_with("step=")));
}

#[test]
fn periodic_checkpoints_resume_to_the_same_state() {
    let mut cfg = small();
    cfg.data.pairs = 4;
    cfg.checkpoint_every = 2;
    let corpus = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(cfg.clone(), corpus.clone()).unwrap();
    straight.run_until(4, &mut std::io::sink(), Some(dir.path())).unwrap();
    for step in [2, 4] {
        assert!(dir.path().join(format!("step_{step:06}.ckpt")).exists());
    }
    let ckpt = Checkpoint::load(&dir.path().join("step_000002.ckpt")).unwrap();
    assert_eq!(ckpt.step, 2);
    let mut resumed = Trainer::resume(cfg, corpus, ckpt, false).unwrap();
    resumed.run_until(4, &mut std::io::sink(), None).unwrap();
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
}

#[test]
fn resume_checks_the_config_fingerprint() {
    let mut cfg = small();
    cfg.data.pairs = 2;
    let corpus = cfg.data.load().unwrap();
    let t = Trainer::new(cfg.clone(), corpus.clone()).unwrap();
    let ckpt = Checkpoint::decode(&t.checkpoint().encode()).unwrap();
    let changed = TrainConfig { t_des: 0.2, ..cfg.clone() };
    assert!(matches!(Trainer::resume(changed.clone(), corpus.clone(), ckpt.clone(), false), Err(Error::FingerprintMismatch { .. })));
    assert!(Trainer::resume(changed, corpus.clone(), ckpt.clone(), true).is_ok());
    let longer = TrainConfig { max_steps: 10 * cfg.max_steps, ..cfg };
    assert!(Trainer::resume(longer, corpus, ckpt, false).is_ok());
}
