use std::fs;

use sslab::config::{ConfigError, Method, Schedule, TrainConfig};
use sslab::datapipe::{gen_shapes_dataset, save_raw_dataset, Dataset, ShapeClass};
use sslab::heads::{BalanceMode, LossBalance};
use sslab::model::{Activation, EncoderConfig};
use sslab::trainer::{train, TrainError, Trainer, METRICS_HEADER};
use sslab::viewgeom::ViewSetSpec;
use sslab_tensor::gradcheck::{finite_difference, max_relative_error};
use sslab_tensor::{Checkpoint, Params, Tensor};

fn data() -> Dataset {
    gen_shapes_dataset(2, 4, &ShapeClass::first(3).unwrap(), 24).unwrap()
}

fn tiny(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig {
        method,
        seed: 5,
        steps: 4,
        batch_size: 4,
        checkpoint_every: 2,
        views: ViewSetSpec { gc: 16, lc: 8, n_g: 2, n_l: 2, ..ViewSetSpec::default() },
        encoder: EncoderConfig {
            channels: vec![4, 6],
            stem: 2,
            activation: Activation::Gelu,
            hidden: 8,
            embed: 6,
            out_dim: 8,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.calibrate.auto_lc = false;
    cfg.optim.lr.warmup_steps = 1;
    cfg.moco.queue_size = 16;
    cfg.swav.n_prototypes = 5;
    cfg
}

fn metrics(cfg: TrainConfig) -> Vec<f64> {
    let mut tr: Trainer = Trainer::new(cfg, data()).unwrap();
    (0..tr.config().steps).map(|_| tr.step().unwrap().total).collect()
}

fn assert_params_eq(a: &Params, b: &Params) {
    assert!(a.same_layout(b));
    for ((na, ta), (_, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 0, ..tiny(Method::Dino) };
    let init = Trainer::<f64>::new(cfg.clone(), data()).unwrap().state().student.clone();
    let art = Trainer::<f64>::new(cfg, data()).unwrap().run(dir.path()).unwrap();
    assert!(art.metrics.is_empty());
    let ck = Checkpoint::<f64>::load(&art.final_checkpoint.unwrap()).unwrap();
    assert_params_eq(&ck.tensors.strip_prefix("student."), &init);
    assert_params_eq(&ck.tensors.strip_prefix("teacher."), &init);
}

#[test]
fn zero_learning_rate_freezes_the_student() {
    for method in [Method::Dino, Method::Swav, Method::Moco] {
        let mut cfg = tiny(method);
        cfg.optim.lr = Schedule::constant(0.0);
        let mut tr: Trainer = Trainer::new(cfg, data()).unwrap();
        let before = tr.state().student.clone();
        let row = tr.step().unwrap();
        assert!(row.total.is_finite() && row.total >= 0.0);
        assert_params_eq(&tr.state().student, &before);
    }
}

#[test]
fn loss_evaluation_is_pure() {
    for method in [Method::Dino, Method::Swav, Method::Moco] {
        let tr: Trainer = Trainer::new(tiny(method), data()).unwrap();
        let batch = tr.batch(3).unwrap();
        let eval = || {
            let sg = tr.loss_graph(&tr.state().student, &batch).unwrap();
            sg.losses.breakdown(&sg.graph).total
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
        assert_eq!(tr.batch(3).unwrap().global, batch.global);
    }
}

#[test]
fn frozen_runs_repeat_identical_losses() {
    let mut cfg = tiny(Method::Dino);
    cfg.optim.lr = Schedule::constant(0.0);
    let a = metrics(cfg.clone());
    let b = metrics(cfg);
    assert_eq!(a, b);
}

#[test]
fn runs_are_deterministic() {
    for method in [Method::Dino, Method::Swav, Method::Moco] {
        let a = metrics(tiny(method));
        assert_eq!(a, metrics(tiny(method)));
        assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn legacy_equals_rebalanced_at_pair_fraction() {
    let mut legacy = tiny(Method::Dino);
    legacy.balance = LossBalance { mode: BalanceMode::Legacy, alpha: 0.4 };
    let mut re = legacy.clone();
    // n_g = 2, n_l = 2: P_gg = 2, P_gl = 4
    re.balance = LossBalance { mode: BalanceMode::Rebalanced, alpha: 2.0 / 6.0 };
    for (a, b) in metrics(legacy).iter().zip(metrics(re)) {
        assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
    }
}

#[test]
fn teacher_moves_only_by_ema() {
    for method in [Method::Dino, Method::Moco] {
        let mut tr: Trainer = Trainer::new(tiny(method), data()).unwrap();
        tr.step().unwrap();
        let t0 = tr.state().teacher.clone().unwrap();
        let row = tr.step().unwrap();
        let m = row.teacher_m;
        let s1 = &tr.state().student;
        for (name, t1) in tr.state().teacher.as_ref().unwrap().iter() {
            let expect: Vec<f64> = t0
                .get(name)
                .unwrap()
                .data()
                .iter()
                .zip(s1.get(name).unwrap().data())
                .map(|(&t, &s)| m * t + (1.0 - m) * s)
                .collect();
            assert_eq!(t1.data(), &expect[..], "{name}");
        }
    }
}

#[test]
fn restore_mid_run_reproduces_the_tail() {
    for method in [Method::Dino, Method::Swav, Method::Moco] {
        let cfg = TrainConfig { steps: 5, ..tiny(method) };
        let full_dir = tempfile::tempdir().unwrap();
        let full = Trainer::<f64>::new(cfg.clone(), data()).unwrap().run(full_dir.path()).unwrap();

        let mut tr: Trainer = Trainer::new(cfg.clone(), data()).unwrap();
        for _ in 0..2 {
            tr.step().unwrap();
        }
        let ck = tempfile::tempdir().unwrap();
        let path = ck.path().join("mid.json");
        tr.save_checkpoint(&path).unwrap();
        let mut restored: Trainer = Trainer::restore(cfg, data(), &path).unwrap();
        let tail: Vec<_> = (2..5).map(|_| restored.step().unwrap()).collect();
        let csv = |rows: &[sslab::trainer::MetricsRow]| rows.iter().map(|r| r.csv()).collect::<Vec<_>>();
        assert_eq!(csv(&full.metrics[2..]), csv(&tail), "{method:?}");
        let fin = Checkpoint::<f64>::load(&full.final_checkpoint.unwrap()).unwrap();
        assert_params_eq(&fin.tensors.strip_prefix("student."), &restored.state().student);
    }
}

#[test]
fn restore_rejects_a_different_config() {
    let cfg = tiny(Method::Dino);
    let tr: Trainer = Trainer::new(cfg.clone(), data()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    tr.save_checkpoint(&path).unwrap();
    let other = TrainConfig { seed: 6, ..cfg.clone() };
    assert!(matches!(Trainer::<f64>::restore(other, data(), &path), Err(TrainError::Mismatch(_))));
    let moved = TrainConfig { out_dir: Some("elsewhere".into()), ..cfg };
    assert!(Trainer::<f64>::restore(moved, data(), &path).is_ok());
}

#[test]
fn run_writes_metrics_timing_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 5, ..tiny(Method::Dino) };
    let art = Trainer::<f64>::new(cfg.clone(), data()).unwrap().run(dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 6);
    let steps: Vec<usize> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    assert_eq!(fs::read_to_string(dir.path().join("timing.csv")).unwrap().lines().count(), 6);
    let names: Vec<String> =
        art.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["ckpt_000000.json", "ckpt_000002.json", "ckpt_000004.json"]);
    let resolved = TrainConfig::load(&dir.path().join("config.toml"), &[]).unwrap();
    assert!(!resolved.calibrate.auto_lc);
    assert_eq!(resolved.views.lc, art.lc);
    assert!(resolved.normalize.is_some());
}

#[test]
fn calibrated_local_resolution_is_used() {
    let mut cfg = tiny(Method::Dino);
    cfg.calibrate.auto_lc = true;
    cfg.calibrate.samples = 20_000;
    let tr: Trainer = Trainer::new(cfg, data()).unwrap();
    let lc = tr.views().lc;
    assert!((4..16).contains(&lc), "{lc}");
    assert_eq!(tr.batch(0).unwrap().local[0].shape()[2], lc);
}

#[test]
fn non_finite_loss_leaves_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Swav);
    cfg.optim.lr = Schedule::constant(1e300);
    let err = Trainer::<f64>::new(cfg, data()).unwrap().run(dir.path()).unwrap_err();
    let TrainError::NonFinite { step, .. } = err else { panic!("{err}") };
    assert!(step >= 1);
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["step"], step);
    assert!(diag["param_norms"].is_object());
}

#[test]
fn train_reads_the_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("shapes.bin");
    save_raw_dataset(&data(), &ds_path).unwrap();
    let cfg =
        TrainConfig { steps: 2, dataset: Some(ds_path), out_dir: Some(dir.path().join("run")), ..tiny(Method::Moco) };
    let art = train(cfg.clone()).unwrap();
    assert_eq!(art.metrics.len(), 2);
    let missing = TrainConfig { dataset: Some(dir.path().join("nope.bin")), ..cfg };
    assert!(matches!(train(missing), Err(TrainError::Data(_))));
}

/// Worst relative error between backward and central differences of the
/// step loss, over every student parameter.
fn composed_error(method: Method) -> f64 {
    let mut cfg = tiny(method);
    cfg.batch_size = 3;
    cfg.views.n_l = 1;
    cfg.encoder = EncoderConfig { channels: vec![3, 4], hidden: 5, embed: 4, out_dim: 6, ..cfg.encoder };
    cfg.moco.queue_size = 8;
    let mut tr: Trainer = Trainer::new(cfg, data()).unwrap();
    if method == Method::Moco {
        // a populated queue makes the negatives matter
        tr.step().unwrap();
    }
    let batch = tr.batch(1).unwrap();
    let student = tr.state().student.clone();
    let mut sg = tr.loss_graph(&student, &batch).unwrap();
    let codes = sg.codes.clone();
    sg.graph.backward(sg.losses.total).unwrap();
    let grads = Params::grads_from(&sg.student, &sg.graph);
    let mut worst = 0.0f64;
    for (name, t) in student.iter() {
        let numeric = finite_difference(t, 1e-6, |probe: &Tensor<f64>| {
            let mut p = student.clone();
            p.insert(name.clone(), probe.clone());
            let sg = tr.loss_graph_with(&p, &batch, Some(&codes).filter(|c| !c.is_empty()).map(|c| &c[..])).unwrap();
            sg.losses.breakdown(&sg.graph).total
        });
        worst = worst.max(max_relative_error(grads.get(name).unwrap(), &numeric, 1e-6));
    }
    worst
}

#[test]
fn composed_step_gradients_match_finite_differences() {
    for method in [Method::Dino, Method::Swav, Method::Moco] {
        let err = composed_error(method);
        assert!(err < 1e-3, "{method:?}: {err}");
    }
}

#[test]
fn config_round_trips_and_overrides() {
    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let o = |k: &str, v: &str| (k.to_string(), v.to_string());
    let c = TrainConfig::from_toml_with(
        "method = \"dino\"\n",
        &[o("optim.lr.base", "0.1"), o("method", "swav"), o("views.n_l", "4"), o("seed", "9")],
    )
    .unwrap();
    assert_eq!((c.method, c.optim.lr.base, c.views.n_l, c.seed), (Method::Swav, 0.1, 4, 9));
    assert_eq!(c.optim.weight_decay, TrainConfig::default().optim.weight_decay);
}

#[test]
fn config_errors_are_classified() {
    assert!(matches!(TrainConfig::from_toml("steps = ="), Err(ConfigError::Syntax(_))));
    assert!(matches!(TrainConfig::from_toml("stepz = 3"), Err(ConfigError::Schema(_))));
    assert!(matches!(TrainConfig::from_toml("steps = \"many\""), Err(ConfigError::Schema(_))));
    assert!(matches!(TrainConfig::from_toml("[balance]\nalpha = 1.5"), Err(ConfigError::Schema(_))));
    let small_queue = "method = \"moco\"\nbatch_size = 64\n[moco]\nqueue_size = 100";
    assert!(matches!(TrainConfig::from_toml(small_queue), Err(ConfigError::Schema(_))));
    let missing = TrainConfig::load(std::path::Path::new("/nonexistent/run.toml"), &[]);
    assert!(matches!(missing, Err(ConfigError::Read { .. })));
}

#[test]
fn config_hash_ignores_paths() {
    let a = TrainConfig::default();
    let b = TrainConfig { dataset: Some("x.bin".into()), out_dir: Some("runs/a".into()), ..a.clone() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), TrainConfig { seed: 1, ..a }.hash());
}
