use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sslab::config::TrainConfig;
use sslab::datapipe::{gen_shapes_dataset, Dataset, Normalize, ShapeClass};
use sslab::evalprobe::{
    extract_features, knn_eval, linear_probe, load_encoder, split_holdout, EvalError, ExtractConfig, FeatureMatrix,
    ProbeConfig, Split,
};
use sslab::model::EncoderConfig;
use sslab::trainer::Trainer;
use sslab_tensor::Checkpoint;
use sslab_tensor::Tensor;

/// `per_class` points around each of `classes` means spaced `gap` apart.
fn gaussians(classes: usize, per_class: usize, dim: usize, gap: f64, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| gap * rng.random_range(-1.0..1.0)).collect()).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        rows.extend(means[c].iter().map(|&m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + z
        }));
        labels.push(c as u8);
    }
    FeatureMatrix::new(Tensor::new([labels.len(), dim], rows).unwrap(), labels).unwrap()
}

fn quick() -> ProbeConfig {
    ProbeConfig { epochs: 150, ..ProbeConfig::default() }
}

#[test]
fn holdout_is_disjoint_and_sized() {
    let s = split_holdout(100, 0.25, 3).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (75, 25));
    s.validate(100).unwrap();
    assert_eq!(s, split_holdout(100, 0.25, 3).unwrap());
    assert_ne!(s, split_holdout(100, 0.25, 4).unwrap());
    assert!(split_holdout(10, 1.0, 0).is_err());
    assert!(split_holdout(10, 0.0, 0).is_err());
    assert!(Split { train: vec![0, 1], test: vec![1] }.validate(3).is_err());
}

#[test]
fn separable_gaussians_are_learned() {
    let f = gaussians(4, 150, 8, 20.0, 1);
    let s = split_holdout(f.len(), 0.3, 0).unwrap();
    let lin = linear_probe(&f, &s, &quick()).unwrap();
    let knn = knn_eval(&f, 5, &s).unwrap();
    assert!(lin.accuracy >= 0.99, "{lin:?}");
    assert!(knn.accuracy >= 0.99, "{knn:?}");
    assert_eq!((lin.n_train, lin.n_test), (420, 180));
}

#[test]
fn permuted_labels_give_chance() {
    let mut f = gaussians(4, 500, 8, 20.0, 2);
    f.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let s = split_holdout(f.len(), 0.5, 1).unwrap();
    for acc in [linear_probe(&f, &s, &quick()).unwrap().accuracy, knn_eval(&f, 20, &s).unwrap().accuracy] {
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }
}

#[test]
fn duplicating_every_sample_keeps_accuracy() {
    let f = gaussians(3, 60, 5, 2.0, 4);
    let s = split_holdout(f.len(), 0.3, 2).unwrap();
    let n = f.len();
    let mut rows = f.rows.data().to_vec();
    rows.extend_from_slice(f.rows.data());
    let mut labels = f.labels.clone();
    labels.extend_from_slice(&f.labels);
    let doubled = FeatureMatrix::new(Tensor::new([2 * n, f.dim()], rows).unwrap(), labels).unwrap();
    let s2 = Split {
        train: s.train.iter().flat_map(|&i| [i, i + n]).collect(),
        test: s.test.iter().flat_map(|&i| [i, i + n]).collect(),
    };
    let a = linear_probe(&f, &s, &quick()).unwrap().accuracy;
    let b = linear_probe(&doubled, &s2, &quick()).unwrap().accuracy;
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn one_nn_on_training_rows_is_exact() {
    let f = gaussians(5, 30, 6, 1.0, 5);
    let n = f.len();
    let mut rows = f.rows.data().to_vec();
    rows.extend_from_slice(f.rows.data());
    let mut labels = f.labels.clone();
    labels.extend_from_slice(&f.labels);
    let twice = FeatureMatrix::new(Tensor::new([2 * n, f.dim()], rows).unwrap(), labels).unwrap();
    let s = Split { train: (0..n).collect(), test: (n..2 * n).collect() };
    assert_eq!(knn_eval(&twice, 1, &s).unwrap().accuracy, 1.0);
}

#[test]
fn evaluators_ignore_feature_scale() {
    let f = gaussians(3, 80, 6, 2.0, 6);
    let scaled = FeatureMatrix::new(f.rows.map(|v| 37.5 * v), f.labels.clone()).unwrap();
    let s = split_holdout(f.len(), 0.3, 3).unwrap();
    assert_eq!(knn_eval(&f, 7, &s).unwrap(), knn_eval(&scaled, 7, &s).unwrap());
    let a = linear_probe(&f, &s, &quick()).unwrap().accuracy;
    let b = linear_probe(&scaled, &s, &quick()).unwrap().accuracy;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn bad_inputs_are_rejected() {
    let f = gaussians(2, 10, 3, 5.0, 7);
    let s = split_holdout(f.len(), 0.5, 0).unwrap();
    assert!(matches!(knn_eval(&f, 11, &s), Err(EvalError::KTooLarge { .. })));
    assert!(knn_eval(&f, 0, &s).is_err());
    let one = FeatureMatrix::new(f.rows.clone(), vec![0; f.len()]).unwrap();
    assert!(linear_probe(&one, &s, &quick()).is_err());
    assert!(FeatureMatrix::new(f.rows.clone(), vec![0; 3]).is_err());
}

#[test]
fn extraction_is_deterministic_and_chunk_free() {
    let ds = gen_shapes_dataset(3, 6, &ShapeClass::first(3).unwrap(), 32).unwrap();
    let enc = EncoderConfig::default();
    let params = enc.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let norm: Normalize = ds.channel_stats();
    let cfg = ExtractConfig { resolution: 24, ..ExtractConfig::default() };
    let a = extract_features(&enc, &params, &ds, &norm, &cfg).unwrap();
    let b = extract_features(&enc, &params, &ds, &norm, &ExtractConfig { chunk: 5, ..cfg }).unwrap();
    assert_eq!(a.rows.shape(), &[18, enc.feature_dim()]);
    assert_eq!(a.labels, ds.labels);
    for (x, y) in a.rows.data().iter().zip(b.rows.data()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn zero_encoder_gives_constant_rows() {
    let ds = gen_shapes_dataset(4, 3, &ShapeClass::first(3).unwrap(), 24).unwrap();
    let enc = EncoderConfig::default();
    let mut params = enc.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    params.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let cfg = ExtractConfig { resolution: 16, ..ExtractConfig::default() };
    let f = extract_features(&enc, &params, &ds, &ds.channel_stats(), &cfg).unwrap();
    assert!(f.rows.data().iter().all(|&v| v == f.rows.data()[0]));
}

#[test]
fn identical_images_share_features() {
    let ds = gen_shapes_dataset(5, 2, &ShapeClass::first(2).unwrap(), 24).unwrap();
    let twin =
        Dataset::new(vec![ds.images[1].clone(), ds.images[0].clone(), ds.images[1].clone()], vec![1, 0, 1], 2).unwrap();
    let enc = EncoderConfig::default();
    let params = enc.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let cfg = ExtractConfig { resolution: 16, ..ExtractConfig::default() };
    let f = extract_features(&enc, &params, &twin, &ds.channel_stats(), &cfg).unwrap();
    assert_eq!(f.rows.row(0), f.rows.row(2));
    assert_ne!(f.rows.row(0), f.rows.row(1));
}

#[test]
fn encoder_loads_from_a_training_checkpoint() {
    let ds = gen_shapes_dataset(6, 4, &ShapeClass::first(3).unwrap(), 24).unwrap();
    let mut cfg = TrainConfig { steps: 1, batch_size: 4, ..TrainConfig::default() };
    cfg.views.gc = 16;
    cfg.views.lc = 8;
    cfg.calibrate.auto_lc = false;
    let tr: Trainer = Trainer::new(cfg, ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    tr.save_checkpoint(&path).unwrap();
    let (enc, params) = load_encoder::<f64>(&path).unwrap();
    assert_eq!(&enc, tr.encoder());
    assert_params_match(&params, &tr.state().student);

    let mut ck = Checkpoint::<f64>::load(&path).unwrap();
    ck.meta.insert("encoder".into(), serde_json::to_value(EncoderConfig { channels: vec![8, 8], ..enc }).unwrap());
    ck.save(&path).unwrap();
    assert!(matches!(load_encoder::<f64>(&path), Err(EvalError::Mismatch(_))));
}

fn assert_params_match(a: &sslab_tensor::Params, b: &sslab_tensor::Params) {
    assert!(a.same_layout(b));
    assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x == y));
}
