use std::fs;

use copulad::dependency::{Base, DepVars, Family, MarginalMode};
use copulad::diffcore::{gradcheck, Tape, Tensor};
use copulad::encoder::{encode_on_tape, EncoderConfig, Mode};
use copulad::objective::contrastive_loss_on_tape;
use copulad::pipeline::*;
use copulad::synthdata::{case_preset, events_from_labels, generate_latent_series, LabeledSeries};
use copulad::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn series(dim: usize, labels: Vec<u8>, seed: u64) -> LabeledSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..labels.len() * dim).map(|_| rng.sample(StandardNormal)).collect();
    LabeledSeries {
        dim,
        values,
        events: events_from_labels(&labels),
        labels,
    }
}

fn small_config(dim: usize) -> TrainConfig {
    TrainConfig {
        window: 8,
        stride: 4,
        batch_size: 16,
        epochs: 2,
        encoder: EncoderConfig {
            input_dim: dim,
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            dim_feedforward: 16,
            latent_dim: 3,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn labeled_series(t: usize, dim: usize, seed: u64) -> LabeledSeries {
    let mut labels = vec![0u8; t];
    for k in (t / 10..t).step_by(t / 5) {
        labels[k..(k + t / 25).min(t)].iter_mut().for_each(|y| *y = 1);
    }
    series(dim, labels, seed)
}

// ---- csv ingestion

#[test]
fn csv_with_labels_infers_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    fs::write(&p, "timestamp,x,y,label\n0,1.5,2,0\n1,-3,4e-1,1\n2,0,0,1\n").unwrap();
    let s = load_csv(&p, true).unwrap();
    assert_eq!((s.len(), s.dim), (3, 2));
    assert_eq!(s.values, vec![1.5, 2.0, -3.0, 0.4, 0.0, 0.0]);
    assert_eq!(s.labels, vec![0, 1, 1]);
    assert_eq!(s.events, vec![(1, 2)]);
}

#[test]
fn csv_without_labels_defaults_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    fs::write(&p, "timestamp,a,b,c\n0,1,2,3\n1,4,5,6\n").unwrap();
    let s = load_csv(&p, false).unwrap();
    assert_eq!((s.len(), s.dim), (2, 3));
    assert_eq!(s.labels, vec![0, 0]);
    assert!(matches!(load_csv(&p, true), Err(Error::Parse { .. })));
}

#[test]
fn csv_errors_name_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    fs::write(&p, "timestamp,a,b\n0,1,2\n1,abc,3\n").unwrap();
    match load_csv(&p, false) {
        Err(Error::Parse { row, column, message, .. }) => {
            assert_eq!((row, column), (3, 2));
            assert!(message.contains("abc"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    fs::write(&p, "timestamp,a,b\n0,1,2\n1,3\n").unwrap();
    assert!(matches!(load_csv(&p, false), Err(Error::Parse { row: 3, .. })));
    fs::write(&p, "timestamp,a,b\n0,1,NaN\n").unwrap();
    assert!(matches!(load_csv(&p, false), Err(Error::Parse { row: 2, column: 3, .. })));
    fs::write(&p, "timestamp,a,label\n0,1,2\n").unwrap();
    assert!(matches!(load_csv(&p, true), Err(Error::Parse { row: 2, column: 3, .. })));
}

#[test]
fn csv_and_events_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = labeled_series(200, 3, 5);
    let p = dir.path().join("s.csv");
    write_csv(&p, &s).unwrap();
    let back = load_csv(&p, true).unwrap();
    assert_eq!(back, s);
    let e = dir.path().join("s.events");
    write_events(&e, &s.events).unwrap();
    assert_eq!(read_events(&e).unwrap(), s.events);
    fs::write(&e, "3,1\n").unwrap();
    assert!(read_events(&e).is_err());
}

// ---- frames

#[test]
fn frame_examples() {
    let s = series(1, vec![0, 0, 1, 0], 0);
    assert_eq!(make_frames(&s, 2, 1).unwrap().labels, vec![0, 1, 1]);
    let z = series(2, vec![0; 9], 0);
    assert!(make_frames(&z, 3, 2).unwrap().labels.iter().all(|&y| y == 0));
    let f = make_frames(&z, 9, 4).unwrap();
    assert_eq!(f.len(), 1);
    assert_eq!(f.frame(0), z.values.as_slice());
    assert!(matches!(make_frames(&z, 10, 1), Err(Error::WindowTooLong { window: 10, length: 9 })));
    assert!(make_frames(&z, 3, 0).is_err());
}

#[test]
fn or_rule_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let t = rng.random_range(1..80);
        let p: f64 = rng.random_range(0.0..0.3);
        let y: Vec<u8> = (0..t).map(|_| u8::from(rng.random::<f64>() < p)).collect();
        let l = rng.random_range(1..=t);
        let stride = rng.random_range(1..=t);
        let s = series(2, y.clone(), 0);
        let f = make_frames(&s, l, stride).unwrap();
        let mut expected = Vec::new();
        let mut start = 0;
        while start + l <= t {
            expected.push(u8::from(y[start..start + l].contains(&1)));
            start += stride;
        }
        assert_eq!(f.labels, expected, "t={t} l={l} stride={stride}");
        assert_eq!(f.len(), (t - l) / stride + 1);
        for i in 0..f.len() {
            assert_eq!(f.frame(i), &s.values[i * stride * 2..(i * stride + l) * 2]);
        }
    }
}

#[test]
fn scaler_standardizes_columns() {
    let s = labeled_series(500, 3, 2);
    let mut shifted = s.clone();
    shifted.values.iter_mut().enumerate().for_each(|(k, v)| *v = *v * (k % 3 + 1) as f64 + 10.0);
    let sc = InputScaler::fit(&shifted);
    let n = sc.apply(&shifted).unwrap();
    let fit = InputScaler::fit(&n);
    for j in 0..3 {
        assert!(fit.mean[j].abs() < 1e-12 && (fit.std[j] - 1.0).abs() < 1e-12);
    }
    assert!(sc.apply(&series(2, vec![0; 4], 0)).is_err());
}

// ---- optimizer

#[test]
fn adam_first_step_and_clipping() {
    let mut adam = Adam::new(0.1, AdamConfig::default(), &[2]);
    let mut p = vec![1.0, -2.0];
    let g = vec![vec![4.0, -0.5]];
    adam.update(&mut [p.as_mut_slice()], &g);
    // bias-corrected moments make the first step lr·g/(|g| + ε)
    assert!((p[0] - (1.0 - 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    assert!((p[1] - (-2.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);

    let mut gs = vec![vec![3.0], vec![4.0]];
    assert_eq!(clip_global_norm(&mut gs, 1.0), 5.0);
    assert!((gs[0][0] - 0.6).abs() < 1e-15 && (gs[1][0] - 0.8).abs() < 1e-15);
    let mut small = vec![vec![0.1]];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut adam = Adam::new(0.05, AdamConfig::default(), &[3]);
    let target = [1.0, -2.0, 0.5];
    let mut p = vec![0.0; 3];
    for _ in 0..2000 {
        let g = vec![p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect()];
        adam.update(&mut [p.as_mut_slice()], &g);
    }
    for (a, b) in p.iter().zip(&target) {
        assert!((a - b).abs() < 1e-3);
    }
}

// ---- train_batch

fn prepared(cfg: &TrainConfig, s: &LabeledSeries) -> (Checkpoint, FrameSet) {
    let scaler = InputScaler::fit(s);
    let frames = make_frames(&scaler.apply(s).unwrap(), cfg.window, cfg.stride).unwrap();
    let mut ck = Checkpoint::init(cfg, scaler).unwrap();
    let z = ck.latents(&frames).unwrap();
    ck.dependency.fit_marginals(&z).unwrap();
    (ck, frames)
}

#[test]
fn train_batch_normals_only_and_empty() {
    let cfg = small_config(2);
    let s = series(2, vec![0; 120], 3);
    let (mut ck, frames) = prepared(&cfg, &s);
    let mut st = TrainState::new(&ck);
    let idx: Vec<usize> = (0..8).collect();
    let out = train_batch(&mut ck, &mut st, &frames.gather(&idx), &[0; 8]).unwrap();
    assert_eq!(out.anomaly_term, 0.0);
    assert!(out.hinge_active.is_empty());
    assert_eq!(out.total, out.normal_term);
    assert!(matches!(train_batch(&mut ck, &mut st, &[], &[]), Err(Error::EmptyBatch)));
}

#[test]
fn train_batch_is_deterministic() {
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            dropout: 0.1,
            ..small_config(2).encoder
        },
        ..small_config(2)
    };
    let s = labeled_series(200, 2, 4);
    let (ck, frames) = prepared(&cfg, &s);
    let idx: Vec<usize> = (0..12).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| frames.labels[i]).collect();
    let batch = frames.gather(&idx);
    let run = || {
        let mut c = ck.clone();
        let mut st = TrainState::new(&c);
        let out = train_batch(&mut c, &mut st, &batch, &labels).unwrap();
        (c, out)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert_ne!(a.encoder, ck.encoder);
    assert_ne!(a.dependency.phi, ck.dependency.phi);
}

#[test]
fn overfits_a_fixed_batch() {
    let cfg = small_config(3);
    let s = labeled_series(400, 3, 6);
    let (mut ck, frames) = prepared(&cfg, &s);
    let idx: Vec<usize> = (0..32).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| frames.labels[i]).collect();
    assert!(labels.contains(&1) && labels.contains(&0));
    let batch = frames.gather(&idx);
    let mut st = TrainState::new(&ck);
    let first = train_batch(&mut ck, &mut st, &batch, &labels).unwrap().total;
    let mut last = first;
    for _ in 0..50 {
        last = train_batch(&mut ck, &mut st, &batch, &labels).unwrap().total;
    }
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn baseline_scorer_leaves_dependency_untouched() {
    let cfg = TrainConfig {
        scorer: Scorer::Marginal,
        ..small_config(2)
    };
    let s = labeled_series(200, 2, 8);
    let (mut ck, frames) = prepared(&cfg, &s);
    let phi = ck.dependency.phi.clone();
    let idx: Vec<usize> = (0..16).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| frames.labels[i]).collect();
    let mut st = TrainState::new(&ck);
    train_batch(&mut ck, &mut st, &frames.gather(&idx), &labels).unwrap();
    assert_eq!(ck.dependency.phi, phi);
}

// ---- train

#[test]
fn zero_epochs_returns_initial_checkpoint() {
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config(2)
    };
    let s = labeled_series(300, 2, 1);
    let (ck, hist) = fit(&s, None, &cfg).unwrap();
    assert!(hist.is_empty());
    let cut = 300 - 60;
    let scaler = InputScaler::fit(&s.slice(0, cut));
    assert_eq!(ck, Checkpoint::init(&cfg, scaler).unwrap());
}

#[test]
fn training_is_reproducible() {
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            dropout: 0.1,
            ..small_config(2).encoder
        },
        ..small_config(2)
    };
    let s = labeled_series(400, 2, 11);
    let (a, ha) = fit(&s, None, &cfg).unwrap();
    let (b, hb) = fit(&s, None, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(checkpoint_to_string(&a).unwrap(), checkpoint_to_string(&b).unwrap());
    assert_eq!(ha.len(), 2);
    assert!(ha.iter().all(|r| r.val_f1.is_some() && r.normal_logc.is_some() && r.anomaly_logc.is_some()));
}

#[test]
fn injection_supplies_anomalies_when_training_rows_are_clean() {
    let cfg = small_config(2);
    let mut labels = vec![0u8; 500];
    labels[430..445].iter_mut().for_each(|y| *y = 1);
    let s = series(2, labels, 12);
    let (train_part, val_part) = (s.slice(0, 400), s.slice(400, 500));
    let (_, hist) = fit(&train_part, Some(&val_part), &cfg).unwrap();
    assert!(hist.iter().all(|r| r.anomaly_logc.is_some()));
    let pool = anomaly_pool(&val_part, 0.125, 0).unwrap();
    assert_eq!(pool, vec![val_part.values[30 * 2..45 * 2].to_vec()]);
}

#[test]
fn non_finite_input_is_reported_as_divergence() {
    let cfg = small_config(2);
    let mut s = labeled_series(200, 2, 13);
    let scaler = InputScaler::fit(&s);
    s.values[7] = f64::NAN;
    let frames = make_frames(&s, cfg.window, cfg.stride).unwrap();
    assert!(matches!(
        train(&frames, None, &[], &cfg, scaler),
        Err(Error::Divergence { epoch: 0, batch: 0 })
    ));
}

#[test]
fn likelihood_only_training_raises_normal_density() {
    let mut sc = case_preset(1).unwrap();
    sc.length = 4000;
    let s = generate_latent_series(&sc).unwrap();
    let mut cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    cfg.encoder.input_dim = s.dim;
    cfg.loss.alpha = 0.0;
    cfg.dependency.family = Family::Copula;
    let (_, hist) = fit(&s, None, &cfg).unwrap();
    let curve: Vec<f64> = hist.iter().map(|r| r.normal_logc.unwrap()).collect();
    assert!(curve.windows(2).all(|w| w[1] > w[0]), "{curve:?}");
}

// ---- checkpoints

fn trained(family: Family, base: Base, mode: MarginalMode) -> (Checkpoint, FrameSet) {
    let mut cfg = small_config(2);
    cfg.dependency.family = family;
    cfg.dependency.base = base;
    cfg.dependency.marginal_mode = mode;
    cfg.dependency.learn_nu = base == Base::StudentT;
    cfg.epochs = 1;
    let s = labeled_series(300, 2, 21);
    let (ck, _) = fit(&s, None, &cfg).unwrap();
    let frames = make_frames(&ck.scaler.apply(&s).unwrap(), cfg.window, 1).unwrap();
    (ck, frames)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (family, base, mode) in [
        (Family::Copula, Base::StudentT, MarginalMode::Parametric),
        (Family::Copula, Base::Gaussian, MarginalMode::Empirical),
        (Family::Multivariate, Base::Gaussian, MarginalMode::Parametric),
    ] {
        let (mut ck, frames) = trained(family, base, mode);
        ck.threshold = Some(f64::NEG_INFINITY);
        let p = dir.path().join("ckpt.json");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.encoder.tensors.iter().zip(&ck.encoder.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(checkpoint_to_string(&back).unwrap(), fs::read_to_string(&p).unwrap());
        let first10: Vec<usize> = (0..10).collect();
        let before = ck.score_latents(&ck.latents_of(&frames, &first10).unwrap()).unwrap();
        let after = back.score_latents(&back.latents_of(&frames, &first10).unwrap()).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn checkpoint_rejects_wrong_version_and_corrupt_arrays() {
    let (ck, _) = trained(Family::Copula, Base::StudentT, MarginalMode::Parametric);
    let text = checkpoint_to_string(&ck).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = serde_json::json!(99);
    assert!(matches!(
        checkpoint_from_str(&v.to_string()),
        Err(Error::VersionMismatch { found: 99, expected: CHECKPOINT_VERSION })
    ));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["arrays"][0]["values"].as_array_mut().unwrap().pop();
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::CorruptArray { .. })));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["arrays"][1]["shape"] = serde_json::json!([1, 1]);
    v["arrays"][1]["values"] = serde_json::json!([0.5]);
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::CorruptArray { .. })));

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["arrays"].as_array_mut().unwrap().retain(|a| a["name"] != "dependency.phi");
    assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::CorruptArray { name, .. }) if name == "dependency.phi"));
}

// ---- composed gradient

fn composed_setup(family: Family, base: Base, d: usize) -> (Checkpoint, Vec<f64>, Vec<bool>, f64) {
    let mut cfg = small_config(3);
    cfg.window = 4;
    cfg.encoder.latent_dim = d;
    cfg.dependency.family = family;
    cfg.dependency.base = base;
    let s = series(3, vec![0; 80], d as u64);
    let scaler = InputScaler::identity(3);
    let frames = make_frames(&s, 4, 2).unwrap();
    let mut ck = Checkpoint::init(&cfg, scaler).unwrap();
    let z = ck.latents(&frames).unwrap();
    ck.dependency.fit_marginals(&z).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(d as u64 + 40);
    let phi: Vec<f64> = ck.dependency.phi.iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
    ck.dependency.phi = phi;
    let idx: Vec<usize> = (0..6).collect();
    let anomalous = vec![false, true, false, false, true, true];
    let scores = ck.score_latents(&ck.latents_of(&frames, &idx).unwrap()).unwrap();
    // pick μ_norm so every hinge is active
    let min_anom = (0..6).filter(|&i| anomalous[i]).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
    let mu = min_anom + cfg.loss.margin - 0.5;
    (ck, frames.gather(&idx), anomalous, mu)
}

#[test]
fn composed_objective_gradients() {
    for family in [Family::Multivariate, Family::Copula] {
        for base in [Base::Gaussian, Base::StudentT] {
            for d in [2, 3, 5] {
                let (ck, batch, anomalous, mu) = composed_setup(family, base, d);
                let cfg = &ck.config;
                fn input<'t>(tape: &'t Tape, batch: &[f64]) -> Result<copulad::diffcore::Var<'t>, Error> {
                    Ok(tape.constant(vec![6, 4, 3], batch.to_vec())?)
                }

                let theta = gradcheck::<_, Error>(
                    |tape, v| {
                        let z = encode_on_tape(tape, v, &cfg.encoder, input(tape, &batch)?, Mode::Eval)?;
                        let dep = ck.dependency.on_tape(tape, false)?;
                        let logc = ck.dependency.score_on_tape(tape, &dep, z)?;
                        Ok(contrastive_loss_on_tape(tape, logc, &anomalous, &cfg.loss, Some(mu))?.0)
                    },
                    &ck.encoder.tensors,
                    1e-5,
                    1e-3,
                )
                .unwrap();
                assert!(theta.passed, "θ {family:?}/{base:?} d={d}: {:?}", theta.per_leaf);

                let phi = gradcheck::<_, Error>(
                    |tape, v| {
                        let enc = ck.encoder.on_tape_frozen(tape);
                        let z = encode_on_tape(tape, &enc, &cfg.encoder, input(tape, &batch)?, Mode::Eval)?;
                        let dep = DepVars {
                            phi: v[0],
                            nu_raw: ck.dependency.on_tape(tape, false)?.nu_raw,
                        };
                        let logc = ck.dependency.score_on_tape(tape, &dep, z)?;
                        Ok(contrastive_loss_on_tape(tape, logc, &anomalous, &cfg.loss, Some(mu))?.0)
                    },
                    &[Tensor::from_vec(ck.dependency.phi.clone()).unwrap()],
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(phi.passed, "ϕ {family:?}/{base:?} d={d}: {}", phi.max_rel_err);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_count_and_window_content(t in 2usize..60, l in 1usize..20, stride in 1usize..10) {
        prop_assume!(l <= t);
        let s = series(1, vec![0; t], t as u64);
        let f = make_frames(&s, l, stride).unwrap();
        prop_assert_eq!(f.len(), (t - l) / stride + 1);
        let last = f.len() - 1;
        prop_assert!(f.t_end(last) < t);
        prop_assert!(f.t_end(last) + stride >= t);
    }
}
