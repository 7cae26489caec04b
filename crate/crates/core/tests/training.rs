use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transpotter::data::{synthesize_dataset, FeatureSequence, SyntheticConfig};
use transpotter::model::{init_parameters, Graph, Localization, LocHead, ModelConfig, Parameters, Prediction, Variant};
use transpotter::numerics::{grad_check, Tape};
use transpotter::phonetics::Query;
use transpotter::training::{
    adam_step, bce, loss_cls, loss_loc, sample_loss_cls, sample_loss_loc, sample_loss_node, total_loss,
    train, AdamConfig, OptimizerState, PlateauSchedule, Sampler, SamplerConfig, TrainConfig, TrainOptions,
    TrainingPair,
};
use transpotter::{Error, GradientRecord, Tensor};

fn pair(y_cls: u8, y_loc: Vec<u8>) -> TrainingPair {
    let t = y_loc.len();
    TrainingPair {
        clip: "c".into(),
        crop: (0, t),
        features: FeatureSequence::new(t, 1, vec![0.0; t]).unwrap(),
        query: Query {
            ids: vec![1, 2, 3],
            text: "X".into(),
        },
        y_cls,
        y_loc,
    }
}

fn pred(cls: f64, loc: Vec<f64>) -> Prediction<f64> {
    Prediction {
        cls,
        loc: Some(Localization::Frames(loc)),
    }
}

#[test]
fn bce_values() {
    assert_eq!(bce(1.0, 1.0), -(1.0f64 - 1e-12).ln());
    assert!(bce(1.0, 1.0) < 1e-11);
    assert!((bce(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce(1.0, 0.75) + 0.75f64.ln()).abs() < 1e-12);
    assert!(bce(1.0, 0.0).is_finite());
    assert!(bce(0.0, 1.0).is_finite());
}

#[test]
fn batch_losses() {
    let a = pair(1, vec![0, 1, 1, 0]);
    let b = pair(0, vec![0, 0, 0, 0]);
    let pa = pred(0.5, vec![0.5; 4]);
    let pb = pred(0.2, vec![0.9; 4]);
    let batch = [(&pa, &a), (&pb, &b)];
    let cls = loss_cls(&batch).unwrap();
    assert!((cls - (bce(1.0, 0.5) + bce(0.0, 0.2)) / 2.0).abs() < 1e-15);
    // Negatives are gated out but still count in the batch mean.
    let loc = loss_loc(&batch).unwrap();
    assert!((loc - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    let neg_only = [(&pb, &b)];
    assert_eq!(loss_loc(&neg_only).unwrap(), 0.0);
    for lambda in [0.0, 0.3, 0.5, 1.0] {
        let total = total_loss(&batch, lambda).unwrap();
        assert_eq!(total, lambda * cls + (1.0 - lambda) * loc);
    }
    assert_eq!(total_loss(&batch, 1.0).unwrap(), cls);
    assert_eq!(total_loss(&batch, 0.0).unwrap(), loc);
    let perfect = pred(1.0, vec![0.0, 1.0, 1.0, 0.0]);
    assert!(sample_loss_loc(&perfect, &a).unwrap() < 1e-11);
    assert!(matches!(loss_cls::<f64>(&[]), Err(Error::Domain(_))));
    let no_loc = Prediction { cls: 0.5, loc: None };
    assert!(matches!(loss_loc(&[(&no_loc, &a)]), Err(Error::Capability(_))));
    assert_eq!(total_loss(&[(&no_loc, &a)], 0.5).unwrap(), sample_loss_cls(&no_loc, &a));
    assert!(total_loss(&batch, 1.5).is_err());
}

#[test]
fn span_loss_is_cross_entropy_on_boundaries() {
    let a = pair(1, vec![0, 1, 1, 0]);
    let p = Prediction {
        cls: 0.5,
        loc: Some(Localization::Span {
            start: vec![0.1, 0.6, 0.2, 0.1],
            end: vec![0.1, 0.1, 0.5, 0.3],
        }),
    };
    let want = -(0.6f64.ln() + 0.5f64.ln()) / 2.0;
    assert!((sample_loss_loc(&p, &a).unwrap() - want).abs() < 1e-12);
    assert_eq!(sample_loss_loc(&p, &pair(0, vec![0; 4])).unwrap(), 0.0);
}

fn tiny(variant: Variant, loc_head: LocHead) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        text_layers: 1,
        video_layers: 1,
        joint_layers: 1,
        input_dim: 5,
        variant,
        loc_head,
        dropout: 0.0,
        ..Default::default()
    }
}

fn randomized(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
    let mut p = init_parameters::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    p
}

fn random_pair(rng: &mut ChaCha8Rng, y_cls: u8) -> TrainingPair {
    let t = 6;
    let values = (0..t * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y_loc = vec![0u8; t];
    if y_cls == 1 {
        y_loc[2..5].iter_mut().for_each(|y| *y = 1);
    }
    TrainingPair {
        clip: "c".into(),
        crop: (0, t),
        features: FeatureSequence::new(t, 5, values).unwrap(),
        query: Query {
            ids: (0..3).map(|_| rng.random_range(1..40)).collect(),
            text: "Q".into(),
        },
        y_cls,
        y_loc,
    }
}

#[test]
fn tape_loss_matches_value_loss_and_gradients_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = [random_pair(&mut rng, 1), random_pair(&mut rng, 0)];
    for variant in Variant::ALL {
        let heads: &[LocHead] = if variant.localizes() {
            &[LocHead::FrameSigmoid, LocHead::SpanSoftmax]
        } else {
            &[LocHead::FrameSigmoid]
        };
        for &lh in heads {
            let cfg = tiny(variant, lh);
            let params = randomized(&cfg, 5);
            let loss = |tape: &mut Tape<f64>, ids: &[_]| {
                let mut terms = Vec::new();
                for p in &pairs {
                    let feats = p.features.to_tensor::<f64>();
                    let h = Graph::with_bound(tape, &params, ids)?.forward(&feats, &p.query.ids)?;
                    terms.push(sample_loss_node(tape, &h, p, 0.5)?);
                }
                let sum = tape.add(terms[0], terms[1])?;
                Ok(tape.scale(sum, 0.5))
            };
            let mut tape = Tape::new();
            let ids: Vec<_> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(i, t.clone()))
                .collect();
            let root = loss(&mut tape, &ids).unwrap();
            let preds: Vec<_> = pairs
                .iter()
                .map(|p| transpotter::model::forward(&params, &p.features.to_tensor(), &p.query.ids).unwrap())
                .collect();
            let batch: Vec<_> = preds.iter().zip(&pairs).collect();
            let want = total_loss(&batch, 0.5).unwrap();
            assert!((tape.value(root).item() - want).abs() < 1e-12, "{variant} {lh:?}");

            let report = grad_check(loss, params.tensors(), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant} {lh:?}: {report:?}");
        }
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut params = vec![Tensor::matrix(1, 3, vec![1.0f64, -2.0, 0.5]).unwrap()];
    let mut state = OptimizerState::new(&params, 1e-3);
    let cfg = AdamConfig::default();
    let ones = GradientRecord {
        grads: vec![Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap()],
    };
    adam_step(&mut params, &ones, &mut state, &cfg).unwrap();
    for (v, w) in params[0].data().iter().zip([1.0, -2.0, 0.5]) {
        assert!((v - (w - 1e-3)).abs() < 1e-9);
    }
    assert_eq!(state.step, 1);
    let before = params.clone();
    let m_before = state.m[0].data()[0];
    let zeros = GradientRecord::zeros_like(&params);
    adam_step(&mut params, &zeros, &mut state, &cfg).unwrap();
    assert!((state.m[0].data()[0] - 0.9 * m_before).abs() < 1e-15);
    // The first moment still moves parameters; only the gradient is zero.
    assert_ne!(params, before);

    let mut fresh = vec![Tensor::matrix(1, 2, vec![0.3f64, 0.4]).unwrap()];
    let mut st = OptimizerState::new(&fresh, 1e-3);
    let zero = GradientRecord::zeros_like(&fresh);
    adam_step(&mut fresh, &zero, &mut st, &cfg).unwrap();
    assert_eq!(fresh[0].data(), &[0.3, 0.4]);

    let bad = GradientRecord {
        grads: vec![Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap()],
    };
    let snapshot = (fresh.clone(), st.clone());
    assert!(matches!(adam_step(&mut fresh, &bad, &mut st, &cfg), Err(Error::NonFinite(_))));
    assert_eq!((fresh, st), snapshot);
}

#[test]
fn plateau_schedule() {
    let sched = PlateauSchedule {
        min_lr: 1e-6,
        factor: 5.0,
        patience: 2,
    };
    let mut st = OptimizerState::<f32>::new(&[], 5e-5);
    assert!(sched.observe(&mut st, 1.0));
    assert!(!sched.observe(&mut st, 1.0));
    assert_eq!(st.lr, 5e-5);
    assert!(!sched.observe(&mut st, 1.1));
    assert!((st.lr - 1e-5).abs() < 1e-18);
    let mut lrs = vec![st.lr];
    for _ in 0..20 {
        sched.observe(&mut st, 2.0);
        lrs.push(st.lr);
    }
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*lrs.last().unwrap(), 1e-6);
}

#[test]
fn sampler_pairs_satisfy_label_invariants() {
    let ds = synthesize_dataset(&SyntheticConfig {
        train_clips: 60,
        test_clips: 1,
        ..Default::default()
    })
    .unwrap();
    for phrase_prob in [0.0, 0.5] {
        let sampler = Sampler::new(
            &ds.train,
            &ds.lexicon,
            SamplerConfig {
                phrase_prob,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut positives = 0;
        for _ in 0..10_000 {
            let p = sampler.sample(&mut rng).unwrap();
            p.check().unwrap();
            let clip = ds.train.iter().find(|c| c.record.id == p.clip).unwrap();
            let words: Vec<String> = p.query.text.split(' ').map(str::to_lowercase).collect();
            let (cs, ce) = p.crop;
            assert_eq!(clip.features.crop(cs, ce), p.features);
            if p.y_cls == 1 {
                positives += 1;
                // Labels are the union of whole occurrences inside the crop,
                // the sampled one among them, and no occurrence is cut.
                let mut want = vec![0u8; ce - cs];
                for i in clip.record.phrase_occurrences(&words) {
                    let (os, oe) = (clip.record.words[i].start, clip.record.words[i + words.len() - 1].end);
                    let inside = os >= cs && oe <= ce;
                    let outside = oe <= cs || os >= ce;
                    assert!(inside || outside);
                    if inside {
                        want[os - cs..oe - cs].iter_mut().for_each(|y| *y = 1);
                    }
                }
                assert_eq!(p.y_loc, want);
                assert!(p.span().is_some());
                assert!(p.query.ids.len() >= 3);
            } else {
                assert_eq!(clip.record.phrase_occurrences(&words).count(), 0);
            }
        }
        let frac = positives as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }
}

#[test]
fn training_is_reproducible_and_improves() {
    let ds = synthesize_dataset(&SyntheticConfig {
        vocab_size: 12,
        feature_dim: 8,
        train_clips: 40,
        test_clips: 1,
        max_words: 5,
        ..Default::default()
    })
    .unwrap();
    let model = ModelConfig {
        d_model: 16,
        heads: 2,
        text_layers: 1,
        video_layers: 1,
        joint_layers: 1,
        input_dim: 8,
        dropout: 0.0,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 5,
        lr: 2e-3,
        min_lr: 1e-5,
        val_fraction: 0.2,
        ..Default::default()
    };
    let run = || train(&model, &cfg, &ds.train, &ds.lexicon, &TrainOptions::default(), |_| {}).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 6);
    assert_eq!(a.log[0].lr, 2e-3);
    assert!(a.log[5].val_loss < a.log[0].val_loss, "{:?}", a.log);
    assert!(a.log.windows(2).all(|w| w[1].lr <= w[0].lr && w[1].lr >= cfg.min_lr));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let ds = synthesize_dataset(&SyntheticConfig {
        vocab_size: 12,
        feature_dim: 8,
        train_clips: 30,
        test_clips: 1,
        max_words: 5,
        ..Default::default()
    })
    .unwrap();
    let model = ModelConfig {
        d_model: 8,
        heads: 2,
        text_layers: 1,
        video_layers: 1,
        joint_layers: 1,
        input_dim: 8,
        dropout: 0.1,
        ..Default::default()
    };
    let full_cfg = TrainConfig {
        epochs: 4,
        lr: 1e-3,
        patience: 1,
        min_lr: 1e-5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let full = train(&model, &full_cfg, &ds.train, &ds.lexicon, &TrainOptions::default(), |_| {}).unwrap();
    let half_cfg = TrainConfig { epochs: 2, ..full_cfg.clone() };
    let opts = TrainOptions {
        out_dir: Some(dir.path()),
        resume: false,
    };
    train(&model, &half_cfg, &ds.train, &ds.lexicon, &opts, |_| {}).unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path()),
        resume: true,
    };
    let resumed = train(&model, &full_cfg, &ds.train, &ds.lexicon, &opts, |_| {}).unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.last.tensors(), full.last.tensors());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(csv.lines().count(), 6);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn mismatched_feature_width_is_a_config_error() {
    let ds = synthesize_dataset(&SyntheticConfig {
        train_clips: 5,
        test_clips: 1,
        feature_dim: 8,
        ..Default::default()
    })
    .unwrap();
    let model = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let r = train(&model, &TrainConfig::default(), &ds.train, &ds.lexicon, &TrainOptions::default(), |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}
