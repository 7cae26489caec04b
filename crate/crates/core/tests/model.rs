use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transpotter::model::{
    checkpoint_bytes, checkpoint_from_bytes, encode_text, encode_video, forward, forward_padded,
    init_parameters, positional_encoding, Localization, LocHead, ModelConfig, Parameters, Variant,
};
use transpotter::{Error, Tensor};

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

fn features<F: transpotter::Scalar>(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(t, d, |_, _| F::lit(rng.random_range(-1.0..1.0)))
}

/// Gives the zero-initialized heads non-zero weights so outputs vary.
fn perturbed<F: transpotter::Scalar>(cfg: &ModelConfig, seed: u64) -> Parameters<F> {
    let mut p = init_parameters::<F>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = *v + F::lit(rng.random_range(-0.3..0.3));
        }
    }
    p
}

#[test]
fn fresh_model_predicts_one_half() {
    let cfg = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let p = init_parameters::<f32>(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pred = forward(&p, &features(&mut rng, 6, 5), &[3, 4, 5]).unwrap();
    assert_eq!(pred.cls, 0.5);
    assert!(pred.frame_probs().unwrap().iter().all(|&v| v == 0.5));
    assert_eq!(pred.frame_probs().unwrap().len(), 6);
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let a = init_parameters::<f32>(&cfg, 3).unwrap();
    let b = init_parameters::<f32>(&cfg, 3).unwrap();
    let c = init_parameters::<f32>(&cfg, 4).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    assert_ne!(a.tensors(), c.tensors());
    for (name, t) in a.names().zip(a.tensors()) {
        if name.ends_with(".bias") || name.starts_with("head_cls.out") || name.starts_with("head_loc.out") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1.0), "{name}");
    }
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding::<f64>(3, 6).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let pe = positional_encoding::<f64>(2, 4).unwrap();
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in pe.row(1).iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let pe = positional_encoding::<f64>(50, 16).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(matches!(positional_encoding::<f64>(2, 5), Err(Error::Shape(_))));
}

#[test]
fn text_encoder_shape_padding_and_order() {
    let cfg = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let p = perturbed::<f32>(&cfg, 1);
    let q = [5u32, 9, 17];
    let out = encode_text(&p, &q, 3).unwrap();
    assert_eq!(out.shape(), &[3, 8]);
    let padded = encode_text(&p, &[5, 9, 17, 0, 0, 0], 3).unwrap();
    assert!(padded.slice_rows(0, 3).max_abs_diff(&out) <= 1e-6);
    let swapped = encode_text(&p, &[9, 5, 17], 3).unwrap();
    assert!(swapped.max_abs_diff(&out) > 1e-4);
    assert!(matches!(encode_text(&p, &[40], 1), Err(Error::Domain(_))));
}

#[test]
fn video_encoder_shape_padding_and_zero_input() {
    let cfg = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let p = perturbed::<f32>(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f: Tensor<f32> = features(&mut rng, 6, 5);
    let out = encode_video(&p, &f, 6).unwrap();
    assert_eq!(out.shape(), &[6, 8]);
    let mut data = f.data().to_vec();
    data.extend(std::iter::repeat_n(0.7, 4 * 5));
    let fp = Tensor::matrix(10, 5, data).unwrap();
    let padded = encode_video(&p, &fp, 6).unwrap();
    assert!(padded.slice_rows(0, 6).max_abs_diff(&out) <= 1e-6);
    let zeros = encode_video(&p, &Tensor::zeros(&[4, 5]), 4).unwrap();
    assert!(zeros.is_finite());
    assert!(matches!(
        encode_video(&p, &Tensor::<f32>::zeros(&[4, 6]), 4),
        Err(Error::Shape(_))
    ));
}

#[test]
fn variants_expose_the_right_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f: Tensor<f64> = features(&mut rng, 6, 5);
    for variant in Variant::ALL {
        let heads: &[LocHead] = if variant.localizes() {
            &[LocHead::FrameSigmoid, LocHead::SpanSoftmax]
        } else {
            &[LocHead::FrameSigmoid]
        };
        for &lh in heads {
            let cfg = tiny(variant, lh);
            let p = perturbed::<f64>(&cfg, 9);
            let a = forward(&p, &f, &[1, 2, 3]).unwrap();
            let b = forward(&p, &f, &[1, 2, 3]).unwrap();
            assert_eq!(a, b, "{variant}");
            assert!((0.0..=1.0).contains(&a.cls));
            match (&a.loc, variant.localizes(), lh) {
                (None, false, _) => {
                    assert!(matches!(a.frame_probs(), Err(Error::Capability(_))));
                }
                (Some(Localization::Frames(p)), true, LocHead::FrameSigmoid) => {
                    assert_eq!(p.len(), 6);
                    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                (Some(Localization::Span { start, end }), true, LocHead::SpanSoftmax) => {
                    assert_eq!(start.len(), 6);
                    assert!((start.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!((end.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                other => panic!("{variant} {lh:?}: unexpected {other:?}"),
            }
        }
    }
}

#[test]
fn padding_invariance_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f: Tensor<f64> = features(&mut rng, 6, 5);
    let mut fp = f.data().to_vec();
    fp.extend(std::iter::repeat_n(-0.4, 3 * 5));
    let fp = Tensor::matrix(9, 5, fp).unwrap();
    for variant in Variant::ALL {
        for modality in [false, true] {
            if modality && variant != Variant::Transpotter {
                continue;
            }
            let cfg = ModelConfig {
                modality_embeddings: modality,
                ..tiny(variant, LocHead::FrameSigmoid)
            };
            let p = perturbed::<f64>(&cfg, 21);
            let a = forward(&p, &f, &[4, 8, 15]).unwrap();
            let b = forward_padded(&p, &fp, 6, &[4, 8, 15, 0, 0], 3).unwrap();
            assert!((a.cls - b.cls).abs() <= 1e-10, "{variant}");
            if let (Some(Localization::Frames(x)), Some(Localization::Frames(y))) = (&a.loc, &b.loc) {
                assert_eq!(x.len(), y.len());
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = tiny(Variant::EncVidDecText, LocHead::SpanSoftmax);
    assert!(matches!(init_parameters::<f32>(&cfg, 0), Err(Error::Config(_))));
    let cfg = ModelConfig {
        heads: 3,
        ..tiny(Variant::Transpotter, LocHead::FrameSigmoid)
    };
    assert!(matches!(init_parameters::<f32>(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let cfg = tiny(Variant::Transpotter, LocHead::FrameSigmoid);
    let p = perturbed::<f32>(&cfg, 3);
    let bytes = checkpoint_bytes(&p).unwrap();
    let back: Parameters<f32> = checkpoint_from_bytes(&bytes, Some(&cfg)).unwrap();
    assert_eq!(back.tensors(), p.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f: Tensor<f32> = features(&mut rng, 7, 5);
    assert_eq!(forward(&p, &f, &[2, 3]).unwrap(), forward(&back, &f, &[2, 3]).unwrap());

    let other = ModelConfig {
        d_model: 16,
        ..cfg.clone()
    };
    assert!(checkpoint_from_bytes::<f32>(&bytes, Some(&other)).is_err());
    assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 1], None).is_err());
}
