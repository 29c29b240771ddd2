#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{EncoderConfig, MaskSpec};
use crate::nn::{gradient_check, weighted_sum, GradCheckConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn constant(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
}

fn value(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

/// `-log(exp(z_t) / sum_j exp(z_j))` evaluated directly.
fn ce_oracle(z: &[f64], t: usize) -> f64 {
    -(z[t].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln()
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::new();
    let z = constant(&mut tape, &[1, 2], vec![0.0, 0.0]);
    let loss = cross_entropy(&mut tape, z, &[1]).unwrap();
    assert!((value(&tape, loss)[0] - 2f64.ln()).abs() < 1e-15);

    let z = constant(&mut tape, &[1, 2], vec![1000.0, 0.0]);
    let loss = cross_entropy(&mut tape, z, &[0]).unwrap();
    let v = value(&tape, loss)[0];
    assert!(v.is_finite() && v.abs() < 1e-300);

    let logits = Tensor::randn(&[3, 4], 1.5, &mut rng(1));
    let targets = [2, 0, 3];
    let z = tape.constant(logits.clone());
    let loss = cross_entropy(&mut tape, z, &targets).unwrap();
    let want: f64 = (0..3)
        .map(|b| ce_oracle(&logits.data()[b * 4..(b + 1) * 4], targets[b]))
        .sum::<f64>()
        / 3.0;
    assert!((value(&tape, loss)[0] - want).abs() < 1e-14);

    assert!(cross_entropy(&mut tape, z, &[0, 4, 1]).is_err());
}

#[test]
fn ce_forward_uses_affine_logits() {
    let mut tape = Tape::new();
    let e = constant(&mut tape, &[1, 3], vec![1.0, 2.0, 3.0]);
    let w = constant(&mut tape, &[2, 3], vec![0.0; 6]);
    let b = constant(&mut tape, &[2], vec![0.0, 0.0]);
    let (logits, loss) = ce_forward(&mut tape, e, w, b, &[0]).unwrap();
    assert_eq!(value(&tape, logits), vec![0.0, 0.0]);
    assert!((value(&tape, loss)[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn aam_closed_forms() {
    let spec = AamSpec::default();
    let mut tape = Tape::new();
    let w = constant(&mut tape, &[2, 3], vec![0.3, -1.2, 0.5, 1.0, 1.0, 0.0]);
    let e = constant(&mut tape, &[1, 3], vec![0.6, -2.4, 1.0]);
    let logits = aam_logits(&mut tape, e, w, &[0], spec).unwrap();
    let l = value(&tape, logits);
    assert!((l[0] - 30.0 * 0.2f64.cos()).abs() < 1e-9);
    assert!((l[0] - 29.402_0).abs() < 1e-4);

    let e = constant(&mut tape, &[1, 3], vec![-0.3, 1.2, -0.5]);
    let logits = aam_logits(&mut tape, e, w, &[0], spec).unwrap();
    let l = value(&tape, logits)[0];
    assert!((l - 30.0 * (-1.0 - 0.2 * 0.2f64.sin())).abs() < 1e-9);
    assert!((l + 31.192).abs() < 1e-3);

    let zero = constant(&mut tape, &[1, 3], vec![0.0; 3]);
    assert!(aam_logits(&mut tape, zero, w, &[0], spec).is_err());
    assert!(aam_logits(&mut tape, e, w, &[2], spec).is_err());
}

#[test]
fn zero_margin_is_scaled_cosine_cross_entropy() {
    let spec = AamSpec {
        scale: 30.0,
        margin: 0.0,
    };
    let e = Tensor::randn(&[4, 6], 1.0, &mut rng(2));
    let w = Tensor::randn(&[5, 6], 1.0, &mut rng(3));
    let targets = [0, 4, 2, 2];
    let mut tape = Tape::new();
    let (ev, wv) = (tape.constant(e.clone()), tape.constant(w.clone()));
    let (logits, loss) = aam_forward(&mut tape, ev, wv, &targets, spec).unwrap();
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut want_loss = 0.0;
    for b in 0..4 {
        let er = &e.data()[b * 6..(b + 1) * 6];
        let z: Vec<f64> = (0..5)
            .map(|c| {
                let wr = &w.data()[c * 6..(c + 1) * 6];
                30.0 * er.iter().zip(wr).map(|(x, y)| x * y).sum::<f64>() / (norm(er) * norm(wr))
            })
            .collect();
        for c in 0..5 {
            assert!((value(&tape, logits)[b * 5 + c] - z[c]).abs() < 1e-12);
        }
        want_loss += ce_oracle(&z, targets[b]) / 4.0;
    }
    assert!((value(&tape, loss)[0] - want_loss).abs() < 1e-12);
}

fn check<F>(op: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = gradient_check(op, inputs, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    report.max_relative_error
}

#[test]
fn classifier_gradients_match_finite_differences() {
    for seed in 0..10 {
        let e = Tensor::randn(&[3, 5], 1.0, &mut rng(seed));
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng(seed + 100));
        let b = Tensor::randn(&[4], 1.0, &mut rng(seed + 200));
        let targets = [seed as usize % 4, 1, 3];
        check(
            |tape, v| Ok(ce_forward(tape, v[0], v[1], v[2], &targets)?.1),
            &[e.clone(), w.clone(), b],
        );
        check(
            |tape, v| Ok(aam_forward(tape, v[0], v[1], &targets, AamSpec::default())?.1),
            &[e, w],
        );
    }
}

#[test]
fn aam_gradients_on_both_sides_of_the_fallback_boundary() {
    let spec = AamSpec::default();
    let boundary = PI - spec.margin;
    for (i, delta) in [-0.05, -0.01, 0.01, 0.05].into_iter().enumerate() {
        let angle = boundary + delta;
        let e = Tensor::new(vec![1, 3], vec![angle.cos(), angle.sin(), 0.1]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.2, -0.7, 0.4]).unwrap();
        let weights = Tensor::randn(&[2], 1.0, &mut rng(i as u64)).into_data();
        check(
            |tape, v| {
                let z = aam_logits(tape, v[0], v[1], &[0], spec)?;
                weighted_sum(tape, z, weights.clone())
            },
            &[e, w],
        );
    }
}

#[test]
fn bce_values() {
    assert!((bce_value(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!((bce_value(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    let v = bce_value(20.0, 1.0);
    assert!((v - 2.061_153_6e-9).abs() < 1e-15, "{v}");
    assert!(bce_value(-800.0, 1.0).is_finite());
    let z = Tensor::randn(&[32], 3.0, &mut rng(4)).into_data();
    for (i, &zi) in z.iter().enumerate() {
        let y = (i % 2) as f64;
        let s = 1.0 / (1.0 + (-zi).exp());
        let want = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        assert!((bce_value(zi, y) - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let labels = [TrialLabel::Same, TrialLabel::Different, TrialLabel::Same];
    for seed in 0..10 {
        check(
            |tape, v| bce_loss(tape, v[0], &labels),
            &[Tensor::randn(&[3], 2.0, &mut rng(seed))],
        );
    }
}

fn pair_encoder(layers: usize) -> Encoder {
    Encoder::new(EncoderConfig {
        model_dim: 8,
        ffn_dim: 16,
        heads: 2,
        layers,
        pos_conv_kernel: 4,
        pos_conv_groups: 2,
        dropout_p: 0.0,
        layerdrop_p: 0.0,
        time_mask: MaskSpec::OFF,
        channel_mask: MaskSpec::OFF,
        ..EncoderConfig::tiny()
    })
    .unwrap()
}

fn pair_store(enc: &Encoder, seed: u64) -> ParameterStore {
    let mut store = enc.init_parameters(&mut rng(seed)).unwrap();
    PairHead { model_dim: 8 }
        .init_parameters(&mut store, &mut rng(seed + 1))
        .unwrap();
    store
}

#[test]
fn joint_sequence_layout() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[2, 5, 3], 7.0));
    let b = tape.constant(Tensor::full(&[2, 4, 3], 9.0));
    let sa = FrameSequence::new(a, vec![5, 2]);
    let sb = FrameSequence::new(b, vec![4, 4]);
    let joint = join_pair(&mut tape, &sa, &sb).unwrap();
    assert_eq!(joint.valid_lengths, vec![12, 9]);
    assert_eq!(tape.shape(joint.data), &[2, 12, 3]);
    let v = value(&tape, joint.data);
    let frame = |b: usize, t: usize| v[(b * 12 + t) * 3];
    let item1: Vec<f64> = (0..9).map(|t| frame(1, t)).collect();
    assert_eq!(item1, vec![1.0, 7.0, 7.0, -1.0, 9.0, 9.0, 9.0, 9.0, -1.0]);
    assert_eq!(frame(0, 6), -1.0);
    assert_eq!(frame(0, 11), -1.0);

    let empty = FrameSequence::new(a, vec![0, 1]);
    assert!(join_pair(&mut tape, &empty, &sb).is_err());
}

#[test]
fn empty_stack_scores_the_start_token() {
    let enc = pair_encoder(0);
    let store = pair_store(&enc, 5);
    let w = store.get(PAIR_WEIGHT).unwrap().data().iter().sum::<f64>();
    let mut outs = Vec::new();
    for seed in [6, 7] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let a = tape.constant(Tensor::randn(&[1, 4, 8], 1.0, &mut rng(seed)));
        let b = tape.constant(Tensor::randn(&[1, 6, 8], 1.0, &mut rng(seed + 10)));
        let logit = pair_forward(
            &mut tape,
            &enc,
            &p,
            &FrameSequence::new(a, vec![4]),
            &FrameSequence::new(b, vec![6]),
            Mode::Eval,
            &mut rng(0),
        )
        .unwrap();
        outs.push(value(&tape, logit)[0]);
    }
    assert!((outs[0] - w).abs() < 1e-12);
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn pair_scores_swap_symmetric_up_to_rounding() {
    // The joint sequence carries no position information, so swapping the
    // two utterances only permutes the attention keys.
    let enc = pair_encoder(1);
    let store = pair_store(&enc, 8);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a = FrameSequence::new(tape.constant(Tensor::randn(&[1, 4, 8], 1.0, &mut rng(9))), vec![4]);
    let b = FrameSequence::new(tape.constant(Tensor::randn(&[1, 5, 8], 1.0, &mut rng(10))), vec![5]);
    let ab = pair_forward(&mut tape, &enc, &p, &a, &b, Mode::Eval, &mut rng(0)).unwrap();
    let ba = pair_forward(&mut tape, &enc, &p, &b, &a, Mode::Eval, &mut rng(0)).unwrap();
    let (ab, ba) = (value(&tape, ab)[0], value(&tape, ba)[0]);
    assert!((ab - ba).abs() < 1e-9 * ab.abs().max(1.0), "{ab} {ba}");
}

#[test]
fn pair_gradients_match_finite_differences() {
    let enc = pair_encoder(2);
    let store = pair_store(&enc, 11);
    let names: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with("feature_") && !n.starts_with("encoder.pos_conv"))
        .map(str::to_string)
        .collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.push(Tensor::randn(&[2, 3, 8], 1.0, &mut rng(12)));
    inputs.push(Tensor::randn(&[2, 4, 8], 1.0, &mut rng(13)));
    let labels = [TrialLabel::Same, TrialLabel::Different];
    let report = gradient_check(
        |tape, v| {
            let k = names.len();
            let p = Bindings::from_pairs(names.iter().cloned().zip(v[..k].iter().copied()));
            let a = FrameSequence::new(v[k], vec![3, 2]);
            let b = FrameSequence::new(v[k + 1], vec![4, 4]);
            let z = pair_forward(tape, &enc, &p, &a, &b, Mode::Eval, &mut rng(0))?;
            bce_loss(tape, z, &labels)
        },
        &inputs,
        &GradCheckConfig {
            max_coords: Some(10),
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_margin_argmax_is_cosine_argmax(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let e = Tensor::randn(&[1, 4], 1.0, &mut rng(seed));
        let w = Tensor::randn(&[6, 4], 1.0, &mut rng(seed + 1));
        let mut tape = Tape::new();
        let (ev, wv) = (tape.constant(e), tape.constant(w));
        let spec = AamSpec { scale, margin: 0.0 };
        let z = aam_logits(&mut tape, ev, wv, &[0], spec).unwrap();
        let z = value(&tape, z);
        let unit = aam_logits(&mut tape, ev, wv, &[0], AamSpec { scale: 1.0, margin: 0.0 }).unwrap();
        let unit = value(&tape, unit);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(&z), argmax(&unit));
    }

    #[test]
    fn larger_margin_never_raises_the_target_logit(c in -1.0f64..1.0, m1 in 0.0f64..1.5, m2 in 0.0f64..1.5) {
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = AamSpec { scale: 30.0, margin: lo }.target_logit(c);
        let b = AamSpec { scale: 30.0, margin: hi }.target_logit(c);
        prop_assert!(b <= a + 1e-12, "c={} m={}..{}: {} > {}", c, lo, hi, b, a);
    }
}
