use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::{synthesize_corpus, Corpus};
use crate::encoder::EncoderConfig;
use crate::heads::AamSpec;
use crate::pooling::PoolingMethod;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn labelled(same: &[f64], diff: &[f64]) -> Vec<(f64, TrialLabel)> {
    same.iter()
        .map(|&s| (s, TrialLabel::Same))
        .chain(diff.iter().map(|&s| (s, TrialLabel::Different)))
        .collect()
}

/// Counts FAR and FRR trial by trial at every candidate threshold (each
/// score, and one above all of them) and interpolates the first crossing.
fn brute_force_eer(scored: &[(f64, TrialLabel)]) -> f64 {
    let mut cands: Vec<f64> = scored.iter().map(|s| s.0).collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    cands.push(f64::INFINITY);
    let rates = |t: f64| {
        let (mut fa, mut nd, mut fr, mut ns) = (0, 0, 0, 0);
        for &(s, l) in scored {
            match l {
                TrialLabel::Same => {
                    ns += 1;
                    if s < t {
                        fr += 1;
                    }
                }
                TrialLabel::Different => {
                    nd += 1;
                    if s >= t {
                        fa += 1;
                    }
                }
            }
        }
        (fa as f64 / nd as f64, fr as f64 / ns as f64)
    };
    let mut prev = rates(cands[0]);
    for &t in &cands[1..] {
        let cur = rates(t);
        if cur.0 <= cur.1 {
            let (g0, g1) = (prev.0 - prev.1, cur.0 - cur.1);
            return prev.0 + g0 / (g0 - g1) * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!()
}

#[test]
fn cosine_examples() {
    let v = [0.3, -1.2, 4.0];
    assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    let e = |v: &[f64]| SpeakerEmbedding {
        values: v.to_vec(),
        source_utterance: "u".into(),
    };
    assert!((cosine_score(&e(&v), &e(&v)).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn eer_perfect_separation_is_zero() {
    let r = compute_eer_from(&labelled(&[0.8, 0.9, 0.95], &[0.1, 0.2, 0.5])).unwrap();
    assert_eq!(r.eer, 0.0);
    assert!(r.threshold >= 0.5 && r.threshold <= 0.8);
}

#[test]
fn eer_single_inversion_example() {
    // At threshold 0.7 one of two different trials is accepted and one of
    // two same trials is rejected, so the curves meet at 1/2.
    let s = labelled(&[0.9, 0.6], &[0.7, 0.2]);
    let r = compute_eer_from(&s).unwrap();
    assert_eq!(r.eer, brute_force_eer(&s));
    assert_eq!(r.eer, 0.5);
    assert_eq!(r.threshold, 0.7);
}

#[test]
fn eer_interpolates_between_thresholds() {
    // FAR - FRR goes from 1/3 at 0.5 to -1/3 at 0.6.
    let s = labelled(&[0.6, 0.9, 0.95], &[0.5, 0.1, 0.2]);
    let r = compute_eer_from(&s).unwrap();
    assert_eq!(r.eer, 0.0);
    let s = labelled(&[0.4, 0.9, 0.95], &[0.5, 0.1, 0.2]);
    let r = compute_eer_from(&s).unwrap();
    assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.eer, brute_force_eer(&s));
}

#[test]
fn eer_errors() {
    assert!(compute_eer_from(&labelled(&[0.1, 0.2], &[])).is_err());
    assert!(compute_eer_from(&labelled(&[], &[0.1])).is_err());
    assert!(compute_eer_from(&labelled(&[f64::NAN], &[0.1])).is_err());
}

#[test]
fn eer_matches_brute_force_on_random_sets() {
    let mut r = rng(5);
    for case in 0..1000 {
        let n = r.random_range(2..60);
        // Coarse scores force ties on many sets.
        let coarse = case % 2 == 0;
        let mut s: Vec<(f64, TrialLabel)> = (0..n)
            .map(|_| {
                let v: f64 = r.random();
                let v = if coarse { (v * 8.0).floor() / 8.0 } else { v };
                let l = if r.random_bool(0.5) { TrialLabel::Same } else { TrialLabel::Different };
                (v, l)
            })
            .collect();
        s[0].1 = TrialLabel::Same;
        s[1].1 = TrialLabel::Different;
        let got = compute_eer_from(&s).unwrap();
        assert_eq!(got.eer, brute_force_eer(&s), "case {case}");
        assert!((0.0..=1.0).contains(&got.eer));
    }
}

#[test]
fn eer_of_uninformative_scores_is_one_half() {
    let mut r = rng(9);
    let s: Vec<(f64, TrialLabel)> = (0..10_000)
        .map(|_| {
            let l = if r.random_bool(0.5) { TrialLabel::Same } else { TrialLabel::Different };
            (r.random::<f64>(), l)
        })
        .collect();
    let e = compute_eer_from(&s).unwrap().eer;
    assert!((e - 0.5).abs() < 0.02, "{e}");
}

#[test]
fn curves_are_monotone() {
    let mut r = rng(2);
    let s: Vec<(f64, TrialLabel)> = (0..200)
        .map(|i| (r.random::<f64>(), if i % 3 == 0 { TrialLabel::Same } else { TrialLabel::Different }))
        .collect();
    let e = compute_eer_from(&s).unwrap();
    assert_eq!(e.thresholds.len(), e.far_curve.len());
    assert!(e.far_curve.windows(2).all(|w| w[1] <= w[0]));
    assert!(e.frr_curve.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!((e.far_curve[0], e.frr_curve[0]), (1.0, 0.0));
    assert_eq!((*e.far_curve.last().unwrap(), *e.frr_curve.last().unwrap()), (0.0, 1.0));
}

proptest! {
    #[test]
    fn eer_invariant_under_increasing_maps(
        scores in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 4..80)
    ) {
        let mut s: Vec<(f64, TrialLabel)> = scores
            .iter()
            .map(|&(v, b)| (v, if b { TrialLabel::Same } else { TrialLabel::Different }))
            .collect();
        s[0].1 = TrialLabel::Same;
        s[1].1 = TrialLabel::Different;
        let base = compute_eer_from(&s).unwrap().eer;
        for f in [|x: f64| x.exp(), |x: f64| 5.0 * x - 2.0, |x: f64| x.powi(3) + x] {
            let mapped: Vec<_> = s.iter().map(|&(v, l)| (f(v), l)).collect();
            prop_assert_eq!(compute_eer_from(&mapped).unwrap().eer, base);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        pairs in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 6), prop::collection::vec(-1.0f64..1.0, 6), any::<bool>()), 4..30)
    ) {
        let base: Vec<(f64, TrialLabel)> = pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b, l))| {
                let l = if i == 0 { true } else if i == 1 { false } else { *l };
                (cosine(a, b).unwrap(), if l { TrialLabel::Same } else { TrialLabel::Different })
            })
            .collect();
        for k in [1e-3, 1e3] {
            let scaled: Vec<(f64, TrialLabel)> = pairs
                .iter()
                .zip(&base)
                .map(|((a, b, _), &(s, l))| {
                    let a: Vec<f64> = a.iter().map(|x| x * k).collect();
                    let b: Vec<f64> = b.iter().map(|x| x * k).collect();
                    let c = cosine(&a, &b).unwrap();
                    assert!((c - s).abs() < 1e-12);
                    (c, l)
                })
                .collect();
            let e0 = compute_eer_from(&base).unwrap().eer;
            let e1 = compute_eer_from(&scaled).unwrap().eer;
            prop_assert!((e0 - e1).abs() < 1e-12);
        }
    }
}

fn small_model(variant: Variant, pooling: PoolingMethod) -> SpeakerModel {
    let cfg = EncoderConfig {
        cls_token: pooling == PoolingMethod::FirstCls,
        ..EncoderConfig::tiny()
    };
    SpeakerModel::init(cfg, variant, pooling, AamSpec::default(), 3, &mut rng(4)).unwrap()
}

fn small_corpus() -> Corpus {
    Corpus::from_waveforms(synthesize_corpus(3, 2, 0.3, 11).unwrap()).unwrap()
}

fn trials(rows: &[(TrialLabel, &str, &str)]) -> TrialList {
    TrialList {
        trials: rows
            .iter()
            .map(|&(label, a, b)| Trial {
                label,
                a: a.into(),
                b: b.into(),
            })
            .collect(),
    }
}

fn sample_trials() -> TrialList {
    use TrialLabel::*;
    trials(&[
        (Same, "spk000-utt000", "spk000-utt001"),
        (Different, "spk000-utt000", "spk001-utt000"),
        (Same, "spk002-utt000", "spk002-utt001"),
        (Different, "spk001-utt001", "spk002-utt001"),
        (Same, "spk000-utt000", "spk000-utt001"),
    ])
}

#[test]
fn each_utterance_encoded_once() {
    let model = small_model(Variant::Ce, PoolingMethod::Mean);
    let ev = evaluate_trials(&model, &sample_trials(), &small_corpus(), &mut rng(0), None).unwrap();
    assert_eq!(ev.encoded_utterances, 6);
    assert_eq!(ev.scores.len(), 5);
    // Duplicate rows give identical scores.
    assert_eq!(ev.scores[0].score, ev.scores[4].score);
    assert!(ev.scores.iter().all(|s| (-1.0..=1.0).contains(&s.score)));
}

#[test]
fn scores_match_direct_embedding() {
    let model = small_model(Variant::Aam, PoolingMethod::MeanStd);
    let corpus = small_corpus();
    let ev = evaluate_trials(&model, &sample_trials(), &corpus, &mut rng(0), None).unwrap();
    let embed = |id: &str| {
        let w = crate::audio::normalize(corpus.get(id).unwrap());
        let batch = crate::audio::WaveBatch::from_waveforms(&[w]).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let seq = model.encoder.encode(&mut tape, &p, &batch, Mode::Eval, &mut rng(0)).unwrap();
        let v = pool(&mut tape, &seq, model.pooling, &mut rng(0)).unwrap();
        tape.value(v).data().to_vec()
    };
    let t = &ev.scores[1].trial;
    let direct = cosine(&embed(&t.a), &embed(&t.b)).unwrap();
    assert!((direct - ev.scores[1].score).abs() < 1e-12);
}

#[test]
fn latent_cache_does_not_change_scores() {
    let model = small_model(Variant::Ce, PoolingMethod::Max);
    let (corpus, list) = (small_corpus(), sample_trials());
    let plain = evaluate_trials(&model, &list, &corpus, &mut rng(0), None).unwrap();
    let mut cache = LatentCache::default();
    let first = evaluate_trials(&model, &list, &corpus, &mut rng(0), Some(&mut cache)).unwrap();
    let second = evaluate_trials(&model, &list, &corpus, &mut rng(0), Some(&mut cache)).unwrap();
    assert_eq!(plain, first);
    assert_eq!(plain, second);
    assert_eq!((cache.misses, cache.hits), (6, 6));
}

#[test]
fn random_pooling_repeats() {
    let model = small_model(Variant::Ce, PoolingMethod::Random);
    let mut rngs: Vec<ChaCha8Rng> = (0..4).map(rng).collect();
    let evs = evaluate_repeated(&model, &sample_trials(), &small_corpus(), &mut rngs, None).unwrap();
    assert_eq!(evs.len(), 4);
    assert!(evs.iter().all(|e| e.encoded_utterances == 6));
    assert_ne!(evs[0].scores, evs[1].scores);
}

#[test]
fn pair_scores_follow_trial_order() {
    let model = small_model(Variant::Bce, PoolingMethod::Mean);
    let corpus = small_corpus();
    let list = sample_trials();
    let ev = evaluate_trials(&model, &list, &corpus, &mut rng(0), None).unwrap();
    assert_eq!(ev.scores[0].score, ev.scores[4].score);
    // Same result when each trial is scored on its own.
    for (i, t) in list.trials.iter().enumerate().take(2) {
        let single = TrialList {
            trials: vec![t.clone(), list.trials[3 - i].clone()],
        };
        let e = evaluate_trials(&model, &single, &corpus, &mut rng(0), None).unwrap();
        assert!((e.scores[0].score - ev.scores[i].score).abs() < 1e-12);
    }
    // Reversing a pair only permutes attention keys.
    let swapped = trials(&[
        (TrialLabel::Same, "spk000-utt001", "spk000-utt000"),
        (TrialLabel::Different, "spk001-utt000", "spk000-utt000"),
    ]);
    let e = evaluate_trials(&model, &swapped, &corpus, &mut rng(0), None).unwrap();
    assert!((e.scores[0].score - ev.scores[0].score).abs() < 1e-9);
}

#[test]
fn missing_utterance_is_named() {
    let model = small_model(Variant::Ce, PoolingMethod::Mean);
    let list = trials(&[
        (TrialLabel::Same, "spk000-utt000", "nobody"),
        (TrialLabel::Different, "spk000-utt000", "spk001-utt000"),
    ]);
    let err = evaluate_trials(&model, &list, &small_corpus(), &mut rng(0), None).unwrap_err();
    assert!(err.to_string().contains("nobody"), "{err}");
}

#[test]
fn scores_file_format() {
    let s = vec![TrialScore {
        trial: Trial {
            label: TrialLabel::Same,
            a: "x".into(),
            b: "y".into(),
        },
        score: 0.25,
    }];
    assert_eq!(scores_text(&s), "0.25 x y\n");
    let e = compute_eer_from(&labelled(&[0.9], &[0.1])).unwrap();
    let r = report_text(&e);
    assert!(r.starts_with("eer 0.000000\n") && r.contains("same_trials 1"));
}
