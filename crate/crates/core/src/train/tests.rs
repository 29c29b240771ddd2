use std::collections::BTreeSet;

use super::*;
use crate::audio::{synthesize_corpus, Trial};
use crate::encoder::{MaskSpec, EXTRACTOR_PREFIX};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn corpus(speakers: usize, utts: usize) -> Corpus {
    Corpus::from_waveforms(synthesize_corpus(speakers, utts, 0.2, 3).unwrap()).unwrap()
}

fn small_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            conv_channels: 8,
            group_norm_groups: 8,
            model_dim: 16,
            ffn_dim: 32,
            heads: 2,
            pos_conv_kernel: 8,
            pos_conv_groups: 4,
            channel_mask: MaskSpec::OFF,
            ..EncoderConfig::tiny()
        },
        schedule: ScheduleKind::Constant { lr: 1e-3 },
        iterations: 4,
        files_per_batch: 4,
        crop_seconds: 0.15,
        pair_batch: PairBatchConfig {
            speakers: 3,
            utts_per_speaker: 2,
            same_pairs: 2,
            diff_pairs: 3,
        },
        ..TrainConfig::new(variant)
    }
}

fn trials(c: &Corpus) -> TrialList {
    let ids: Vec<(String, String)> = c
        .utterances()
        .iter()
        .map(|w| (w.utterance_id.clone(), w.speaker_id.clone().unwrap()))
        .collect();
    crate::audio::balanced_trials(&ids, 6, &mut rng(1))
}

#[test]
fn classification_batch_contract() {
    let c = corpus(6, 12);
    let cfg = TrainConfig {
        crop_seconds: 0.1,
        ..TrainConfig::default()
    };
    let classes = speaker_classes(&c);
    let b = make_classification_batch(&c, &classes, &cfg, &mut rng(4)).unwrap();
    let ids: BTreeSet<&str> = b.crops.iter().map(|x| x.waveform.utterance_id.as_str()).collect();
    assert_eq!(ids.len(), 66);
    assert!(b.targets.iter().all(|&t| t < 6));
    for (crop, &t) in b.crops.iter().zip(&b.targets) {
        assert_eq!(crop.waveform.speaker_id.as_deref(), Some(classes[t].as_str()));
        assert_eq!(crop.waveform.len(), 1600);
        let v = &crop.waveform.samples[..crop.valid_len];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-9);
    }
    assert_eq!(b, make_classification_batch(&c, &classes, &cfg, &mut rng(4)).unwrap());
    assert_eq!(b.to_wave_batch().unwrap().data.len(), 66 * 1600);
    let small = corpus(5, 13);
    assert!(make_classification_batch(&small, &speaker_classes(&small), &cfg, &mut rng(4)).is_err());
}

#[test]
fn sample_budget_default() {
    assert_eq!(TrainConfig::default().sample_budget(), 3_168_000);
}

#[test]
fn pair_batch_contract() {
    let c = corpus(10, 5);
    let cfg = TrainConfig::default();
    for seed in 0..20 {
        let b = make_pair_batch(&c, &cfg, &mut rng(seed)).unwrap();
        assert_eq!(b.crops.len(), 32);
        assert_eq!(b.pairs.len(), 32);
        let same = b.pairs.iter().filter(|p| p.2 == TrialLabel::Same).count();
        assert_eq!(same, 16);
        let mut per_speaker = BTreeMap::new();
        for crop in &b.crops {
            *per_speaker.entry(crop.waveform.speaker_id.clone()).or_insert(0) += 1;
        }
        assert_eq!(per_speaker.len(), 8);
        assert!(per_speaker.values().all(|&n| n == 4));
        let distinct: BTreeSet<&str> = b.crops.iter().map(|x| x.waveform.utterance_id.as_str()).collect();
        assert_eq!(distinct.len(), 32);
        let spk = |i: usize| b.crops[i].waveform.speaker_id.clone();
        let mut seen = BTreeSet::new();
        for &(a, bb, l) in &b.pairs {
            assert_ne!(a, bb);
            assert_eq!(spk(a) == spk(bb), l == TrialLabel::Same);
            assert!(seen.insert((a.min(bb), a.max(bb))), "pair repeated");
        }
        assert_eq!(b.labelled_pairs().len(), 32);
    }
    assert!(make_pair_batch(&corpus(7, 5), &cfg, &mut rng(0)).is_err());
    assert!(make_pair_batch(&corpus(10, 3), &cfg, &mut rng(0)).is_err());
}

#[test]
fn zero_iterations_returns_initial_checkpoint() {
    let c = corpus(3, 3);
    let cfg = TrainConfig {
        iterations: 0,
        ..small_cfg(Variant::Ce)
    };
    let out = train_run(&cfg, &c, None).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best.step, 0);
    assert_eq!(out.best.validation_eer, None);
    assert_eq!(out.best.parameters, init_model(&cfg, 3).unwrap().params);
}

#[test]
fn fully_frozen_step_changes_nothing() {
    let c = corpus(3, 3);
    let mut s = TrainingSession::new(&small_cfg(Variant::Ce), &c).unwrap();
    let names: Vec<String> = s.model.params.names().map(str::to_string).collect();
    for n in &names {
        s.model.params.freeze(n).unwrap();
    }
    let before = s.model.params.clone();
    s.step(1e-2).unwrap();
    assert_eq!(s.model.params, before);
}

#[test]
fn freeze_flag_respected_for_every_variant() {
    let c = corpus(4, 3);
    for variant in [Variant::Ce, Variant::Aam, Variant::Bce] {
        let mut s = TrainingSession::new(&small_cfg(variant), &c).unwrap();
        let before = s.model.params.clone();
        for _ in 0..2 {
            s.step(1e-2).unwrap();
        }
        for (name, t) in s.model.params.iter() {
            let same = before.get(name).unwrap() == t;
            if name.starts_with(EXTRACTOR_PREFIX) {
                assert!(same, "{variant:?}: {name} changed");
            }
        }
        let changed = s.model.params.iter().filter(|(n, t)| before.get(n).unwrap() != *t).count();
        assert!(changed > 0, "{variant:?}");
        // Every utterance is 0.2 s and crops are 0.15 s, so nothing is whole.
        assert_eq!(s.cache.len(), 0);
    }
}

#[test]
fn unfrozen_extractor_trains() {
    let c = corpus(3, 3);
    let cfg = run_ablation(&small_cfg(Variant::Ce), "unfrozen_extractor").unwrap();
    let mut s = TrainingSession::new(&cfg, &c).unwrap();
    let before = s.model.params.clone();
    s.step(1e-2).unwrap();
    let w = "feature_extractor.conv_layers.0.conv.weight";
    assert!(before.get(w).is_some());
    assert_ne!(before.get(w), s.model.params.get(w));
}

#[test]
fn whole_utterance_crops_use_the_cache() {
    let c = corpus(3, 3);
    let cfg = TrainConfig {
        crop_seconds: 0.2,
        ..small_cfg(Variant::Ce)
    };
    let mut cached = TrainingSession::new(&cfg, &c).unwrap();
    let mut uncached = TrainingSession::new(&cfg, &c).unwrap();
    for _ in 0..3 {
        let a = cached.step(1e-3).unwrap();
        uncached.cache = LatentCache::default();
        let b = uncached.step(1e-3).unwrap();
        assert_eq!(a, b);
    }
    assert!(cached.cache.hits > 0);
    assert_eq!(cached.model.params, uncached.model.params);
}

#[test]
fn runs_are_deterministic_and_best_is_monotone() {
    let c = corpus(4, 4);
    let list = trials(&c);
    let v = Validation {
        corpus: &c,
        trials: &list,
    };
    let cfg = TrainConfig {
        iterations: 6,
        validation_interval: Some(2),
        ..small_cfg(Variant::Aam)
    };
    let a = train_run(&cfg, &c, Some(v)).unwrap();
    let b = train_run(&cfg, &c, Some(v)).unwrap();
    assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
    assert_eq!(a, b);
    let eers: Vec<(usize, f64)> = a.log.iter().filter_map(|r| r.validation_eer.map(|e| (r.step, e))).collect();
    assert_eq!(eers.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4, 6]);
    let min = eers.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let first_min = eers.iter().find(|e| e.1 == min).unwrap().0;
    assert_eq!(a.best.validation_eer, Some(min));
    assert_eq!(a.best.step, first_min);
    assert_eq!(a.last.step, 6);
    let text = metrics_csv(&a.log);
    assert!(text.starts_with("step,loss,lr,validation_eer\n1,"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn divergence_stops_the_run() {
    let c = corpus(3, 3);
    let cfg = TrainConfig {
        schedule: ScheduleKind::Constant { lr: 1e300 },
        iterations: 20,
        ..small_cfg(Variant::Ce)
    };
    let out = train_run(&cfg, &c, None).unwrap();
    let at = out.diverged_at.expect("diverges");
    assert_eq!(out.log.len(), at);
    assert!(!out.log.last().unwrap().loss.is_finite());
    assert!(out.log[..at - 1].iter().all(|r| r.loss.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_fingerprint() {
    let c = corpus(3, 3);
    let cfg = small_cfg(Variant::Ce);
    let out = train_run(&cfg, &c, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.last.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert!(loaded.parameters.iter().eq(out.last.parameters.iter()));
    assert_eq!(loaded.optimizer, out.last.optimizer);
    assert_eq!(
        (loaded.step, loaded.validation_eer, &loaded.fingerprint, loaded.classes),
        (4, None, &out.last.fingerprint, 3)
    );
    let model = loaded.model(&cfg).unwrap();
    assert_eq!(model.params, out.last.parameters);
    assert!(model.extractor_frozen());
    let other = TrainConfig {
        encoder: EncoderConfig {
            layers: 1,
            ..cfg.encoder.clone()
        },
        ..cfg.clone()
    };
    let err = loaded.model(&other).unwrap_err();
    assert!(err.to_string().contains("fingerprint"), "{err}");
    // Training-only keys leave the fingerprint alone.
    let relaxed = TrainConfig {
        iterations: 9,
        pooling: PoolingMethod::Random,
        ..cfg.clone()
    };
    assert_eq!(fingerprint(&relaxed), fingerprint(&cfg));
}

#[test]
fn init_weights_are_loaded() {
    let c = corpus(3, 3);
    let cfg = small_cfg(Variant::Ce);
    let donor = init_model(&TrainConfig { seed: 77, ..cfg.clone() }, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_weights(&donor.params, dir.path()).unwrap();
    let with = TrainConfig {
        init_weights: Some(dir.path().to_path_buf()),
        ..cfg.clone()
    };
    let m = init_model(&with, 3).unwrap();
    let plain = init_model(&cfg, 3).unwrap();
    for (name, t) in m.params.iter() {
        if name.starts_with("head.") {
            assert_eq!(Some(t), plain.params.get(name));
        } else {
            assert_eq!(Some(t), donor.params.get(name), "{name}");
        }
    }
    let _ = c;
}

#[test]
fn ablations_change_documented_fields() {
    let base = TrainConfig {
        init_weights: Some("pretrained".into()),
        ..TrainConfig::default()
    };
    let d = run_ablation(&base, "batch_double_50k").unwrap();
    assert_eq!((d.files_per_batch, d.iterations), (132, 50_000));
    assert_eq!(TrainConfig { files_per_batch: 66, iterations: 100_000, ..d }, base);
    let h = run_ablation(&base, "batch_half_200k").unwrap();
    assert_eq!((h.files_per_batch, h.iterations), (33, 200_000));
    let n = run_ablation(&base, "no_layerdrop").unwrap();
    assert_eq!(n.encoder.layerdrop_p, 0.0);
    assert_eq!(TrainConfig { encoder: base.encoder.clone(), ..n }, base);
    let t = run_ablation(&base, "lr_tri_stage").unwrap();
    let spec = t.schedule_spec().unwrap();
    assert_eq!(spec.lr_at(10_000).unwrap(), 1e-5);
    assert_eq!(run_ablation(&base, "random_init").unwrap().init_weights, None);
    let err = run_ablation(&base, "bogus").unwrap_err().to_string();
    for name in ablation_names() {
        assert!(err.contains(name));
        run_ablation(&base, name).unwrap().validate().unwrap();
    }
}

#[test]
fn training_split_excludes_trial_utterances() {
    let c = corpus(3, 4);
    let list = TrialList {
        trials: vec![Trial {
            label: TrialLabel::Same,
            a: "spk000-utt000".into(),
            b: "spk000-utt001".into(),
        }],
    };
    let t = training_split(&c, &[&list]);
    assert_eq!(t.len(), 10);
    assert!(t.get("spk000-utt000").is_err());
}

#[test]
fn range_objective_runs_a_short_sweep() {
    let c = corpus(3, 3);
    let mut s = TrainingSession::new(&small_cfg(Variant::Ce), &c).unwrap();
    let cfg = crate::schedule::RangeTestConfig {
        steps: 5,
        lr_min: 1e-6,
        lr_max: 1e-2,
        smoothing: 0.9,
    };
    let r = crate::schedule::lr_range_test(&mut s, &cfg).unwrap();
    assert_eq!(r.curve.len(), 5);
    assert_eq!(s.adam.step, 5);
}
