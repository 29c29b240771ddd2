use proptest::prelude::*;

use super::*;
use crate::train::{run_ablation, ABLATIONS};

fn here() -> &'static Path {
    Path::new("/cfg")
}

#[test]
fn empty_text_gives_defaults() {
    let c = RunConfig::parse("# nothing\n\n", here()).unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.train.schedule, ScheduleKind::one_cycle(5e-5));
}

#[test]
fn default_schedule_follows_variant() {
    let c = RunConfig::parse("variant = ce\n", here()).unwrap();
    assert_eq!(c.train.schedule, ScheduleKind::one_cycle(9e-5));
    let c = RunConfig::parse("variant = bce\nschedule.kind = constant\n", here()).unwrap();
    assert_eq!(c.train.schedule, ScheduleKind::Constant { lr: 3e-5 });
}

#[test]
fn text_round_trip_for_every_schedule() {
    let base = RunConfig {
        corpus: Some("/data/corpus".into()),
        eval_crop_seconds: Some(2.5),
        ..RunConfig::default()
    };
    for name in ["lr_constant_1e-5", "lr_exp_decay", "lr_tri_stage", "random_init"] {
        let c = RunConfig {
            train: run_ablation(&base.train, name).unwrap(),
            ..base.clone()
        };
        assert_eq!(RunConfig::parse(&c.to_text(), here()).unwrap(), c);
    }
    let keys: Vec<String> = base.to_pairs().into_iter().map(|p| p.0).filter(|k| !k.starts_with("schedule.") || k == "schedule.kind").collect();
    assert_eq!(keys, KEYS);
}

#[test]
fn relative_paths_resolve_against_config_dir() {
    let c = RunConfig::parse("corpus = data\nout = /abs\ninit_weights = none\n", here()).unwrap();
    assert_eq!(c.corpus, Some(PathBuf::from("/cfg/data")));
    assert_eq!(c.out, Some(PathBuf::from("/abs")));
    assert_eq!(c.train.init_weights, None);
}

#[test]
fn every_problem_is_reported() {
    let text = "\
variant = svm
encoder.model_dim = many
encoder.heads = 5
colour = blue
schedule.max_lr = 1e-3
schedule.kind = constant
iterations = 10
iterations = 20
garbage line
";
    let err = RunConfig::parse(text, here()).unwrap_err();
    let Error::Config(problems) = &err else {
        panic!("{err}")
    };
    let all = problems.join("\n");
    for needle in [
        "variant = 'svm'",
        "encoder.model_dim = 'many'",
        "unknown key 'colour'",
        "schedule.max_lr does not apply",
        "'iterations' set twice",
        "line 9: expected",
        "heads",
    ] {
        assert!(all.contains(needle), "missing {needle:?} in\n{all}");
    }
}

#[test]
fn invalid_pooling_lists_choices() {
    let err = RunConfig::parse("pooling = median\n", here()).unwrap_err().to_string();
    assert!(err.contains("mean+std") && err.contains("first+cls"), "{err}");
}

#[test]
fn ablations_differ_in_exactly_the_documented_keys() {
    let base = RunConfig {
        train: TrainConfig {
            init_weights: Some("/weights/pretrained".into()),
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    for (name, documented) in ABLATIONS {
        let c = RunConfig {
            train: run_ablation(&base.train, name).unwrap(),
            ..base.clone()
        };
        let changed = changed_keys(&base, &c);
        if documented == ["schedule.*"] {
            assert!(changed.iter().all(|k| k.starts_with("schedule.")), "{name}: {changed:?}");
            assert!(changed.contains(&"schedule.kind".to_string()), "{name}");
        } else {
            let mut d: Vec<String> = documented.iter().map(|s| s.to_string()).collect();
            d.sort();
            assert_eq!(changed, d, "{name}");
        }
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        0usize..3,
        0usize..9,
        any::<u64>(),
        0usize..1000,
        1usize..100,
        0.01f64..10.0,
        proptest::option::of(1usize..50),
        (0.0f64..0.9, 0.0f64..0.9, any::<bool>(), any::<bool>()),
        (1e-8f64..1e-2, 0usize..4),
    )
        .prop_map(|(v, p, seed, iterations, files, crop, interval, (drop, ld, freeze, cls), (lr, kind))| {
            let variant = [Variant::Ce, Variant::Aam, Variant::Bce][v];
            let mut t = TrainConfig::new(variant);
            t.pooling = PoolingMethod::ALL[p];
            t.encoder.cls_token = cls || t.pooling == PoolingMethod::FirstCls;
            t.seed = seed;
            t.iterations = iterations;
            t.files_per_batch = files;
            t.crop_seconds = crop;
            t.validation_interval = interval;
            t.encoder.dropout_p = drop;
            t.encoder.layerdrop_p = ld;
            t.encoder.freeze_feature_extractor = freeze;
            t.schedule = match kind {
                0 => ScheduleKind::Constant { lr },
                1 => ScheduleKind::ExponentialDecay { lr_start: lr, lr_end: lr / 3.0 },
                2 => ScheduleKind::one_cycle(lr),
                _ => ScheduleKind::TriStage {
                    lr_floor_init: lr / 100.0,
                    lr_peak: lr,
                    lr_floor_final: lr / 100.0,
                    warmup_steps: iterations / 10,
                    hold_steps: iterations / 3,
                },
            };
            RunConfig {
                train: t,
                ..RunConfig::default()
            }
        })
}

proptest! {
    #[test]
    fn resolved_text_reproduces_config(c in arb_config()) {
        let text = c.to_text();
        match RunConfig::parse(&text, here()) {
            Ok(parsed) => prop_assert_eq!(parsed, c),
            // Some sampled combinations are invalid; they must say so.
            Err(Error::Config(p)) => prop_assert!(!c.problems().is_empty(), "{:?}", p),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
