//! Run configuration as flat `key = value` text with dotted section names.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys and malformed values are errors, reported all at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::heads::{AamSpec, Variant};
use crate::pooling::PoolingMethod;
use crate::schedule::{AdamConfig, RangeTestConfig, ScheduleKind};
use crate::train::{reference_lr, PairBatchConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Corpus directory holding `manifest.tsv`.
    pub corpus: Option<PathBuf>,
    pub validation_trials: Option<PathBuf>,
    pub test_trials: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Evaluate on the first `x` seconds of each utterance instead of the
    /// whole utterance.
    pub eval_crop_seconds: Option<f64>,
    pub range_test: RangeTestConfig,
}

fn schedule_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "constant" => &["schedule.lr"],
        "exponential_decay" => &["schedule.lr_start", "schedule.lr_end"],
        "one_cycle" => &[
            "schedule.max_lr",
            "schedule.warmup_fraction",
            "schedule.start_div",
            "schedule.final_div",
        ],
        "tri_stage" => &[
            "schedule.lr_floor_init",
            "schedule.lr_peak",
            "schedule.lr_floor_final",
            "schedule.warmup_steps",
            "schedule.hold_steps",
        ],
        _ => &[],
    }
}

const ALL_SCHEDULE_KINDS: [&str; 4] = ["constant", "exponential_decay", "one_cycle", "tri_stage"];

/// Every key that does not depend on the schedule kind, in output order.
pub const KEYS: &[&str] = &[
    "variant",
    "pooling",
    "seed",
    "iterations",
    "files_per_batch",
    "crop_seconds",
    "validation_interval",
    "init_weights",
    "pair_batch.speakers",
    "pair_batch.utts_per_speaker",
    "pair_batch.same_pairs",
    "pair_batch.diff_pairs",
    "encoder.conv_channels",
    "encoder.conv_kernels",
    "encoder.conv_strides",
    "encoder.group_norm_groups",
    "encoder.model_dim",
    "encoder.ffn_dim",
    "encoder.layers",
    "encoder.heads",
    "encoder.pos_conv_kernel",
    "encoder.pos_conv_groups",
    "encoder.dropout_p",
    "encoder.layerdrop_p",
    "encoder.time_mask.prob",
    "encoder.time_mask.span",
    "encoder.channel_mask.prob",
    "encoder.channel_mask.span",
    "encoder.freeze_feature_extractor",
    "encoder.cls_token",
    "encoder.layer_norm_eps",
    "schedule.kind",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "adam.weight_decay",
    "aam.scale",
    "aam.margin",
    "corpus",
    "validation_trials",
    "test_trials",
    "out",
    "eval.crop_seconds",
    "range_test.steps",
    "range_test.lr_min",
    "range_test.lr_max",
    "range_test.smoothing",
];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Every key with its value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let e = &t.encoder;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("variant", t.variant.name().into());
        put("pooling", t.pooling.name().into());
        put("seed", t.seed.to_string());
        put("iterations", t.iterations.to_string());
        put("files_per_batch", t.files_per_batch.to_string());
        put("crop_seconds", t.crop_seconds.to_string());
        put(
            "validation_interval",
            t.validation_interval.map_or("auto".into(), |v| v.to_string()),
        );
        put("init_weights", path_text(&t.init_weights));
        put("pair_batch.speakers", t.pair_batch.speakers.to_string());
        put("pair_batch.utts_per_speaker", t.pair_batch.utts_per_speaker.to_string());
        put("pair_batch.same_pairs", t.pair_batch.same_pairs.to_string());
        put("pair_batch.diff_pairs", t.pair_batch.diff_pairs.to_string());
        put("encoder.conv_channels", e.conv_channels.to_string());
        put("encoder.conv_kernels", list(&e.conv_kernels));
        put("encoder.conv_strides", list(&e.conv_strides));
        put("encoder.group_norm_groups", e.group_norm_groups.to_string());
        put("encoder.model_dim", e.model_dim.to_string());
        put("encoder.ffn_dim", e.ffn_dim.to_string());
        put("encoder.layers", e.layers.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.pos_conv_kernel", e.pos_conv_kernel.to_string());
        put("encoder.pos_conv_groups", e.pos_conv_groups.to_string());
        put("encoder.dropout_p", e.dropout_p.to_string());
        put("encoder.layerdrop_p", e.layerdrop_p.to_string());
        put("encoder.time_mask.prob", e.time_mask.prob.to_string());
        put("encoder.time_mask.span", e.time_mask.span.to_string());
        put("encoder.channel_mask.prob", e.channel_mask.prob.to_string());
        put("encoder.channel_mask.span", e.channel_mask.span.to_string());
        put("encoder.freeze_feature_extractor", e.freeze_feature_extractor.to_string());
        put("encoder.cls_token", e.cls_token.to_string());
        put("encoder.layer_norm_eps", e.layer_norm_eps.to_string());
        put("schedule.kind", t.schedule.name().into());
        match t.schedule {
            ScheduleKind::Constant { lr } => put("schedule.lr", lr.to_string()),
            ScheduleKind::ExponentialDecay { lr_start, lr_end } => {
                put("schedule.lr_start", lr_start.to_string());
                put("schedule.lr_end", lr_end.to_string());
            }
            ScheduleKind::OneCycle {
                max_lr,
                warmup_fraction,
                start_div,
                final_div,
            } => {
                put("schedule.max_lr", max_lr.to_string());
                put("schedule.warmup_fraction", warmup_fraction.to_string());
                put("schedule.start_div", start_div.to_string());
                put("schedule.final_div", final_div.to_string());
            }
            ScheduleKind::TriStage {
                lr_floor_init,
                lr_peak,
                lr_floor_final,
                warmup_steps,
                hold_steps,
            } => {
                put("schedule.lr_floor_init", lr_floor_init.to_string());
                put("schedule.lr_peak", lr_peak.to_string());
                put("schedule.lr_floor_final", lr_floor_final.to_string());
                put("schedule.warmup_steps", warmup_steps.to_string());
                put("schedule.hold_steps", hold_steps.to_string());
            }
        }
        put("adam.beta1", t.adam.beta1.to_string());
        put("adam.beta2", t.adam.beta2.to_string());
        put("adam.eps", t.adam.eps.to_string());
        put("adam.weight_decay", t.adam.weight_decay.to_string());
        put("aam.scale", t.aam.scale.to_string());
        put("aam.margin", t.aam.margin.to_string());
        put("corpus", path_text(&self.corpus));
        put("validation_trials", path_text(&self.validation_trials));
        put("test_trials", path_text(&self.test_trials));
        put("out", path_text(&self.out));
        put(
            "eval.crop_seconds",
            self.eval_crop_seconds.map_or("none".into(), |v| v.to_string()),
        );
        put("range_test.steps", self.range_test.steps.to_string());
        put("range_test.lr_min", self.range_test.lr_min.to_string());
        put("range_test.lr_max", self.range_test.lr_max.to_string());
        put("range_test.smoothing", self.range_test.smoothing.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses config text. Keys left out take their defaults; relative
    /// paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected 'key = value'", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                problems.push(format!("line {}: '{k}' set twice", i + 1));
            }
        }
        let mut r = Reader {
            entries,
            problems,
            base_dir,
        };
        let cfg = r.build();
        r.finish(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, abs.parent().unwrap_or(Path::new("/")))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems();
        if let Some(s) = self.eval_crop_seconds {
            if !(s > 0.0) {
                p.push(format!("eval.crop_seconds = {s} must be positive"));
            }
        }
        let r = &self.range_test;
        if r.steps < 3 || !(r.lr_min > 0.0) || !(r.lr_max > r.lr_min) {
            p.push("range_test needs steps >= 3 and 0 < lr_min < lr_max".into());
        }
        if !(0.0..1.0).contains(&r.smoothing) {
            p.push(format!("range_test.smoothing = {} outside [0, 1)", r.smoothing));
        }
        p
    }
}

/// Keys whose values differ between two configs, including keys present
/// in only one of them.
pub fn changed_keys(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let a: BTreeMap<String, String> = a.to_pairs().into_iter().collect();
    let b: BTreeMap<String, String> = b.to_pairs().into_iter().collect();
    let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.retain(|k| a.get(k) != b.get(k));
    keys
}

struct Reader<'a> {
    entries: BTreeMap<String, (usize, String)>,
    problems: Vec<String>,
    base_dir: &'a Path,
}

impl Reader<'_> {
    fn take<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>, what: &str) -> Option<T> {
        let (line, v) = self.entries.remove(key)?;
        let parsed = parse(&v);
        if parsed.is_none() {
            self.problems.push(format!("line {line}: {key} = '{v}' is not {what}"));
        }
        parsed
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T, what: &str) {
        if let Some(v) = self.take(key, |s| s.parse().ok(), what) {
            *slot = v;
        }
    }

    fn set_path(&mut self, key: &str, slot: &mut Option<PathBuf>) {
        let base = self.base_dir.to_path_buf();
        if let Some(v) = self.take(
            key,
            |s| {
                Some(match s {
                    "none" | "" => None,
                    p => Some(base.join(p)),
                })
            },
            "a path",
        ) {
            *slot = v;
        }
    }

    fn set_list(&mut self, key: &str, slot: &mut Vec<usize>) {
        let parse = |s: &str| s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<Vec<usize>>>();
        if let Some(v) = self.take(key, parse, "a comma-separated list of counts") {
            *slot = v;
        }
    }

    fn number(&mut self, key: &str, default: f64) -> f64 {
        self.take(key, |s| s.parse().ok(), "a number").unwrap_or(default)
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        self.take(key, |s| s.parse().ok(), "a count").unwrap_or(default)
    }

    fn build(&mut self) -> RunConfig {
        let variant = self
            .take("variant", |s| s.parse::<Variant>().ok(), "one of ce, aam, bce")
            .unwrap_or(Variant::Aam);
        let mut c = RunConfig {
            train: TrainConfig::new(variant),
            ..RunConfig::default()
        };
        let t = &mut c.train;
        if let Some((line, v)) = self.entries.remove("pooling") {
            match v.parse::<PoolingMethod>() {
                Ok(p) => t.pooling = p,
                Err(e) => self.problems.push(format!("line {line}: {e}")),
            }
        }
        self.set("seed", &mut t.seed, "an unsigned integer");
        self.set("iterations", &mut t.iterations, "a count");
        self.set("files_per_batch", &mut t.files_per_batch, "a count");
        self.set("crop_seconds", &mut t.crop_seconds, "a number");
        if let Some(v) = self.take(
            "validation_interval",
            |s| match s {
                "auto" => Some(None),
                n => n.parse().ok().map(Some),
            },
            "'auto' or a count",
        ) {
            t.validation_interval = v;
        }
        self.set_path("init_weights", &mut t.init_weights);
        let pb: &mut PairBatchConfig = &mut t.pair_batch;
        self.set("pair_batch.speakers", &mut pb.speakers, "a count");
        self.set("pair_batch.utts_per_speaker", &mut pb.utts_per_speaker, "a count");
        self.set("pair_batch.same_pairs", &mut pb.same_pairs, "a count");
        self.set("pair_batch.diff_pairs", &mut pb.diff_pairs, "a count");
        let e: &mut EncoderConfig = &mut t.encoder;
        self.set("encoder.conv_channels", &mut e.conv_channels, "a count");
        self.set_list("encoder.conv_kernels", &mut e.conv_kernels);
        self.set_list("encoder.conv_strides", &mut e.conv_strides);
        self.set("encoder.group_norm_groups", &mut e.group_norm_groups, "a count");
        self.set("encoder.model_dim", &mut e.model_dim, "a count");
        self.set("encoder.ffn_dim", &mut e.ffn_dim, "a count");
        self.set("encoder.layers", &mut e.layers, "a count");
        self.set("encoder.heads", &mut e.heads, "a count");
        self.set("encoder.pos_conv_kernel", &mut e.pos_conv_kernel, "a count");
        self.set("encoder.pos_conv_groups", &mut e.pos_conv_groups, "a count");
        self.set("encoder.dropout_p", &mut e.dropout_p, "a number");
        self.set("encoder.layerdrop_p", &mut e.layerdrop_p, "a number");
        let (tm, cm): (&mut MaskSpec, &mut MaskSpec) = (&mut e.time_mask, &mut e.channel_mask);
        self.set("encoder.time_mask.prob", &mut tm.prob, "a number");
        self.set("encoder.time_mask.span", &mut tm.span, "a count");
        self.set("encoder.channel_mask.prob", &mut cm.prob, "a number");
        self.set("encoder.channel_mask.span", &mut cm.span, "a count");
        self.set("encoder.freeze_feature_extractor", &mut e.freeze_feature_extractor, "true or false");
        self.set("encoder.cls_token", &mut e.cls_token, "true or false");
        self.set("encoder.layer_norm_eps", &mut e.layer_norm_eps, "a number");
        t.schedule = self.schedule(variant, t.iterations);
        let a: &mut AdamConfig = &mut t.adam;
        self.set("adam.beta1", &mut a.beta1, "a number");
        self.set("adam.beta2", &mut a.beta2, "a number");
        self.set("adam.eps", &mut a.eps, "a number");
        self.set("adam.weight_decay", &mut a.weight_decay, "a number");
        let m: &mut AamSpec = &mut t.aam;
        self.set("aam.scale", &mut m.scale, "a number");
        self.set("aam.margin", &mut m.margin, "a number");
        self.set_path("corpus", &mut c.corpus);
        self.set_path("validation_trials", &mut c.validation_trials);
        self.set_path("test_trials", &mut c.test_trials);
        self.set_path("out", &mut c.out);
        if let Some(v) = self.take(
            "eval.crop_seconds",
            |s| match s {
                "none" => Some(None),
                n => n.parse().ok().map(Some),
            },
            "'none' or a number",
        ) {
            c.eval_crop_seconds = v;
        }
        let r = &mut c.range_test;
        self.set("range_test.steps", &mut r.steps, "a count");
        self.set("range_test.lr_min", &mut r.lr_min, "a number");
        self.set("range_test.lr_max", &mut r.lr_max, "a number");
        self.set("range_test.smoothing", &mut r.smoothing, "a number");
        c
    }

    fn schedule(&mut self, variant: Variant, iterations: usize) -> ScheduleKind {
        let kind = self
            .take(
                "schedule.kind",
                |s| ALL_SCHEDULE_KINDS.contains(&s).then(|| s.to_string()),
                "one of constant, exponential_decay, one_cycle, tri_stage",
            )
            .unwrap_or_else(|| "one_cycle".into());
        for other in ALL_SCHEDULE_KINDS.iter().filter(|k| **k != kind) {
            for key in schedule_keys(other) {
                if schedule_keys(&kind).contains(key) {
                    continue;
                }
                if let Some((line, _)) = self.entries.remove(*key) {
                    self.problems
                        .push(format!("line {line}: {key} does not apply to schedule.kind = {kind}"));
                }
            }
        }
        let lr = reference_lr(variant);
        match kind.as_str() {
            "constant" => ScheduleKind::Constant {
                lr: self.number("schedule.lr", lr),
            },
            "exponential_decay" => ScheduleKind::ExponentialDecay {
                lr_start: self.number("schedule.lr_start", 1e-5),
                lr_end: self.number("schedule.lr_end", 3e-6),
            },
            "tri_stage" => ScheduleKind::TriStage {
                lr_floor_init: self.number("schedule.lr_floor_init", 1e-7),
                lr_peak: self.number("schedule.lr_peak", 1e-5),
                lr_floor_final: self.number("schedule.lr_floor_final", 1e-7),
                warmup_steps: self.count("schedule.warmup_steps", iterations / 10),
                hold_steps: self.count("schedule.hold_steps", iterations * 2 / 5),
            },
            _ => {
                let ScheduleKind::OneCycle {
                    warmup_fraction,
                    start_div,
                    final_div,
                    ..
                } = ScheduleKind::one_cycle(lr)
                else {
                    unreachable!()
                };
                ScheduleKind::OneCycle {
                    max_lr: self.number("schedule.max_lr", lr),
                    warmup_fraction: self.number("schedule.warmup_fraction", warmup_fraction),
                    start_div: self.number("schedule.start_div", start_div),
                    final_div: self.number("schedule.final_div", final_div),
                }
            }
        }
    }

    fn finish(mut self, cfg: RunConfig) -> Result<RunConfig> {
        for (key, (line, _)) in std::mem::take(&mut self.entries) {
            self.problems.push(format!("line {line}: unknown key '{key}'"));
        }
        self.problems.extend(cfg.problems());
        if self.problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(self.problems))
        }
    }
}

#[cfg(test)]
mod tests;
