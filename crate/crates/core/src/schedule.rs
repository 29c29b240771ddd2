//! Adam, learning-rate schedules and the learning-rate range test.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParameterStore;

/// Peak learning rates found for the three variants.
pub const REFERENCE_LR_CE: f64 = 9e-5;
pub const REFERENCE_LR_AAM: f64 = 5e-5;
pub const REFERENCE_LR_BCE: f64 = 3e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("adam.eps = {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("adam.weight_decay = {} must be non-negative", self.weight_decay));
        }
        out
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Frozen parameters and parameters without
/// a gradient entry are left untouched. A non-finite gradient rejects the
/// whole step: nothing is modified and the offending entry is reported.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &AdamConfig,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = store.get(name) else {
            return Err(Error::invalid(format!("gradient for unknown parameter '{name}'")));
        };
        if p.len() != g.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of '{name}'"),
                index: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in grads {
        if store.is_frozen(name) {
            continue;
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let p = store.get_mut(name).expect("checked above").data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            p[i] -= lr * (update + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Constant {
        lr: f64,
    },
    ExponentialDecay {
        lr_start: f64,
        lr_end: f64,
    },
    OneCycle {
        max_lr: f64,
        warmup_fraction: f64,
        start_div: f64,
        final_div: f64,
    },
    TriStage {
        lr_floor_init: f64,
        lr_peak: f64,
        lr_floor_final: f64,
        warmup_steps: usize,
        hold_steps: usize,
    },
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant { .. } => "constant",
            ScheduleKind::ExponentialDecay { .. } => "exponential_decay",
            ScheduleKind::OneCycle { .. } => "one_cycle",
            ScheduleKind::TriStage { .. } => "tri_stage",
        }
    }

    pub fn one_cycle(max_lr: f64) -> Self {
        ScheduleKind::OneCycle {
            max_lr,
            warmup_fraction: 0.1,
            start_div: 25.0,
            final_div: 1e4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        let spec = Self { kind, total_steps };
        let problems = spec.problems();
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("schedule.{name} = {v} must be positive"));
            }
        };
        match self.kind {
            ScheduleKind::Constant { lr } => positive("lr", lr),
            ScheduleKind::ExponentialDecay { lr_start, lr_end } => {
                positive("lr_start", lr_start);
                positive("lr_end", lr_end);
            }
            ScheduleKind::OneCycle {
                max_lr,
                warmup_fraction,
                start_div,
                final_div,
            } => {
                positive("max_lr", max_lr);
                positive("start_div", start_div);
                positive("final_div", final_div);
                if !(0.0..1.0).contains(&warmup_fraction) {
                    out.push(format!(
                        "schedule.warmup_fraction = {warmup_fraction} outside [0, 1)"
                    ));
                }
            }
            ScheduleKind::TriStage {
                lr_floor_init,
                lr_peak,
                lr_floor_final,
                warmup_steps,
                hold_steps,
            } => {
                positive("lr_floor_init", lr_floor_init);
                positive("lr_peak", lr_peak);
                positive("lr_floor_final", lr_floor_final);
                if self.total_steps > 0 && warmup_steps + hold_steps >= self.total_steps {
                    out.push(format!(
                        "schedule.warmup_steps + schedule.hold_steps = {} leaves no decay stage in {} steps",
                        warmup_steps + hold_steps,
                        self.total_steps
                    ));
                }
            }
        }
        out
    }

    /// Learning rate at `step`, for `0 <= step < total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let last = self.total_steps - 1;
        Ok(match self.kind {
            ScheduleKind::Constant { lr } => lr,
            ScheduleKind::ExponentialDecay { lr_start, lr_end } => {
                if step == 0 {
                    lr_start
                } else if step == last {
                    lr_end
                } else {
                    lr_start * (lr_end / lr_start).powf(step as f64 / last as f64)
                }
            }
            ScheduleKind::OneCycle {
                max_lr,
                warmup_fraction,
                start_div,
                final_div,
            } => {
                let warm = ((warmup_fraction * self.total_steps as f64).round() as usize).min(last);
                let (start, end) = (max_lr / start_div, max_lr / final_div);
                if step < warm {
                    start + (max_lr - start) * step as f64 / warm as f64
                } else if step == warm {
                    max_lr
                } else {
                    let p = (step - warm) as f64 / (last - warm) as f64;
                    end + (max_lr - end) * 0.5 * (1.0 + (PI * p).cos())
                }
            }
            ScheduleKind::TriStage {
                lr_floor_init,
                lr_peak,
                lr_floor_final,
                warmup_steps,
                hold_steps,
            } => {
                if step < warmup_steps {
                    lr_floor_init + (lr_peak - lr_floor_init) * step as f64 / warmup_steps as f64
                } else if step < warmup_steps + hold_steps {
                    lr_peak
                } else if step == last {
                    lr_floor_final
                } else {
                    let decay = last.saturating_sub(warmup_steps + hold_steps).max(1);
                    let p = (step - warmup_steps - hold_steps) as f64 / decay as f64;
                    lr_peak * (lr_floor_final / lr_peak).powf(p)
                }
            }
        })
    }
}

/// One step of a training process driven by the range test: apply one
/// update at `lr` and return the loss measured for that step.
pub trait RangeObjective {
    fn step(&mut self, step: usize, lr: f64) -> Result<f64>;
}

impl<F: FnMut(usize, f64) -> Result<f64>> RangeObjective for F {
    fn step(&mut self, step: usize, lr: f64) -> Result<f64> {
        self(step, lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeTestConfig {
    pub steps: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Exponential moving average factor for the loss.
    pub smoothing: f64,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr_min: 1e-7,
            lr_max: 1e-1,
            smoothing: 0.98,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangePoint {
    pub step: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RangeSuggestion {
    Found {
        suggested_lr: f64,
        /// Learning rates where the smoothed loss started and stopped
        /// decreasing around the steepest point.
        lower: f64,
        upper: f64,
        grid: [f64; 7],
    },
    NoDescent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeTestResult {
    pub curve: Vec<RangePoint>,
    pub suggestion: RangeSuggestion,
    /// Step at which the loss became non-finite and the sweep stopped.
    pub diverged_at: Option<usize>,
}

impl RangeTestResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("step,lr,raw_loss,smoothed_loss\n");
        for p in &self.curve {
            text.push_str(&format!(
                "{},{:e},{},{}\n",
                p.step, p.lr, p.raw_loss, p.smoothed_loss
            ));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if n == 1 {
                a
            } else {
                a * (b / a).powf(i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// `[lower, 2 points, center, 2 points, upper]`, log-spaced on each side.
pub fn seven_point_grid(lower: f64, center: f64, upper: f64) -> [f64; 7] {
    let left = log_space(lower, center, 4);
    let right = log_space(center, upper, 4);
    [left[0], left[1], left[2], center, right[1], right[2], right[3]]
}

/// Bias-corrected exponential moving average.
pub fn smooth(losses: &[f64], beta: f64) -> Vec<f64> {
    let mut avg = 0.0;
    losses
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            avg = beta * avg + (1.0 - beta) * l;
            avg / (1.0 - beta.powi(k as i32 + 1))
        })
        .collect()
}

/// Central-difference slope of `ln(smoothed)` against `ln(lr)`; the two end
/// points have none.
pub fn log_slopes(curve: &[RangePoint]) -> Vec<Option<f64>> {
    let ln = |v: f64| v.max(f64::MIN_POSITIVE).ln();
    (0..curve.len())
        .map(|k| {
            if k == 0 || k + 1 >= curve.len() {
                return None;
            }
            let (a, b) = (&curve[k - 1], &curve[k + 1]);
            Some((ln(b.smoothed_loss) - ln(a.smoothed_loss)) / (b.lr.ln() - a.lr.ln()))
        })
        .collect()
}

/// Picks the steepest descent of a smoothed curve and the surrounding
/// region of decreasing loss.
pub fn suggest(curve: &[RangePoint]) -> RangeSuggestion {
    let slopes = log_slopes(curve);
    let Some((star, _)) = slopes
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.filter(|s| *s < 0.0).map(|s| (k, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
    else {
        return RangeSuggestion::NoDescent;
    };
    let descending = |k: usize| slopes[k].is_some_and(|s| s < 0.0);
    let mut lo = star;
    while lo > 0 && descending(lo - 1) {
        lo -= 1;
    }
    let mut hi = star;
    while hi + 1 < curve.len() && descending(hi + 1) {
        hi += 1;
    }
    let (lower, center, upper) = (curve[lo].lr, curve[star].lr, curve[hi].lr);
    RangeSuggestion::Found {
        suggested_lr: center,
        lower,
        upper,
        grid: seven_point_grid(lower, center, upper),
    }
}

/// Sweeps the learning rate log-linearly from `lr_min` to `lr_max` over
/// `steps` updates of a freshly initialised objective. A non-finite loss
/// ends the sweep; the curve up to that point is kept.
pub fn lr_range_test<O: RangeObjective + ?Sized>(
    objective: &mut O,
    cfg: &RangeTestConfig,
) -> Result<RangeTestResult> {
    if cfg.steps < 3 || !(cfg.lr_min > 0.0) || !(cfg.lr_max > cfg.lr_min) {
        return Err(Error::invalid(
            "range test needs at least 3 steps and 0 < lr_min < lr_max",
        ));
    }
    if !(0.0..1.0).contains(&cfg.smoothing) {
        return Err(Error::invalid("range test smoothing must lie in [0, 1)"));
    }
    let lrs = log_space(cfg.lr_min, cfg.lr_max, cfg.steps);
    let mut raw = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for (k, &lr) in lrs.iter().enumerate() {
        let loss = objective.step(k, lr)?;
        if !loss.is_finite() {
            diverged_at = Some(k);
            break;
        }
        raw.push(loss);
    }
    let smoothed = smooth(&raw, cfg.smoothing);
    let curve: Vec<RangePoint> = raw
        .iter()
        .zip(&smoothed)
        .enumerate()
        .map(|(k, (&r, &s))| RangePoint {
            step: k,
            lr: lrs[k],
            raw_loss: r,
            smoothed_loss: s,
        })
        .collect();
    let suggestion = suggest(&curve);
    Ok(RangeTestResult {
        curve,
        suggestion,
        diverged_at,
    })
}
