//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, coordinate)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn scalar_output<F>(op: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), track))
        .collect();
    let out = op(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape {
            op: "gradient_check",
            lhs: tape.shape(out).to_vec(),
            rhs: vec![1],
        });
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar `op` against central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(op: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = scalar_output(&op, inputs, true)?;
    if let Some(i) = tape.value(out).first_non_finite() {
        return Err(Error::NonFinite {
            context: "gradient_check output".into(),
            index: i,
        });
    }
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: cfg.tolerance,
    };
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = scalar_output(&op, probe, false)?;
        Ok(tape.value(out).data()[0])
    };
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        if let Some(j) = analytic.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of input {i}"),
                index: j,
            });
        }
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut probe = inputs.to_vec();
        for j in coords {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("numeric gradient of input {i}"),
                    index: j,
                });
            }
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
