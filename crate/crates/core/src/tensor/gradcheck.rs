use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference probe settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input tensor; `None` probes all of them.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(input index, flat coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients of a scalar function against central finite
/// differences. The relative error of one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::dim("grad_check", "function must return a scalar"));
        }
        Ok(v.item())
    };

    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check probe point".into(),
        });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_probes {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(vars[i]);
        for c in coords {
            let x0 = input.data()[c];
            probe[i].data_mut()[c] = x0 + cfg.eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = x0 - cfg.eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !rel.is_finite() {
                return Err(Error::NonFinite {
                    context: "grad_check difference".into(),
                });
            }
            report.probes += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
