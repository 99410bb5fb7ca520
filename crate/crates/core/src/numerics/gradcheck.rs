use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Combine steps `h` and `h/2` as `(4·D(h/2) − D(h)) / 3`, cancelling the
    /// second-order truncation term; `h` shrinks from `eps` when estimates at
    /// neighbouring steps disagree (a kink inside the stencil).
    pub richardson: bool,
    /// Coordinates sampled per parameter (all of them when the parameter is smaller).
    pub samples_per_param: usize,
    /// Relative errors are computed against `max(|analytic|, |numeric|, floor)`
    /// so that coordinates with vanishing gradient do not divide by zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            richardson: true,
            samples_per_param: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn min_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).min().unwrap_or(0)
    }
}

fn eval<F>(loss_fn: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    Ok(value)
}

/// Compare tape gradients of `loss_fn` with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` (optionally Richardson-extrapolated) on a random
/// subsample of coordinates of every parameter.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { params: Vec::new() };
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let zero = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        let mut check = ParamCheck {
            index: pi,
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &c in &coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = work[pi].data()[c];
                work[pi].data_mut()[c] = orig + h;
                let up = eval(&loss_fn, &work);
                work[pi].data_mut()[c] = orig - h;
                let down = eval(&loss_fn, &work);
                work[pi].data_mut()[c] = orig;
                Ok((up? - down?) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                // Richardson estimates at h and h/2 agree on smooth stretches;
                // a ReLU kink inside the stencil breaks that, so shrink the step.
                let mut h = opts.eps;
                let (mut d1, mut d2) = (central(h)?, central(h / 2.0)?);
                loop {
                    let d4 = central(h / 4.0)?;
                    let (r1, r2) = ((4.0 * d2 - d1) / 3.0, (4.0 * d4 - d2) / 3.0);
                    if (r1 - r2).abs() <= 1e-9 + 1e-6 * r2.abs() || h < opts.eps * 1e-3 {
                        break r2;
                    }
                    h /= 10.0;
                    (d1, d2) = (central(h)?, central(h / 2.0)?);
                }
            } else {
                central(opts.eps)?
            };
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        report.params.push(check);
    }
    Ok(report)
}
