//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GksError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many coordinates per parameter (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    /// Coordinate of the worst error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the probe crossed a non-differentiable point.
    pub kinks: Vec<usize>,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.failed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kink_count(&self) -> usize {
        self.params.iter().map(|p| p.kinks.len()).sum()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(forward: &F, params: &[Tensor]) -> Result<(f64, Vec<i64>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(GksError::NonFinite("loss during gradient check".into()));
    }
    Ok((v, tape.branch_signature()))
}

/// Compares the tape gradient of `forward` against central differences with
/// the default options and the given step and tolerance.
pub fn grad_check<F>(forward: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(
        forward,
        params,
        &GradCheckOptions {
            step,
            tol,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    forward: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(GksError::Config(format!("step must be positive, got {}", opts.step)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(grads);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        tol: opts.tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, p) in params.iter().enumerate() {
        let mut coords: Vec<usize> = match opts.max_entries {
            Some(k) if k < p.len() => sample(&mut rng, p.len(), k).into_vec(),
            _ => (0..p.len()).collect(),
        };
        coords.sort_unstable();
        let mut check = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            kinks: Vec::new(),
            failed: false,
        };
        for &c in &coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&forward, &work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&forward, &work)?;
            work[pi].data_mut()[c] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.kinks.push(c);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = rel_error(analytic[pi].data()[c], numeric);
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = Some(c);
            }
        }
        check.failed = check.max_rel_error > opts.tol;
        report.params.push(check);
    }
    Ok(report)
}
