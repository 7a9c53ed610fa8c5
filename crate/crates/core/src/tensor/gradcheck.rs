use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared in absolute terms.
    pub floor: f64,
    /// Above this many coordinates a random subsample of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tol: 1e-4,
            floor: 1e-3,
            max_coords: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckWorst {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub total: usize,
    pub worst: Option<GradCheckWorst>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

/// Compares tape gradients of a scalar computation against central finite
/// differences, in double precision.
///
/// `f` receives a fresh finite-checked tape and one leaf per parameter, and
/// must return a single-element output.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    check_gradients_against(&f, |t, v, _| f(t, v), params, cfg)
}

/// Like [`check_gradients`], but the finite differences for parameter `i`
/// are taken of `reference(tape, vars, i)` instead of `f`.
///
/// Needed wherever the tape intentionally departs from the forward
/// function's derivative, as gradient reversal does: the reference then
/// spells out the objective each parameter group effectively descends.
pub fn check_gradients_against<F, G>(
    f: F,
    reference: G,
    params: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
    G: Fn(&mut Tape<f64>, &[Var], usize) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Tensor<f64>], which: usize| -> Result<f64, TensorError> {
        let mut tape = Tape::with_finite_checks();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let out = reference(&mut tape, &vars, which)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::with_finite_checks();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().zip(params).map(|(&v, p)| grads.wrt(v, p.numel())).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |c| (pi, c)))
        .collect();
    let total = coords.len();
    let chosen: Vec<(usize, usize)> = if total > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, total, cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst: Option<GradCheckWorst> = None;
    for &(pi, c) in &chosen {
        let orig = work[pi].data()[c];
        work[pi].data_mut()[c] = orig + cfg.eps;
        let plus = eval(&work, pi)?;
        work[pi].data_mut()[c] = orig - cfg.eps;
        let minus = eval(&work, pi)?;
        work[pi].data_mut()[c] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic[pi][c];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
            worst = Some(GradCheckWorst {
                param: pi,
                coord: c,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(GradCheckReport {
        checked: chosen.len(),
        total,
        worst,
        tol: cfg.tol,
    })
}
