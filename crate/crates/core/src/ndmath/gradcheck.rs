use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndmath::{Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at h = 1e-5 carry roundoff near 1e-11, so the floor sits well
/// above that.
const ABS_FLOOR: f64 = 1e-4;

/// Outcome of comparing autodiff gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Checks every element of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_indices(&f, inputs, &all, eps, tol)
}

/// Checks at most `per_input` seeded-random elements of each input.
pub fn gradcheck_subset<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let k = per_input.min(t.len());
            let mut idx = sample(&mut rng, t.len(), k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_indices(&f, inputs, &picks, eps, tol)
}

fn check_indices<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    picks: &[Vec<usize>],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        tolerance: tol,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, idx) in picks.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient").data().to_vec();
        for &j in idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
