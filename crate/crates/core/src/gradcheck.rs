//! Central finite-difference checks of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Options for [`finite_diff_check_many`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    /// Floor added to the relative-error denominator.
    pub tiny: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            max_coords: None,
            tiny: 1e-6,
            seed: 0,
        }
    }
}

/// Relative discrepancy used by all checks.
pub fn relative_error(analytic: f64, numeric: f64, tiny: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + tiny)
}

/// Max relative error between the analytic gradient of `f` at `point` and
/// central differences with the given step, over every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheck {
        step,
        ..GradCheck::default()
    };
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), &opts)
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Multi-input variant: every tensor in `points` is a trainable leaf.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor<f64>], opts: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 || opts.step.is_nan() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut worst = 0.0f64;
    for (which, p) in points.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < p.len() => sample(&mut rng, p.len(), m).into_vec(),
            _ => (0..p.len()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[which].data_mut()[i] = orig + opts.step;
            let up = evaluate(&f, &work)?;
            work[which].data_mut()[i] = orig - opts.step;
            let down = evaluate(&f, &work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[which].data()[i];
            worst = worst.max(relative_error(a, numeric, opts.tiny));
        }
    }
    Ok(worst)
}
