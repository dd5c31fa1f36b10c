//! Finite-difference verification of recorded gradients.
//!
//! The function under test may return any shape; it is reduced to a scalar
//! by a fixed seeded projection `sum(r * y)` so every output element
//! contributes. Each checked coordinate is compared against a central
//! difference with step `eps`; a second difference with step `eps / 2`
//! flags coordinates whose stencil straddles a kink, and those are skipped
//! and counted instead of compared. The two stencils must disagree by more
//! than their floating-point round-off for a kink to be declared.

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::{seeded, standard_normal};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Relative disagreement between the two stencils that marks a kink.
    pub kink_tol: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub coords_per_input: Option<usize>,
    /// Indices of the inputs to check; `None` checks every input.
    pub inputs: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            kink_tol: 1e-6,
            coords_per_input: None,
            inputs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn projected<F>(
    f: &F,
    inputs: &[Tensor],
    proj: &mut Option<Tensor>,
    seed: u64,
) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let r = proj
        .get_or_insert_with(|| {
            let shape = g.shape(y).to_vec();
            let mut rng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
            let n: usize = shape.iter().product();
            Tensor::new(&shape, (0..n).map(|_| standard_normal(&mut rng)).collect()).expect("shape")
        })
        .clone();
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    let out = g.sum(prod)?;
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` at `inputs` with central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let (g, vars, out) = projected(&f, inputs, &mut proj, cfg.seed)?;
    let grads = g.backward(out)?;
    let f0 = g.value(out).item();
    // round-off of a central difference evaluated at |f0|
    let noise = 64.0 * f64::EPSILON * (f0.abs() + 1.0) / cfg.eps;

    let eval = |inputs: &[Tensor], proj: &mut Option<Tensor>| -> Result<f64> {
        let (g, _, out) = projected(&f, inputs, proj, cfg.seed)?;
        Ok(g.value(out).item())
    };

    let mut rng = seeded(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        if cfg.inputs.as_ref().is_some_and(|sel| !sel.contains(&i)) {
            continue;
        }
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        let n = inputs[i].len();
        let coords: Vec<usize> = match cfg.coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = inputs[i].data()[c];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[c] = x0 + h;
                let fp = eval(&work, &mut proj)?;
                work[i].data_mut()[c] = x0 - h;
                let fm = eval(&work, &mut proj)?;
                work[i].data_mut()[c] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let fd = central(cfg.eps)?;
            let fd_half = central(cfg.eps / 2.0)?;
            let spread = (fd - fd_half).abs();
            if spread > cfg.kink_tol * fd.abs().max(fd_half.abs()) + noise {
                report.kinks += 1;
                continue;
            }
            let err = relative_error(analytic.data()[c], fd, cfg.floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
