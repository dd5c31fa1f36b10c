//! Finite-difference checks of every differentiable building block, from
//! single layers up to the toy pipeline and its training objective.

use diffcore::rng::{seeded, standard_normal, uniform, SeededRng};
use diffcore::{grad_check, DiffError, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};
use rayon::prelude::*;
use serde::Serialize;

use crate::crf::{shipped_basis, CurveOps, EmorBasis};
use crate::error::{Error, Result};
use crate::features::FeatureOps;
use crate::nets::{
    overexposure_mask, pipeline_graph, BundleBinding, HeadInits, ModelBundle, Net, NetConfig,
};
use crate::objectives::{
    loss_l2, loss_log_l2, loss_perceptual, loss_total, loss_tv, tone_map_mu, LossWeights,
    PerceptualExtractor, Predictions, Targets, LOG_EPS, MU,
};

pub const TOL: f64 = 1e-4;
pub const TOL_COMPOSITE: f64 = 1e-3;
const EPS: f64 = 1e-5;

type Inputs = Box<dyn Fn(&mut SeededRng) -> Vec<Tensor> + Sync>;
type Func = Box<dyn Fn(&mut Graph, &[Var]) -> diffcore::Result<Var> + Sync>;

struct Case {
    name: &'static str,
    tol: f64,
    /// Smallest relative-error denominator.
    floor: f64,
    coords: usize,
    /// Checks input 0 plus this many other inputs drawn per point.
    sample_inputs: Option<usize>,
    inputs: Inputs,
    f: Func,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub tol: f64,
    pub points: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol
    }
}

fn lift<T>(r: Result<T>) -> diffcore::Result<T> {
    r.map_err(|e| match e {
        Error::Diff(d) => d,
        other => DiffError::domain("hdrev", other.to_string()),
    })
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| standard_normal(rng)).collect()).expect("shape")
}

fn unif(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| lo + (hi - lo) * uniform(rng)).collect(),
    )
    .expect("shape")
}

/// Redraws entries closer than `10 * EPS` to any kink.
fn away(
    mut t: Tensor,
    kinks: &[f64],
    rng: &mut SeededRng,
    redraw: impl Fn(&mut SeededRng) -> f64,
) -> Tensor {
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < 10.0 * EPS) {
            *v = redraw(rng);
        }
    }
    t
}

fn randn_away(shape: &[usize], kinks: &[f64], rng: &mut SeededRng) -> Tensor {
    away(randn(shape, rng), kinks, rng, standard_normal)
}

/// Strictly increasing curve from 0 to 1 with random steps, `(n, d)`.
fn random_curves(n: usize, d: usize, rng: &mut SeededRng) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let steps: Vec<f64> = (1..d).map(|_| 0.2 + uniform(rng)).collect();
        let total: f64 = steps.iter().sum();
        let mut acc = 0.0;
        data.push(0.0);
        for s in &steps {
            acc += s / total;
            data.push(acc);
        }
        *data.last_mut().expect("d > 1") = 1.0;
    }
    Tensor::new(&[n, d], data).expect("shape")
}

/// Intensities in (0, 1) away from the histogram bin centres and the
/// curve-sampling grid of `d` points.
fn intensities(shape: &[usize], d: usize, rng: &mut SeededRng) -> Tensor {
    let mut kinks: Vec<f64> = (0..d).map(|i| i as f64 / (d - 1) as f64).collect();
    for b in [4usize, 8, 16] {
        kinks.extend((0..b).map(|k| (k as f64 + 0.5) / b as f64));
    }
    away(unif(shape, 0.02, 0.98, rng), &kinks, rng, |r| {
        0.02 + 0.96 * uniform(r)
    })
}

fn case(name: &'static str, inputs: Inputs, f: Func) -> Case {
    Case {
        name,
        tol: TOL,
        floor: 1e-6,
        coords: 12,
        sample_inputs: None,
        inputs,
        f,
    }
}

fn layer_cases() -> Vec<Case> {
    let s = [2, 2, 3, 3];
    vec![
        case(
            "conv2d",
            Box::new(|r| {
                vec![
                    randn(&[2, 3, 6, 5], r),
                    randn(&[4, 3, 3, 3], r),
                    randn(&[4], r),
                ]
            }),
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1)),
        ),
        case(
            "conv2d_stride2",
            Box::new(|r| {
                vec![
                    randn(&[1, 2, 6, 6], r),
                    randn(&[3, 2, 3, 3], r),
                    randn(&[3], r),
                ]
            }),
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
        ),
        case(
            "dense",
            Box::new(|r| vec![randn(&[2, 6], r), randn(&[6, 3], r), randn(&[3], r)]),
            Box::new(|g, v| g.dense(v[0], v[1], v[2])),
        ),
        case(
            "leaky_relu",
            Box::new(move |r| vec![randn_away(&s, &[0.0], r)]),
            Box::new(|g, v| g.leaky_relu(v[0], 0.1)),
        ),
        case(
            "relu",
            Box::new(move |r| vec![randn_away(&s, &[0.0], r)]),
            Box::new(|g, v| g.relu(v[0])),
        ),
        case(
            "tanh",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.tanh(v[0])),
        ),
        case(
            "clamp",
            Box::new(move |r| vec![randn_away(&s, &[0.0, 1.0], r)]),
            Box::new(|g, v| g.clamp(v[0], 0.0, 1.0)),
        ),
        case(
            "log_clamped",
            Box::new(move |r| vec![randn(&s, r).map(|x| x.abs() + 0.05)]),
            Box::new(|g, v| g.log_clamped(v[0], LOG_EPS)),
        ),
        case(
            "scale",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.scale(v[0], -2.5)),
        ),
        case(
            "add_scalar",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.add_scalar(v[0], 0.3)),
        ),
        case(
            "add",
            Box::new(move |r| vec![randn(&s, r), randn(&s, r)]),
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        case(
            "sub",
            Box::new(move |r| vec![randn(&s, r), randn(&s, r)]),
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        case(
            "mul",
            Box::new(move |r| vec![randn(&s, r), randn(&s, r)]),
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        case(
            "concat",
            Box::new(|r| vec![randn(&[2, 1, 3, 3], r), randn(&[2, 2, 3, 3], r)]),
            Box::new(|g, v| g.concat(&[v[0], v[1]])),
        ),
        case(
            "slice_channels",
            Box::new(|r| vec![randn(&[2, 3, 4, 4], r)]),
            Box::new(|g, v| g.slice_channels(v[0], 1, 2)),
        ),
        case(
            "upsample_nearest",
            Box::new(|r| vec![randn(&[1, 2, 3, 2], r)]),
            Box::new(|g, v| g.upsample_nearest(v[0])),
        ),
        case(
            "avg_pool2",
            Box::new(|r| vec![randn(&[1, 2, 5, 4], r)]),
            Box::new(|g, v| g.avg_pool2(v[0])),
        ),
        case(
            "global_avg_pool",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.global_avg_pool(v[0])),
        ),
        case(
            "mean",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.mean(v[0])),
        ),
        case(
            "sum",
            Box::new(move |r| vec![randn(&s, r)]),
            Box::new(|g, v| g.sum(v[0])),
        ),
        case(
            "mse",
            Box::new(move |r| vec![randn(&s, r), randn(&s, r)]),
            Box::new(|g, v| g.mse(v[0], v[1])),
        ),
    ]
}

fn curve_feature_cases() -> Vec<Case> {
    vec![
        case(
            "project_monotone",
            Box::new(|r| {
                // a valid curve plus noise that creates a few decreasing steps
                let mut t = random_curves(2, 12, r);
                for v in t.data_mut() {
                    *v += 0.03 * standard_normal(r);
                }
                vec![t]
            }),
            Box::new(|g, v| g.project_monotone(v[0])),
        ),
        case(
            "apply_curve",
            Box::new(|r| vec![intensities(&[1, 3, 4, 4], 16, r), random_curves(1, 16, r)]),
            Box::new(|g, v| g.apply_curve(v[0], v[1])),
        ),
        case(
            "sobel",
            Box::new(|r| vec![randn(&[1, 3, 5, 4], r)]),
            Box::new(|g, v| g.sobel(v[0])),
        ),
        case(
            "soft_histogram_4",
            Box::new(|r| vec![intensities(&[1, 3, 4, 4], 2, r)]),
            Box::new(|g, v| g.soft_histogram(v[0], 4)),
        ),
        case(
            "soft_histogram_8",
            Box::new(|r| vec![intensities(&[1, 3, 4, 4], 2, r)]),
            Box::new(|g, v| g.soft_histogram(v[0], 8)),
        ),
        case(
            "soft_histogram_16",
            Box::new(|r| vec![intensities(&[1, 3, 4, 4], 2, r)]),
            Box::new(|g, v| g.soft_histogram(v[0], 16)),
        ),
        case(
            "feature_stack",
            Box::new(|r| vec![intensities(&[1, 3, 4, 4], 2, r)]),
            Box::new(|g, v| g.feature_stack(v[0])),
        ),
        case(
            "overexposure_mask",
            Box::new(|r| {
                let t = unif(&[1, 3, 4, 4], 0.5, 1.5, r);
                vec![away(t, &[0.95], r, |r| 0.5 + uniform(r))]
            }),
            Box::new(|g, v| lift(overexposure_mask(g, v[0], 0.95))),
        ),
    ]
}

fn positive(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    unif(shape, 0.05, 3.0, rng)
}

/// Images whose neighbouring differences stay well away from zero.
fn stepped(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let mut t = randn(shape, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = 0.1 * *v + (i * i % 7) as f64;
    }
    t
}

fn loss_cases() -> Vec<Case> {
    let s = [1, 3, 8, 8];
    vec![
        case(
            "tone_map_mu",
            Box::new(move |r| vec![positive(&s, r)]),
            Box::new(|g, v| lift(tone_map_mu(g, v[0], MU))),
        ),
        case(
            "loss_l2",
            Box::new(move |r| vec![randn(&s, r), randn(&s, r)]),
            Box::new(|g, v| lift(loss_l2(g, v[0], v[1]))),
        ),
        case(
            "loss_log_l2",
            Box::new(move |r| vec![positive(&s, r), positive(&s, r)]),
            Box::new(|g, v| lift(loss_log_l2(g, v[0], v[1], LOG_EPS))),
        ),
        case(
            "loss_tv",
            Box::new(|r| vec![stepped(&[1, 3, 4, 5], r)]),
            Box::new(|g, v| lift(loss_tv(g, v[0]))),
        ),
        Case {
            tol: TOL_COMPOSITE,
            ..case(
                "loss_perceptual",
                Box::new(move |r| vec![positive(&s, r), positive(&s, r)]),
                Box::new(|g, v| {
                    lift(loss_perceptual(
                        g,
                        v[0],
                        v[1],
                        &PerceptualExtractor::default(),
                    ))
                }),
            )
        },
        Case {
            tol: TOL_COMPOSITE,
            coords: 4,
            ..case(
                "loss_total",
                Box::new(move |r| {
                    vec![
                        unif(&s, 0.0, 1.0, r),
                        random_curves(1, 16, r),
                        unif(&s, 0.0, 1.0, r),
                        positive(&s, r),
                        unif(&s, 0.0, 1.0, r),
                        random_curves(1, 16, r),
                        unif(&s, 0.0, 1.0, r),
                        positive(&s, r),
                    ]
                }),
                Box::new(|g, v| {
                    let pred = Predictions {
                        deq: Some(v[0]),
                        curve: Some(v[1]),
                        lin: Some(v[2]),
                        hdr: Some(v[3]),
                    };
                    let tgt = Targets {
                        i_n: Some(v[4]),
                        curve: Some(v[5]),
                        i_c: Some(v[6]),
                        h: Some(v[7]),
                    };
                    let w = LossWeights::default();
                    lift(
                        loss_total(g, &pred, &tgt, &w, &PerceptualExtractor::default())
                            .map(|(l, _)| l),
                    )
                }),
            )
        },
    ]
}

/// A toy bundle over a small basis (so the curve is cheap) with every head
/// randomised; `v` holds the image followed by the parameters of all nets.
fn bundle_for(seed: u64) -> ModelBundle {
    let basis = small_basis();
    let heads = HeadInits {
        deq: crate::nets::HeadInit::Scaled(0.05),
        lin: crate::nets::HeadInit::Scaled(0.1),
        hal: crate::nets::HeadInit::Scaled(0.5),
        refine: crate::nets::HeadInit::Scaled(0.1),
    };
    ModelBundle::init(NetConfig::toy(), basis, heads, seed).expect("toy config is valid")
}

fn small_basis() -> EmorBasis {
    // every 64th sample of the shipped basis, endpoints kept
    let b = shipped_basis();
    let idx: Vec<usize> = (0..b.d()).step_by(64).chain([b.d() - 1]).collect();
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    EmorBasis::new(pick(&b.mean), b.vectors.iter().map(|v| pick(v)).collect())
        .expect("subsampled basis")
}

/// The image followed by every parameter. Exact zeros from saturated
/// pixels meeting zero biases would put pre-activations on a ReLU kink,
/// where a symmetric stencil cannot see it, so the image stays inside
/// `(0.15, 0.85)` and the parameters are jittered.
fn pipeline_inputs(seed: u64, rng: &mut SeededRng) -> Vec<Tensor> {
    let bundle = bundle_for(seed);
    let img = intensities(&[1, 3, 8, 8], bundle.basis.d(), rng).map(|x| 0.15 + 0.7 * x);
    let mut v = vec![img];
    for net in Net::ALL {
        for p in bundle.params(net).values() {
            let jitter = randn(p.shape(), rng);
            v.push(p.zip_map(&jitter, |a, b| a + 0.05 * b));
        }
    }
    v
}

fn bind_all(bundle: &ModelBundle, v: &[Var]) -> diffcore::Result<BundleBinding> {
    let mut at = 0;
    let mut next = |net: Net| {
        let p = bundle.params(net);
        let b = p.bind_vars(&v[at..at + p.len()]);
        at += p.len();
        b
    };
    Ok(BundleBinding {
        deq: next(Net::Deq)?,
        lin: next(Net::Lin)?,
        hal: next(Net::Hal)?,
        refine: next(Net::Ref)?,
    })
}

fn pipeline_cases() -> Vec<Case> {
    let structure = bundle_for(0);
    let s2 = structure.clone();
    vec![
        Case {
            tol: TOL_COMPOSITE,
            coords: 1,
            sample_inputs: Some(4),
            ..case(
                "toy_pipeline",
                Box::new(|r| {
                    let seed = r.next_seed();
                    pipeline_inputs(seed, r)
                }),
                Box::new(move |g, v| {
                    let b = bind_all(&structure, &v[1..])?;
                    let out = lift(pipeline_graph(g, v[0], &structure, &b, true))?;
                    Ok(out.refined.expect("refinement requested"))
                }),
            )
        },
        Case {
            tol: TOL_COMPOSITE,
            // gradients below this are under the resolution of a central
            // difference of the full objective
            floor: 1e-5,
            coords: 1,
            sample_inputs: Some(4),
            ..case(
                "toy_pipeline_loss",
                Box::new(|r| {
                    let seed = r.next_seed();
                    let mut v = pipeline_inputs(seed, r);
                    let d = small_basis().d();
                    v.push(intensities(&[1, 3, 8, 8], d, r));
                    v.push(random_curves(1, d, r));
                    v.push(intensities(&[1, 3, 8, 8], d, r));
                    v.push(positive(&[1, 3, 8, 8], r));
                    v
                }),
                Box::new(move |g, v| {
                    let n = v.len();
                    let b = bind_all(&s2, &v[1..n - 4])?;
                    let out = lift(pipeline_graph(g, v[0], &s2, &b, false))?;
                    let pred = Predictions {
                        deq: Some(out.deq),
                        curve: Some(out.curve),
                        lin: Some(out.lin),
                        hdr: Some(out.hdr),
                    };
                    let tgt = Targets {
                        i_n: Some(v[n - 4]),
                        curve: Some(v[n - 3]),
                        i_c: Some(v[n - 2]),
                        h: Some(v[n - 1]),
                    };
                    let (l, _) = lift(loss_total(
                        g,
                        &pred,
                        &tgt,
                        &LossWeights::default(),
                        &PerceptualExtractor::default(),
                    ))?;
                    Ok(l)
                }),
            )
        },
    ]
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for SeededRng {
    fn next_seed(&mut self) -> u64 {
        (uniform(self) * (1u64 << 52) as f64) as u64
    }
}

fn all_cases() -> Vec<Case> {
    let mut v = layer_cases();
    v.extend(curve_feature_cases());
    v.extend(loss_cases());
    v.extend(pipeline_cases());
    v
}

pub fn case_names() -> Vec<&'static str> {
    all_cases().iter().map(|c| c.name).collect()
}

fn run_case(c: &Case, points: u64, seed: u64) -> diffcore::Result<CaseResult> {
    let salt = c
        .name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let reports = (0..points)
        .into_par_iter()
        .map(|p| {
            let mut rng = seeded(seed ^ salt ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let inputs = (c.inputs)(&mut rng);
            let selected = c.sample_inputs.map(|k| {
                let mut sel = vec![0];
                while sel.len() < (k + 1).min(inputs.len()) {
                    let i = 1
                        + ((uniform(&mut rng) * (inputs.len() - 1) as f64) as usize)
                            .min(inputs.len() - 2);
                    if !sel.contains(&i) {
                        sel.push(i);
                    }
                }
                sel
            });
            let cfg = GradCheckConfig {
                eps: EPS,
                floor: c.floor,
                coords_per_input: Some(c.coords),
                inputs: selected,
                seed: seed ^ p,
                ..Default::default()
            };
            grad_check(|g, v| (c.f)(g, v), &inputs, &cfg)
        })
        .collect::<diffcore::Result<Vec<_>>>()?;
    let mut total = GradCheckReport::default();
    for r in &reports {
        total.merge(r);
    }
    Ok(CaseResult {
        name: c.name,
        tol: c.tol,
        points,
        max_rel_err: total.max_rel_err,
        checked: total.checked,
        kinks: total.kinks,
    })
}

/// Runs every case whose name contains `filter` over `points` seeded
/// input draws.
pub fn run_suite(points: u64, seed: u64, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    all_cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_case(c, points, seed).map_err(Error::from))
        .collect()
}
