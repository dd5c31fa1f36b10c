use diffcore::rng::{seeded, standard_normal, uniform, SeededRng};
use diffcore::{
    grad_check, AdamConfig, Checkpoint, DiffError, GradCheckConfig, GradCheckReport, Graph,
    ParamSet, Tensor, Var,
};
use proptest::prelude::*;

const POINTS: u64 = 100;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| standard_normal(rng)).collect()).unwrap()
}

/// Normal draws pushed at least `10 * EPS` away from every kink in `kinks`.
fn randn_away(shape: &[usize], kinks: &[f64], rng: &mut SeededRng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < 10.0 * EPS) {
            *v = standard_normal(rng);
        }
    }
    t
}

fn check_points<F, G>(name: &str, make_inputs: G, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> diffcore::Result<Var>,
    G: Fn(&mut SeededRng) -> Vec<Tensor>,
{
    let mut total = GradCheckReport::default();
    for point in 0..POINTS {
        let mut rng = seeded(point * 7919 + name.len() as u64);
        let inputs = make_inputs(&mut rng);
        let cfg = GradCheckConfig {
            seed: point,
            coords_per_input: Some(12),
            ..Default::default()
        };
        let r = grad_check(&f, &inputs, &cfg).unwrap();
        total.merge(&r);
    }
    assert!(
        total.max_rel_err < 1e-4,
        "{name}: max rel err {:.3e}",
        total.max_rel_err
    );
    assert_eq!(total.kinks, 0, "{name}: inputs were placed away from kinks");
    assert!(total.checked > 0);
    total
}

#[test]
fn leaky_relu_example() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, 0.1).unwrap();
    assert_eq!(g.value(y).data(), &[-0.1, 2.0]);
}

#[test]
fn identity_derivatives() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.7));
    let grads = g.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 1.0);

    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.tanh(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 1.0);
}

#[test]
fn conv_with_centre_kernel_is_identity() {
    let mut rng = seeded(3);
    let x = randn(&[2, 3, 5, 4], &mut rng);
    let mut k = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        k[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::new(&[3, 3, 3, 3], k).unwrap());
    let bv = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(xv, wv, bv, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_kernel_gradient_matches_direct_summation() {
    // d/dk sum(conv(x, k)) = sum over output positions of the padded window
    let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[1, 1, 4, 4], x.clone()).unwrap());
    let wv = g.variable(Tensor::zeros(&[1, 1, 3, 3]));
    let bv = g.variable(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, wv, bv, 1).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();

    let at = |r: i64, c: i64| x[(r.clamp(0, 3) * 4 + c.clamp(0, 3)) as usize];
    let mut expected = [0.0; 9];
    for ky in 0..3i64 {
        for kx in 0..3i64 {
            for r in 0..4i64 {
                for c in 0..4i64 {
                    expected[(ky * 3 + kx) as usize] += at(r + ky - 1, c + kx - 1);
                }
            }
        }
    }
    let got = grads.get(wv).unwrap().data();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{got:?} vs {expected:?}");
    }
    assert_eq!(grads.get(bv).unwrap().item(), 16.0);
}

#[test]
fn stride_two_halves_even_sizes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 6]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.conv2d(x, w, b, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 3]);
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    let err = g.conv2d(x, w, b, 1).unwrap_err();
    assert!(err.to_string().contains("conv2d"), "{err}");
    let err = err.in_layer("enc0.conv1");
    assert!(err.to_string().starts_with("enc0.conv1/conv2d"), "{err}");

    let a = g.constant(Tensor::zeros(&[3]));
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, c), Err(DiffError::Shape { .. })));
}

#[test]
fn backward_rejects_foreign_and_non_scalar_outputs() {
    let mut other = Graph::new();
    for _ in 0..5 {
        other.constant(Tensor::scalar(1.0));
    }
    let foreign = other.constant(Tensor::scalar(1.0));
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(foreign), Err(DiffError::UnknownVar(_))));
    assert!(matches!(g.backward(x), Err(DiffError::NonScalarOutput(_))));
}

#[test]
fn empty_graph_returns_inputs() {
    let mut g = Graph::new();
    let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let x = g.variable(t.clone());
    assert_eq!(g.value(x), &t);
    assert_eq!(g.len(), 1);
}

#[test]
fn gradcheck_dense_and_leaky_examples() {
    let mut rng = seeded(11);
    let inputs = vec![
        randn(&[3, 5], &mut rng),
        randn(&[5, 4], &mut rng),
        randn(&[4], &mut rng),
    ];
    let r = grad_check(
        |g, v| g.dense(v[0], v[1], v[2]),
        &inputs,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let r = grad_check(
        |g, v| g.leaky_relu(v[0], 0.1),
        &[Tensor::scalar(0.5)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn gradcheck_conv2d() {
    check_points(
        "conv3x3",
        |rng| {
            vec![
                randn(&[2, 3, 6, 5], rng),
                randn(&[4, 3, 3, 3], rng),
                randn(&[4], rng),
            ]
        },
        |g, v| g.conv2d(v[0], v[1], v[2], 1),
    );
    check_points(
        "conv3x3_stride2",
        |rng| {
            vec![
                randn(&[1, 2, 6, 6], rng),
                randn(&[3, 2, 3, 3], rng),
                randn(&[3], rng),
            ]
        },
        |g, v| g.conv2d(v[0], v[1], v[2], 2),
    );
    check_points(
        "conv1x1_stride2",
        |rng| {
            vec![
                randn(&[1, 2, 4, 6], rng),
                randn(&[3, 2, 1, 1], rng),
                randn(&[3], rng),
            ]
        },
        |g, v| g.conv2d(v[0], v[1], v[2], 2),
    );
}

#[test]
fn gradcheck_dense() {
    check_points(
        "dense",
        |rng| vec![randn(&[2, 6], rng), randn(&[6, 3], rng), randn(&[3], rng)],
        |g, v| g.dense(v[0], v[1], v[2]),
    );
}

#[test]
fn gradcheck_pointwise() {
    let shape = [2, 2, 3, 3];
    check_points(
        "leaky_relu",
        |r| vec![randn_away(&shape, &[0.0], r)],
        |g, v| g.leaky_relu(v[0], 0.1),
    );
    check_points(
        "relu",
        |r| vec![randn_away(&shape, &[0.0], r)],
        |g, v| g.relu(v[0]),
    );
    check_points("tanh", |r| vec![randn(&shape, r)], |g, v| g.tanh(v[0]));
    check_points("square", |r| vec![randn(&shape, r)], |g, v| g.square(v[0]));
    check_points(
        "abs",
        |r| vec![randn_away(&shape, &[0.0], r)],
        |g, v| g.abs(v[0]),
    );
    check_points(
        "log",
        |r| vec![randn(&shape, r).map(|x| x.abs() + 0.05)],
        |g, v| g.log_clamped(v[0], 1e-6),
    );
    check_points(
        "mu_law",
        |r| vec![randn(&shape, r).map(|x| x.abs())],
        |g, v| g.mu_law(v[0], 10.0),
    );
    check_points(
        "scale",
        |r| vec![randn(&shape, r)],
        |g, v| g.scale(v[0], -2.5),
    );
    check_points(
        "add_scalar",
        |r| vec![randn(&shape, r)],
        |g, v| g.add_scalar(v[0], 0.3),
    );
    check_points(
        "clamp",
        |r| vec![randn_away(&shape, &[0.0, 1.0], r)],
        |g, v| g.clamp(v[0], 0.0, 1.0),
    );
}

#[test]
fn gradcheck_binary_and_structural() {
    let shape = [2, 3, 4, 4];
    check_points(
        "add",
        |r| vec![randn(&shape, r), randn(&shape, r)],
        |g, v| g.add(v[0], v[1]),
    );
    check_points(
        "sub",
        |r| vec![randn(&shape, r), randn(&shape, r)],
        |g, v| g.sub(v[0], v[1]),
    );
    check_points(
        "mul",
        |r| vec![randn(&shape, r), randn(&shape, r)],
        |g, v| g.mul(v[0], v[1]),
    );
    check_points(
        "concat",
        |r| vec![randn(&[2, 1, 3, 3], r), randn(&[2, 2, 3, 3], r)],
        |g, v| g.concat(&[v[0], v[1]]),
    );
    check_points(
        "slice",
        |r| vec![randn(&shape, r)],
        |g, v| g.slice_channels(v[0], 1, 2),
    );
    check_points(
        "upsample",
        |r| vec![randn(&[1, 2, 3, 2], r)],
        |g, v| g.upsample_nearest(v[0]),
    );
    check_points(
        "avg_pool2",
        |r| vec![randn(&[1, 2, 5, 4], r)],
        |g, v| g.avg_pool2(v[0]),
    );
    check_points(
        "global_avg_pool",
        |r| vec![randn(&shape, r)],
        |g, v| g.global_avg_pool(v[0]),
    );
    check_points("mean", |r| vec![randn(&shape, r)], |g, v| g.mean(v[0]));
    check_points("sum", |r| vec![randn(&shape, r)], |g, v| g.sum(v[0]));
    check_points(
        "mse",
        |r| vec![randn(&shape, r), randn(&shape, r)],
        |g, v| g.mse(v[0], v[1]),
    );
    // neighbouring differences are O(1) apart, far from the |.| kink
    check_points(
        "total_variation",
        |r| {
            let mut t = randn(&[1, 1, 4, 5], r);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.1 * *v + (i * i % 7) as f64;
            }
            vec![t]
        },
        |g, v| g.total_variation(v[0]),
    );
}

#[test]
fn gradcheck_two_layer_stacks() {
    // Random conv -> tanh -> conv stacks: the tape result must agree with
    // finite differences through the composition.
    check_points(
        "conv_tanh_conv",
        |rng| {
            vec![
                randn(&[1, 2, 5, 5], rng),
                randn(&[3, 2, 3, 3], rng),
                randn(&[3], rng),
                randn(&[2, 3, 3, 3], rng),
                randn(&[2], rng),
            ]
        },
        |g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 1)?;
            let h = g.tanh(h)?;
            g.conv2d(h, v[3], v[4], 2)
        },
    );
    check_points(
        "dense_tanh_dense",
        |rng| {
            vec![
                randn(&[2, 4], rng),
                randn(&[4, 5], rng),
                randn(&[5], rng),
                randn(&[5, 2], rng),
                randn(&[2], rng),
            ]
        },
        |g, v| {
            let h = g.dense(v[0], v[1], v[2])?;
            let h = g.tanh(h)?;
            g.dense(h, v[3], v[4])
        },
    );
}

#[test]
fn kinks_are_detected_rather_than_compared() {
    let r = grad_check(
        |g, v| g.abs(v[0]),
        &[Tensor::scalar(2e-6)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(r.kinks, 1);
    assert_eq!(r.checked, 0);
}

fn one_param(value: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(value)).unwrap();
    p
}

#[test]
fn adam_zero_gradient_keeps_value_and_counts_step() {
    let mut p = one_param(1.5);
    p.adam_step(&[Tensor::scalar(0.0)], &AdamConfig::default())
        .unwrap();
    let w = p.get("w").unwrap();
    assert_eq!(w.value.item(), 1.5);
    assert_eq!(w.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    for g in [0.3, -2.0, 1e-3] {
        let mut p = one_param(0.0);
        let cfg = AdamConfig::with_lr(1e-4);
        p.adam_step(&[Tensor::scalar(g)], &cfg).unwrap();
        let expected = -1e-4 * g.signum();
        let got = p.get("w").unwrap().value.item();
        assert!((got - expected).abs() < 1e-4 * 1e-4, "{g}: {got}");
    }
}

#[test]
fn adam_is_deterministic() {
    let mut a = one_param(0.2);
    let mut b = a.clone();
    for step in 0..5 {
        let g = [Tensor::scalar(0.1 * step as f64 - 0.2)];
        a.adam_step(&g, &AdamConfig::default()).unwrap();
        b.adam_step(&g, &AdamConfig::default()).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn adam_rejects_non_finite_gradient_with_name() {
    let mut p = one_param(0.0);
    p.insert("bias", Tensor::scalar(0.0)).unwrap();
    let before = p.clone();
    let err = p
        .adam_step(
            &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            &AdamConfig::default(),
        )
        .unwrap_err();
    assert!(matches!(&err, DiffError::NonFiniteGradient(n) if n == "bias"));
    assert_eq!(p, before);
}

#[test]
fn bound_params_collect_gradients_in_order() {
    let mut set = ParamSet::new();
    set.insert("a", Tensor::scalar(2.0)).unwrap();
    set.insert("b", Tensor::scalar(3.0)).unwrap();
    set.insert("unused", Tensor::zeros(&[2])).unwrap();
    let mut g = Graph::new();
    let bound = set.bind(&mut g, true);
    let y = g
        .mul(bound.var("a").unwrap(), bound.var("b").unwrap())
        .unwrap();
    let grads = g.backward(y).unwrap();
    let collected = bound.collect(&g, &grads);
    assert_eq!(collected[0].item(), 3.0);
    assert_eq!(collected[1].item(), 2.0);
    assert_eq!(collected[2], Tensor::zeros(&[2]));
    assert!(matches!(bound.var("nope"), Err(DiffError::UnknownParam(_))));
}

#[test]
fn uniform_draws_stay_in_unit_interval() {
    let mut rng = seeded(5);
    assert!((0..1000)
        .map(|_| uniform(&mut rng))
        .all(|u| (0.0..1.0).contains(&u)));
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(
        dims in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let t = randn(&dims, &mut rng);
        let mut ckpt = Checkpoint::new();
        ckpt.push("t", t.clone()).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.get("t").unwrap(), &t);
    }
}

/// `a * b^2` with the factor of 2 missing from the gradient of `b`.
struct HalfWrong;

impl diffcore::Operation for HalfWrong {
    fn name(&self) -> &'static str {
        "half_wrong"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        Ok(inputs[0].zip_map(inputs[1], |a, b| a * b * b))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = b.zip_map(b, |x, y| x * y).zip_map(grad, |s, g| s * g);
        let gb = a.zip_map(b, |x, y| x * y).zip_map(grad, |s, g| s * g);
        vec![Some(ga), Some(gb)]
    }
}

#[test]
fn grad_check_skips_unselected_inputs() {
    let mut rng = seeded(9);
    let inputs = vec![randn(&[6], &mut rng), randn(&[6], &mut rng)];
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.apply(HalfWrong, &[v[0], v[1]])?;
        g.sum(y)
    };
    let all = grad_check(f, &inputs, &GradCheckConfig::default()).unwrap();
    assert!(all.max_rel_err > 0.1);
    assert_eq!(all.checked, 12);

    let cfg = GradCheckConfig {
        inputs: Some(vec![0]),
        ..GradCheckConfig::default()
    };
    let first = grad_check(f, &inputs, &cfg).unwrap();
    assert!(first.max_rel_err < 1e-6);
    assert_eq!(first.checked, 6);
}
