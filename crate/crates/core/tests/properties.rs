use diffcore::rng::{seeded, uniform};
use diffcore::Graph;
use hdrev_core::crf::{
    apply_curve, invert_curve, project_monotone, reconstruct_inverse_crf, shipped_basis, CrfCurve,
};
use hdrev_core::features::{feature_stack, sobel_edges, soft_histogram, FEATURE_CHANNELS};
use hdrev_core::forward::{add_sensor_noise, quantize8, NoiseParams};
use hdrev_core::imagio::HdrImage;
use hdrev_core::nets::{
    hallucinate_forward, unet_params, HeadInit, NetConfig, Preset, DEFAULT_GAMMA_THRESH,
};
use proptest::prelude::*;

fn random_image(seed: u64, h: usize, w: usize) -> HdrImage {
    let mut rng = seeded(seed);
    let data = (0..h * w * 3).map(|_| uniform(&mut rng)).collect();
    HdrImage::new(h, w, data).unwrap()
}

fn plane(t: &diffcore::Tensor, ch: usize, h: usize, w: usize) -> &[f64] {
    &t.data()[ch * h * w..(ch + 1) * h * w]
}

#[test]
fn transposing_swaps_the_sobel_directions() {
    let n = 9;
    let img = random_image(1, n, n);
    let t = HdrImage::from_fn(n, n, |y, x, c| img.pixel(x, y)[c]).unwrap();
    let a = sobel_edges(&img).unwrap();
    let b = sobel_edges(&t).unwrap();
    for c in 0..3 {
        let (ax, ay) = (plane(&a, c, n, n), plane(&a, 3 + c, n, n));
        let (bx, by) = (plane(&b, c, n, n), plane(&b, 3 + c, n, n));
        for y in 0..n {
            for x in 0..n {
                assert_eq!(bx[y * n + x], ay[x * n + y]);
                assert_eq!(by[y * n + x], ax[x * n + y]);
            }
        }
    }
}

#[test]
fn the_feature_stack_has_every_channel() {
    let t = feature_stack(&random_image(2, 4, 6)).unwrap();
    assert_eq!(t.shape(), &[1, FEATURE_CHANNELS, 4, 6]);
}

#[test]
fn the_residual_never_darkens_and_leaves_unsaturated_pixels_alone() {
    let cfg = NetConfig::for_preset(Preset::Toy);
    for seed in 0..5 {
        let p = unet_params(&cfg, 3, 3, HeadInit::Scaled(1.0), &mut seeded(seed));
        let img = random_image(100 + seed, 16, 16)
            .map(|v| 0.8 + 0.2 * v)
            .unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let y = hallucinate_forward(&mut g, x, &bound, &cfg, DEFAULT_GAMMA_THRESH).unwrap();
        let mut grew = false;
        for (&l, &h) in g.value(x).data().iter().zip(g.value(y).data()) {
            assert!(h - l >= 0.0);
            if l <= DEFAULT_GAMMA_THRESH {
                assert_eq!(h, l);
            }
            grew |= h > l;
        }
        assert!(grew, "seed {seed} produced no residual");
    }
}

#[test]
fn noise_never_goes_negative() {
    let img = HdrImage::constant(32, 32, 1e-4).unwrap();
    let p = NoiseParams {
        sigma_s: NoiseParams::SIGMA_S_MAX,
        sigma_c: NoiseParams::SIGMA_C_MAX,
        seed: 3,
    };
    let noisy = add_sensor_noise(&img, &p).unwrap();
    assert!(noisy.data().iter().all(|&v| v >= 0.0));
    assert!(noisy.data().iter().any(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projected_basis_curves_are_valid_and_fixed(w in prop::collection::vec(-3.0f64..3.0, 11)) {
        let raw = reconstruct_inverse_crf(&w, shipped_basis()).unwrap();
        let g = project_monotone(&raw).unwrap();
        let s = g.samples();
        prop_assert_eq!(s[0], 0.0);
        prop_assert_eq!(s[s.len() - 1], 1.0);
        prop_assert!(s.windows(2).all(|p| p[1] >= p[0]));
        prop_assert_eq!(project_monotone(s).unwrap(), g.clone());
    }

    #[test]
    fn curves_round_trip_through_their_inverse(gamma in 1.0f64..3.0, seed in any::<u64>()) {
        let g = CrfCurve::gamma(1024, gamma);
        let img = random_image(seed, 4, 4);
        let there = apply_curve(&img, &invert_curve(&g)).unwrap();
        let back = apply_curve(&there, &g).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 3.0 / 1024.0);
        }
    }

    /// Between the outermost bin centres every value splits into exactly two
    /// neighbouring bins.
    #[test]
    fn histogram_memberships_sum_to_one(u in 0.0f64..=1.0, bins in prop::sample::select(vec![4usize, 8, 16])) {
        let v = (0.5 + u * (bins - 1) as f64) / bins as f64;
        let t = soft_histogram(&HdrImage::constant(1, 1, v).unwrap(), bins).unwrap();
        for c in 0..3 {
            let sum: f64 = t.data()[c * bins..(c + 1) * bins].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(t.data()[c * bins..(c + 1) * bins].iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_code(seed in any::<u64>()) {
        let img = random_image(seed, 8, 8);
        let q = quantize8(&img).unwrap().unit_view();
        for (a, b) in img.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }
}
