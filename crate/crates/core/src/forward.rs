//! Simulated camera: exposure, sensor noise, clipping, response curve and
//! 8-bit quantization, plus the over/under-exposure filter used when
//! building datasets.

use diffcore::rng::{seeded, standard_normal};
use serde::{Deserialize, Serialize};

use crate::crf::{apply_curve, invert_curve, CrfCurve};
use crate::error::{invalid, Result};
use crate::imagio::{HdrImage, LdrImage};

/// Poisson-Gaussian noise: variance `I * sigma_s^2 + sigma_c^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub const SIGMA_S_MAX: f64 = 0.013;
    pub const SIGMA_C_MAX: f64 = 0.005;

    pub fn none() -> Self {
        Self {
            sigma_s: 0.0,
            sigma_c: 0.0,
            seed: 0,
        }
    }

    /// Draws both deviations uniformly from their synthesis ranges.
    pub fn draw(rng: &mut diffcore::rng::SeededRng, seed: u64) -> Self {
        Self {
            sigma_s: diffcore::rng::uniform(rng) * Self::SIGMA_S_MAX,
            sigma_c: diffcore::rng::uniform(rng) * Self::SIGMA_C_MAX,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExposureGrid {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
    pub times: Vec<f64>,
}

/// `count` exposure times spaced uniformly in log2 between `lo` and `hi`.
pub fn exposure_grid(count: usize, lo: f64, hi: f64) -> Result<ExposureGrid> {
    if count < 2 {
        return Err(invalid!(
            "exposure grid needs at least 2 times, got {count}"
        ));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(invalid!(
            "exposure bounds must satisfy lo < hi, got [{lo}, {hi}]"
        ));
    }
    let step = (hi - lo) / (count - 1) as f64;
    let times = (0..count).map(|k| (lo + k as f64 * step).exp2()).collect();
    Ok(ExposureGrid {
        count,
        lo,
        hi,
        times,
    })
}

pub fn apply_exposure(e: &HdrImage, t: f64) -> Result<HdrImage> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid!("exposure time must be positive, got {t}"));
    }
    e.map(|v| v * t)
}

/// `min(H, 1)` per value.
pub fn clip_dynamic_range(h: &HdrImage) -> HdrImage {
    h.map(|v| v.min(1.0)).expect("clipping keeps values valid")
}

pub fn quantize8(img: &HdrImage) -> Result<LdrImage> {
    let mut bytes = Vec::with_capacity(img.data().len());
    for &v in img.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid!("quantize8 input {v} outside [0, 1]"));
        }
        bytes.push((255.0 * v + 0.5).floor() as u8);
    }
    LdrImage::new(img.height(), img.width(), bytes)
}

/// Adds signal-dependent and stationary Gaussian noise, clamping at zero.
/// Each value consumes two normal draws, signal term first.
pub fn add_sensor_noise(h: &HdrImage, p: &NoiseParams) -> Result<HdrImage> {
    if p.sigma_s == 0.0 && p.sigma_c == 0.0 {
        return Ok(h.clone());
    }
    if !(p.sigma_s >= 0.0 && p.sigma_c >= 0.0) {
        return Err(invalid!(
            "noise deviations must be non-negative, got sigma_s={} sigma_c={}",
            p.sigma_s,
            p.sigma_c
        ));
    }
    let mut rng = seeded(p.seed);
    let data = h
        .data()
        .iter()
        .map(|&v| {
            let ns = v.sqrt() * p.sigma_s * standard_normal(&mut rng);
            let nc = p.sigma_c * standard_normal(&mut rng);
            (v + ns + nc).max(0.0)
        })
        .collect();
    HdrImage::new(h.height(), h.width(), data)
}

/// Fractions of pixels whose Rec.601 luma is above 249/255 or below 6/255.
///
/// Luma is evaluated on the integer codes (`299 r + 587 g + 114 b` against
/// thresholds scaled by 1000), so the comparisons are exact.
pub fn extreme_fractions(l: &LdrImage) -> (f64, f64) {
    let n = l.height() * l.width();
    if n == 0 {
        return (0.0, 0.0);
    }
    let (mut over, mut under) = (0usize, 0usize);
    for px in l.bytes().chunks_exact(3) {
        let y = 299 * u32::from(px[0]) + 587 * u32::from(px[1]) + 114 * u32::from(px[2]);
        if y > 249_000 {
            over += 1;
        } else if y < 6_000 {
            under += 1;
        }
    }
    (over as f64 / n as f64, under as f64 / n as f64)
}

pub const EXTREME_FRACTION: f64 = 0.25;

pub fn is_extreme(l: &LdrImage) -> bool {
    let (over, under) = extreme_fractions(l);
    over > EXTREME_FRACTION || under > EXTREME_FRACTION
}

/// One training example: the LDR observation and every intermediate target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ldr: LdrImage,
    /// Non-linear image before quantization.
    pub i_n: HdrImage,
    /// Clipped linear image.
    pub i_c: HdrImage,
    /// Exposed, noisy HDR image.
    pub h: HdrImage,
}

/// `L = Q(F(clip(noise(E * t))))` with `F` the inverse of `inv_crf`.
pub fn synthesize_pair(
    h_clean: &HdrImage,
    inv_crf: &CrfCurve,
    t: f64,
    p: &NoiseParams,
) -> Result<Sample> {
    let crf = invert_curve(inv_crf);
    synthesize_with_crf(h_clean, &crf, t, p)
}

/// Same as [`synthesize_pair`] with the forward curve given directly.
pub fn synthesize_with_crf(
    h_clean: &HdrImage,
    crf: &CrfCurve,
    t: f64,
    p: &NoiseParams,
) -> Result<Sample> {
    let h = add_sensor_noise(&apply_exposure(h_clean, t)?, p)?;
    let i_c = clip_dynamic_range(&h);
    let i_n = apply_curve(&i_c, crf)?;
    let ldr = quantize8(&i_n)?;
    Ok(Sample { ldr, i_n, i_c, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(vals: &[f64]) -> HdrImage {
        HdrImage::new(1, vals.len() / 3, vals.to_vec()).unwrap()
    }

    #[test]
    fn exposure_examples() {
        let e = img(&[0.25, 0.5, 0.0]);
        assert_eq!(apply_exposure(&e, 1.0).unwrap(), e);
        assert_eq!(apply_exposure(&e, 4.0).unwrap().data()[0], 1.0);
        let c = HdrImage::constant(2, 2, 0.8).unwrap();
        let out = apply_exposure(&c, 0.125).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.1).abs() < 1e-16));
        assert!(apply_exposure(&e, 0.0).is_err());
        assert!(apply_exposure(&e, -1.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let out = clip_dynamic_range(&img(&[0.5, 2.0, 1.0, 1.5, 0.3, 0.0]));
        assert_eq!(out.data(), &[0.5, 1.0, 1.0, 1.0, 0.3, 0.0]);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize8(&img(&[0.5, 0.0, 1.0, 0.001, 0.998, 0.002])).unwrap();
        assert_eq!(q.bytes(), &[128, 0, 255, 0, 254, 1]);
        assert_eq!(q.unit(0), 128.0 / 255.0);
        assert!(quantize8(&img(&[1.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = exposure_grid(7, -3.0, 3.0).unwrap();
        assert_eq!(g.times, vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]);
        assert_eq!(exposure_grid(2, 0.0, 1.0).unwrap().times, vec![1.0, 2.0]);
        assert_eq!(
            exposure_grid(3, -1.0, 1.0).unwrap().times,
            vec![0.5, 1.0, 2.0]
        );
        assert!(exposure_grid(1, 0.0, 1.0).is_err());
        assert!(exposure_grid(3, 1.0, 1.0).is_err());
        let big = exposure_grid(600, -3.0, 3.0).unwrap();
        assert!(big.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_noise_is_identity_and_seed_is_deterministic() {
        let h = HdrImage::from_fn(4, 4, |y, x, c| (y + x + c) as f64 * 0.1).unwrap();
        assert_eq!(add_sensor_noise(&h, &NoiseParams::none()).unwrap(), h);
        let p = NoiseParams {
            sigma_s: 0.013,
            sigma_c: 0.005,
            seed: 7,
        };
        let a = add_sensor_noise(&h, &p).unwrap();
        assert_eq!(a, add_sensor_noise(&h, &p).unwrap());
        assert_ne!(a, h);
        assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn extreme_examples() {
        let white = LdrImage::new(2, 2, vec![255; 12]).unwrap();
        assert_eq!(extreme_fractions(&white), (1.0, 0.0));
        assert!(is_extreme(&white));
        let gray = LdrImage::new(2, 2, vec![128; 12]).unwrap();
        assert_eq!(extreme_fractions(&gray), (0.0, 0.0));
        assert!(!is_extreme(&gray));
        let mut half = vec![128; 12];
        half[..6].fill(255);
        assert_eq!(
            extreme_fractions(&LdrImage::new(2, 2, half).unwrap()).0,
            0.5
        );

        // one of four pixels over and one under: exactly 25% each, not extreme
        let mut quarter = vec![128; 12];
        quarter[..3].fill(255);
        quarter[3..6].fill(0);
        let q = LdrImage::new(2, 2, quarter).unwrap();
        assert_eq!(extreme_fractions(&q), (0.25, 0.25));
        assert!(!is_extreme(&q));

        // 249 itself is not over-exposed, 6 is not under-exposed
        let edge = LdrImage::new(1, 2, vec![249, 249, 249, 6, 6, 6]).unwrap();
        assert_eq!(extreme_fractions(&edge), (0.0, 0.0));
    }

    #[test]
    fn identity_chain_synthesis() {
        let h = HdrImage::from_fn(3, 3, |y, x, c| (y * 9 + x * 3 + c) as f64 / 27.0).unwrap();
        let s = synthesize_pair(&h, &CrfCurve::identity(1024), 1.0, &NoiseParams::none()).unwrap();
        assert_eq!(s.i_c, h);
        assert_eq!(s.i_n, h);
        assert_eq!(s.h, h);
        assert_eq!(s.ldr, quantize8(&h).unwrap());
    }

    #[test]
    fn gamma_crf_synthesis() {
        let h = HdrImage::constant(1, 1, 0.25).unwrap();
        let inv = CrfCurve::gamma(1024, 2.2);
        let s = synthesize_pair(&h, &inv, 1.0, &NoiseParams::none()).unwrap();
        let want = 0.25f64.powf(1.0 / 2.2);
        assert!((want - 0.5326).abs() < 1e-4);
        assert!((s.i_n.data()[0] - want).abs() < 2e-3, "{}", s.i_n.data()[0]);
    }

    proptest! {
        #[test]
        fn quantize_error_is_half_a_code(x in 0.0f64..=1.0) {
            let q = quantize8(&img(&[x, x, x])).unwrap();
            prop_assert!((q.unit(0) - x).abs() <= 1.0 / 510.0);
            let again = quantize8(&q.unit_view()).unwrap();
            prop_assert_eq!(again, q);
        }

        #[test]
        fn clip_is_idempotent_monotone_and_lipschitz(a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let ca = clip_dynamic_range(&img(&[a, a, a])).data()[0];
            let cb = clip_dynamic_range(&img(&[b, b, b])).data()[0];
            prop_assert_eq!(clip_dynamic_range(&img(&[ca, ca, ca])).data()[0], ca);
            prop_assert!((ca - cb).abs() <= (a - b).abs());
            if a <= b {
                prop_assert!(ca <= cb);
            }
        }
    }
}
