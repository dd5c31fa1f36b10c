//! Training losses, the mu-law tone map, and evaluation metrics.

use diffcore::rng::seeded;
use diffcore::{he_normal, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imagio::HdrImage;

pub const MU: f64 = 10.0;
pub const LOG_EPS: f64 = 1e-6;

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub deq: f64,
    pub lin: f64,
    pub crf: f64,
    pub hal: f64,
    pub perceptual: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            deq: 1.0,
            lin: 10.0,
            crf: 1.0,
            hal: 1.0,
            perceptual: 0.001,
            tv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            deq: 0.0,
            lin: 0.0,
            crf: 0.0,
            hal: 0.0,
            perceptual: 0.0,
            tv: 0.0,
        }
    }

    /// Refinement has no stage-wise supervision: the four stage terms are
    /// dropped whatever the configuration says.
    pub fn for_refinement(self) -> Self {
        Self {
            deq: 0.0,
            lin: 0.0,
            crf: 0.0,
            hal: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!(
                    "loss weight {name} must be a non-negative number, got {v}"
                ));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("deq", self.deq),
            ("lin", self.lin),
            ("crf", self.crf),
            ("hal", self.hal),
            ("perceptual", self.perceptual),
            ("tv", self.tv),
        ]
    }
}

/// Per-term values of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub deq: f64,
    pub lin: f64,
    pub crf: f64,
    pub hal: f64,
    pub perceptual: f64,
    pub tv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted terms; inactive terms are 0.
    pub terms: LossTerms,
    /// Each term times its weight.
    pub weighted: LossTerms,
    pub total: f64,
}

/// Network outputs entering the objective. `hdr` is the final HDR estimate
/// (refined when refinement is active).
#[derive(Clone, Copy, Debug, Default)]
pub struct Predictions {
    pub deq: Option<Var>,
    pub curve: Option<Var>,
    pub lin: Option<Var>,
    pub hdr: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Targets {
    pub i_n: Option<Var>,
    pub curve: Option<Var>,
    pub i_c: Option<Var>,
    pub h: Option<Var>,
}

pub fn loss_l2(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    Ok(g.mse(a, b)?)
}

/// Mean squared difference of `ln(max(x, eps))`.
pub fn loss_log_l2(g: &mut Graph, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let lp = g.log_clamped(pred, eps)?;
    let lt = g.log_clamped(target, eps)?;
    Ok(g.mse(lp, lt)?)
}

/// `ln(1 + mu x) / ln(1 + mu)`.
pub fn tone_map_mu(g: &mut Graph, x: Var, mu: f64) -> Result<Var> {
    Ok(g.mu_law(x, mu)?)
}

/// Mean absolute horizontal and vertical neighbour difference.
pub fn loss_tv(g: &mut Graph, x: Var) -> Result<Var> {
    Ok(g.total_variation(x)?)
}

/// Fixed random feature pyramid standing in for a pretrained classifier:
/// each level is a 3x3 convolution, ReLU and 2x average pooling.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    levels: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];
    pub const SEED: u64 = 0x7065_7263_6570_7431;

    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut cin = 3;
        let levels = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let w = he_normal(&[cout, cin, 3, 3], cin * 9, 2f64.sqrt(), &mut rng);
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { levels }
    }

    /// Pooled activations of every level.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for (i, (w, b)) in self.levels.iter().enumerate() {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let c = g
                .conv2d(h, wv, bv, 1)
                .map_err(|e| e.in_layer(&format!("perceptual{i}")))?;
            let r = g.relu(c)?;
            h = g.avg_pool2(r)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(Self::SEED)
    }
}

/// Sum over pyramid levels of the mean squared feature difference between
/// the tone-mapped images.
pub fn loss_perceptual(
    g: &mut Graph,
    pred: Var,
    target: Var,
    extractor: &PerceptualExtractor,
) -> Result<Var> {
    let tp = tone_map_mu(g, pred, MU)?;
    let tt = tone_map_mu(g, target, MU)?;
    let fp = extractor.features(g, tp)?;
    let ft = extractor.features(g, tt)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let m = g.mse(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| invalid!("perceptual extractor has no levels"))
}

fn need(v: Option<Var>, what: &str, weight: &str) -> Result<Var> {
    v.ok_or_else(|| invalid!("loss weight {weight} is non-zero but {what} is missing"))
}

/// Weighted objective over every term with a non-zero weight.
pub fn loss_total(
    g: &mut Graph,
    pred: &Predictions,
    tgt: &Targets,
    w: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let mut parts: Vec<(f64, Var)> = Vec::new();
    let mut terms = LossTerms::default();
    let mut weighted = LossTerms::default();

    let mut record =
        |g: &mut Graph, weight: f64, var: Var, slot: fn(&mut LossTerms) -> &mut f64| {
            let v = g.value(var).item();
            *slot(&mut terms) = v;
            *slot(&mut weighted) = weight * v;
            parts.push((weight, var));
        };

    if w.deq > 0.0 {
        let v = loss_l2(
            g,
            need(pred.deq, "the dequantized prediction", "deq")?,
            need(tgt.i_n, "the I_n target", "deq")?,
        )?;
        record(g, w.deq, v, |t| &mut t.deq);
    }
    if w.lin > 0.0 {
        let v = loss_l2(
            g,
            need(pred.lin, "the linearized prediction", "lin")?,
            need(tgt.i_c, "the I_c target", "lin")?,
        )?;
        record(g, w.lin, v, |t| &mut t.lin);
    }
    if w.crf > 0.0 {
        let v = loss_l2(
            g,
            need(pred.curve, "the predicted curve", "crf")?,
            need(tgt.curve, "the curve target", "crf")?,
        )?;
        record(g, w.crf, v, |t| &mut t.crf);
    }
    if w.hal > 0.0 {
        let v = loss_log_l2(
            g,
            need(pred.hdr, "the HDR prediction", "hal")?,
            need(tgt.h, "the H target", "hal")?,
            LOG_EPS,
        )?;
        record(g, w.hal, v, |t| &mut t.hal);
    }
    if w.perceptual > 0.0 {
        let v = loss_perceptual(
            g,
            need(pred.hdr, "the HDR prediction", "perceptual")?,
            need(tgt.h, "the H target", "perceptual")?,
            extractor,
        )?;
        record(g, w.perceptual, v, |t| &mut t.perceptual);
    }
    if w.tv > 0.0 {
        let v = loss_tv(g, need(pred.hdr, "the HDR prediction", "tv")?)?;
        record(g, w.tv, v, |t| &mut t.tv);
    }

    let mut total: Option<Var> = None;
    for (weight, v) in parts {
        let s = g.scale(v, weight)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let breakdown = LossBreakdown {
        terms,
        weighted,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

fn check_same(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(invalid!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; infinite for identical inputs.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid!("psnr needs two non-empty arrays of equal length"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    psnr_values(a.data(), b.data(), peak)
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions of one plane, dynamic range 1.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(invalid!("ssim plane size mismatch"));
    }
    let k = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// SSIM averaged over the three channels.
pub fn ssim(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    check_same(a, b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
        total += ssim_plane(&pa, &pb, h, w)?;
    }
    Ok(total / 3.0)
}

/// Sum of squared sample differences between two curves.
pub fn crf_l2(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(invalid!(
            "curves have {} and {} samples",
            g1.len(),
            g2.len()
        ));
    }
    Ok(g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Plain (non-differentiable) mu-law tone map of an image.
pub fn tone_map_image(img: &HdrImage, mu: f64) -> HdrImage {
    img.map(|v| (mu * v).ln_1p() / mu.ln_1p())
        .expect("tone map keeps values valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(
        f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
        a: &[f64],
        b: &[f64],
    ) -> f64 {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[a.len()], a.to_vec()).unwrap());
        let bv = g.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap());
        let l = f(&mut g, av, bv).unwrap();
        g.value(l).item()
    }

    #[test]
    fn l2_examples() {
        let a = [0.1, 0.5, 0.9];
        let b = [0.2, 0.6, 1.0];
        assert_eq!(scalar_loss(loss_l2, &a, &a), 0.0);
        assert!((scalar_loss(loss_l2, &a, &b) - 0.01).abs() < 1e-15);
        assert_eq!(scalar_loss(loss_l2, &a, &b), scalar_loss(loss_l2, &b, &a));
    }

    #[test]
    fn log_l2_examples() {
        let f = |g: &mut Graph, a, b| loss_log_l2(g, a, b, LOG_EPS);
        assert_eq!(scalar_loss(f, &[0.3, 2.0], &[0.3, 2.0]), 0.0);
        assert!((scalar_loss(f, &[std::f64::consts::E], &[1.0]) - 1.0).abs() < 1e-15);
        let a = [0.2, 1.5];
        let b = [0.4, 0.7];
        let a10: Vec<f64> = a.iter().map(|v| v * 10.0).collect();
        let b10: Vec<f64> = b.iter().map(|v| v * 10.0).collect();
        assert!((scalar_loss(f, &a, &b) - scalar_loss(f, &a10, &b10)).abs() < 1e-14);
    }

    #[test]
    fn tone_map_examples() {
        let img = HdrImage::new(1, 1, vec![0.0, 1.0, 0.1]).unwrap();
        let t = tone_map_image(&img, MU);
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 1.0).abs() < 1e-15);
        assert!((t.data()[2] - 2f64.ln() / 11f64.ln()).abs() < 1e-15);
        assert!((t.data()[2] - 0.2891).abs() < 1e-4);
    }

    #[test]
    fn psnr_examples() {
        let a = HdrImage::constant(4, 4, 0.5).unwrap();
        let b = HdrImage::constant(4, 4, 0.6).unwrap();
        let c = HdrImage::constant(4, 4, 0.51).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_examples() {
        let a =
            HdrImage::from_fn(16, 16, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        let b = HdrImage::from_fn(16, 16, |y, x, c| ((y * 5 + x + c) % 13) as f64 / 12.0).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        let small = HdrImage::constant(8, 8, 0.5).unwrap();
        assert!(ssim(&small, &small.map(|v| v * 0.5).unwrap()).is_err());
    }

    #[test]
    fn crf_l2_identity_vs_square() {
        let d = 1024;
        let id: Vec<f64> = (0..d).map(|i| i as f64 / (d - 1) as f64).collect();
        let sq: Vec<f64> = id.iter().map(|x| x * x).collect();
        assert_eq!(crf_l2(&id, &id).unwrap(), 0.0);
        let v = crf_l2(&id, &sq).unwrap();
        assert!((v - 1024.0 / 30.0).abs() < 0.05, "{v}");
        assert!(crf_l2(&id, &sq[1..]).is_err());
    }

    #[test]
    fn tv_step_example() {
        // 3 rows, unit step between columns 1 and 2 of a 3x4 image
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3)
            .flat_map(|_| (0..4).map(|x| if x >= 2 { 1.0 } else { 0.0 }))
            .collect();
        let x = g.constant(Tensor::new(&[1, 1, 3, 4], data).unwrap());
        let tv = loss_tv(&mut g, x).unwrap();
        // 3 rows x 3 horizontal pairs + 2 x 4 vertical pairs
        assert!((g.value(tv).item() - 3.0 / 17.0).abs() < 1e-15);
    }
}
