//! Linearization-network inputs: Sobel edge maps and a spatially resolved
//! soft histogram.

use diffcore::{DiffError, Graph, Operation, Tensor, Var};

use crate::error::Result;
use crate::imagio::HdrImage;

pub const HIST_BINS: [usize; 3] = [4, 8, 16];

/// `3 + 6 + 3 * (4 + 8 + 16)`.
pub const FEATURE_CHANNELS: usize = 93;

/// Sobel responses with replicate padding, `(N, 3, H, W) -> (N, 6, H, W)`.
///
/// Kernels are applied as correlations, `Gx = [[-1, 0, 1], [-2, 0, 2],
/// [-1, 0, 1]]` and `Gy` its transpose. Output channels hold the horizontal
/// responses of the three input channels, then the vertical ones. The
/// evaluation is separable (central difference, then `[1, 2, 1]`
/// smoothing) so flat regions give exact zeros.
pub struct Sobel;

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl Operation for Sobel {
    fn name(&self) -> &'static str {
        "sobel"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let x = inputs[0];
        let (n, c, h, w) = match x.dims4() {
            Some(d @ (_, 3, _, _)) => d,
            _ => {
                return Err(DiffError::shape(
                    self.name(),
                    format!("expected (N, 3, H, W), got {:?}", x.shape()),
                ))
            }
        };
        let plane = h * w;
        let mut out = vec![0.0; n * 6 * plane];
        for b in 0..n {
            for ch in 0..c {
                let p = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let at = |y: isize, xx: isize| p[clamp_idx(y, h) * w + clamp_idx(xx, w)];
                let gx_off = (b * 6 + ch) * plane;
                let gy_off = (b * 6 + 3 + ch) * plane;
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for (k, s) in SMOOTH.iter().enumerate() {
                            let o = k as isize - 1;
                            gx += s * (at(y + o, xx + 1) - at(y + o, xx - 1));
                            gy += s * (at(y + 1, xx + o) - at(y - 1, xx + o));
                        }
                        let i = y as usize * w + xx as usize;
                        out[gx_off + i] = gx;
                        out[gy_off + i] = gy;
                    }
                }
            }
        }
        Tensor::new(&[n, 6, h, w], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().expect("validated");
        let plane = h * w;
        let mut gx = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let dst = &mut gx[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let up_x = &grad.data()[(b * 6 + ch) * plane..(b * 6 + ch + 1) * plane];
                let up_y = &grad.data()[(b * 6 + 3 + ch) * plane..(b * 6 + 4 + ch) * plane];
                let mut add =
                    |y: isize, xx: isize, v: f64| dst[clamp_idx(y, h) * w + clamp_idx(xx, w)] += v;
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let i = y as usize * w + xx as usize;
                        for (k, s) in SMOOTH.iter().enumerate() {
                            let o = k as isize - 1;
                            add(y + o, xx + 1, s * up_x[i]);
                            add(y + o, xx - 1, -s * up_x[i]);
                            add(y + 1, xx + o, s * up_y[i]);
                            add(y - 1, xx + o, -s * up_y[i]);
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), gx).expect("shape"))]
    }
}

/// Soft membership of every value in `bins` equal-width bins.
///
/// Each value splits linearly between the two nearest bin centres
/// `(2b + 1) / (2B)`; values below the first or above the last centre keep
/// only the part that falls on an existing bin. Output channels are
/// `c * B + b`. At a bin centre the left-segment slope is used.
pub struct SoftHistogram {
    pub bins: usize,
}

impl SoftHistogram {
    /// `(k, t)` such that bin `k` receives `1 - t` and bin `k + 1` receives `t`.
    fn split(&self, v: f64) -> (i64, f64) {
        let p = v * self.bins as f64 - 0.5;
        let k = p.ceil() as i64 - 1;
        (k, p - k as f64)
    }
}

impl Operation for SoftHistogram {
    fn name(&self) -> &'static str {
        "soft_histogram"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().ok_or_else(|| {
            DiffError::shape(self.name(), format!("expected NCHW, got {:?}", x.shape()))
        })?;
        if self.bins < 2 {
            return Err(DiffError::domain(self.name(), "need at least 2 bins"));
        }
        let b = self.bins;
        let plane = h * w;
        let mut out = vec![0.0; n * c * b * plane];
        for (src, dst) in x
            .data()
            .chunks_exact(plane)
            .zip(out.chunks_exact_mut(b * plane))
        {
            for (p, &v) in src.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DiffError::domain(
                        self.name(),
                        format!("input {v} outside [0, 1]"),
                    ));
                }
                let (k, t) = self.split(v);
                if k >= 0 {
                    dst[k as usize * plane + p] = 1.0 - t;
                }
                if k + 1 < b as i64 {
                    dst[(k + 1) as usize * plane + p] = t;
                }
            }
        }
        Tensor::new(&[n, c * b, h, w], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (_, _, h, w) = x.dims4().expect("validated");
        let b = self.bins;
        let slope = b as f64;
        let plane = h * w;
        let mut gx = vec![0.0; x.len()];
        for ((src, gsrc), up) in x
            .data()
            .chunks_exact(plane)
            .zip(gx.chunks_exact_mut(plane))
            .zip(grad.data().chunks_exact(b * plane))
        {
            for (p, &v) in src.iter().enumerate() {
                let (k, _) = self.split(v);
                let mut acc = 0.0;
                if k >= 0 {
                    acc -= slope * up[k as usize * plane + p];
                }
                if k + 1 < b as i64 {
                    acc += slope * up[(k + 1) as usize * plane + p];
                }
                gsrc[p] = acc;
            }
        }
        vec![Some(Tensor::new(x.shape(), gx).expect("shape"))]
    }
}

pub trait FeatureOps {
    fn sobel(&mut self, x: Var) -> diffcore::Result<Var>;
    fn soft_histogram(&mut self, x: Var, bins: usize) -> diffcore::Result<Var>;
    fn feature_stack(&mut self, x: Var) -> diffcore::Result<Var>;
}

impl FeatureOps for Graph {
    fn sobel(&mut self, x: Var) -> diffcore::Result<Var> {
        self.apply(Sobel, &[x])
    }

    fn soft_histogram(&mut self, x: Var, bins: usize) -> diffcore::Result<Var> {
        self.apply(SoftHistogram { bins }, &[x])
    }

    /// `[image, sobel, hist(4), hist(8), hist(16)]` along channels.
    fn feature_stack(&mut self, x: Var) -> diffcore::Result<Var> {
        let mut parts = vec![x, self.sobel(x)?];
        for bins in HIST_BINS {
            parts.push(self.soft_histogram(x, bins)?);
        }
        self.concat(&parts)
    }
}

fn eval(
    img: &HdrImage,
    f: impl FnOnce(&mut Graph, Var) -> diffcore::Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// `(1, 6, H, W)` edge responses.
pub fn sobel_edges(img: &HdrImage) -> Result<Tensor> {
    eval(img, |g, x| g.sobel(x))
}

/// `(1, 3B, H, W)` soft histogram planes.
pub fn soft_histogram(img: &HdrImage, bins: usize) -> Result<Tensor> {
    eval(img, |g, x| g.soft_histogram(x, bins))
}

/// `(1, 93, H, W)` linearization input.
pub fn feature_stack(img: &HdrImage) -> Result<Tensor> {
    eval(img, |g, x| g.feature_stack(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(t: &Tensor, ch: usize) -> &[f64] {
        let (_, _, h, w) = t.dims4().unwrap();
        &t.data()[ch * h * w..(ch + 1) * h * w]
    }

    fn hist_at(v: f64, bins: usize) -> Vec<f64> {
        let img = HdrImage::constant(1, 1, v).unwrap();
        let t = soft_histogram(&img, bins).unwrap();
        t.data()[..bins].to_vec()
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(hist_at(0.125, 4), vec![1.0, 0.0, 0.0, 0.0]);
        let h = hist_at(0.2, 4);
        assert!((h[0] - 0.7).abs() < 1e-15 && (h[1] - 0.3).abs() < 1e-15);
        assert_eq!(&h[2..], &[0.0, 0.0]);
        assert_eq!(hist_at(0.0, 4), vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(hist_at(1.0, 4), vec![0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn histogram_matches_distance_formula() {
        for i in 0..=200 {
            let v = i as f64 / 200.0;
            for bins in HIST_BINS {
                let got = hist_at(v, bins);
                for (b, g) in got.iter().enumerate() {
                    let centre = (2 * b + 1) as f64 / (2 * bins) as f64;
                    let d = (v - centre).abs();
                    let want = if d < 1.0 / bins as f64 {
                        1.0 - d * bins as f64
                    } else {
                        0.0
                    };
                    assert!((g - want).abs() < 1e-12, "v={v} B={bins} b={b}");
                }
            }
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = sobel_edges(&HdrImage::constant(5, 5, 0.3).unwrap()).unwrap();
        assert_eq!(e.shape(), &[1, 6, 5, 5]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_response() {
        let step = 0.1;
        let img = HdrImage::from_fn(5, 6, |_, x, _| x as f64 * step).unwrap();
        let e = sobel_edges(&img).unwrap();
        for c in 0..3 {
            let gx = plane(&e, c);
            let gy = plane(&e, 3 + c);
            for y in 0..5 {
                for x in 1..5 {
                    assert!((gx[y * 6 + x] - 8.0 * step).abs() < 1e-12);
                }
                for x in 0..6 {
                    assert_eq!(gy[y * 6 + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn stack_has_93_channels() {
        let img = HdrImage::constant(4, 7, 0.5).unwrap();
        let s = feature_stack(&img).unwrap();
        assert_eq!(s.shape(), &[1, FEATURE_CHANNELS, 4, 7]);
        for ch in 3..9 {
            assert!(plane(&s, ch).iter().all(|&v| v == 0.0));
        }
        for ch in 9..FEATURE_CHANNELS {
            let p = plane(&s, ch);
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }
}
