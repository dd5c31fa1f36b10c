//! Square-kernel 2-D convolution (cross-correlation) with replicate padding.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Operation, Var};
use crate::ops::dims4;
use crate::tensor::Tensor;

/// Inputs: `x (N, Ci, H, W)`, `w (Co, Ci, K, K)`, `b (Co)`, K odd.
/// Padding is `K / 2` replicated border pixels on each side.
pub struct Conv2d {
    pub stride: usize,
}

struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Conv2d {
    fn geometry(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Geometry> {
        let (n, ci, h, wd) = dims4("conv2d", x)?;
        let (co, wci, k, k2) = dims4("conv2d", w)?;
        if wci != ci || k != k2 || k % 2 == 0 || b.shape() != [co] || self.stride == 0 {
            return Err(DiffError::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}, stride {}",
                    x.shape(),
                    w.shape(),
                    b.shape(),
                    self.stride
                ),
            ));
        }
        let pad = k / 2;
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let ho = (hp - k) / self.stride + 1;
        let wo = (wp - k) / self.stride + 1;
        Ok(Geometry {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            pad,
            hp,
            wp,
            ho,
            wo,
            stride: self.stride,
        })
    }
}

fn pad_replicate(x: &[f64], g: &Geometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.ci * g.hp * g.wp];
    for (dst, src) in out.chunks_mut(g.hp * g.wp).zip(x.chunks(g.h * g.w)) {
        for py in 0..g.hp {
            let sy = py.saturating_sub(g.pad).min(g.h - 1);
            let srow = &src[sy * g.w..(sy + 1) * g.w];
            let drow = &mut dst[py * g.wp..(py + 1) * g.wp];
            for (px, d) in drow.iter_mut().enumerate() {
                *d = srow[px.saturating_sub(g.pad).min(g.w - 1)];
            }
        }
    }
    out
}

/// Patch matrix of one padded image: row `(ci, ky, kx)`, column `(y, x)`.
fn im2col(padded: &[f64], g: &Geometry, cols: &mut [f64]) {
    let plane_p = g.hp * g.wp;
    let plane_o = g.ho * g.wo;
    for ci in 0..g.ci {
        let src = &padded[ci * plane_p..(ci + 1) * plane_p];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane_o;
                let dst = &mut cols[row..row + plane_o];
                for y in 0..g.ho {
                    let s = &src[(y * g.stride + ky) * g.wp + kx..];
                    let d = &mut dst[y * g.wo..(y + 1) * g.wo];
                    if g.stride == 1 {
                        d.copy_from_slice(&s[..g.wo]);
                    } else {
                        for (x, v) in d.iter_mut().enumerate() {
                            *v = s[x * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients into a padded plane stack.
fn col2im(cols: &[f64], g: &Geometry, padded: &mut [f64]) {
    let plane_p = g.hp * g.wp;
    let plane_o = g.ho * g.wo;
    for ci in 0..g.ci {
        let dst = &mut padded[ci * plane_p..(ci + 1) * plane_p];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane_o;
                let src = &cols[row..row + plane_o];
                for y in 0..g.ho {
                    let d = &mut dst[(y * g.stride + ky) * g.wp + kx..];
                    let s = &src[y * g.wo..(y + 1) * g.wo];
                    if g.stride == 1 {
                        for (o, &v) in d[..g.wo].iter_mut().zip(s) {
                            *o += v;
                        }
                    } else {
                        for (x, &v) in s.iter().enumerate() {
                            d[x * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe row-major `m x k`, `k x n` and `m x n`
    // matrices (or their transposes) that lie inside the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Operation for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let g = self.geometry(x, w, b)?;
        let padded = pad_replicate(x.data(), &g);
        let plane_o = g.ho * g.wo;
        let plane_p = g.hp * g.wp;
        let ckk = g.ci * g.k * g.k;
        let mut cols = vec![0.0; ckk * plane_o];
        let mut out = vec![0.0; g.n * g.co * plane_o];
        for (n, dst) in out.chunks_mut(g.co * plane_o).enumerate() {
            for (co, plane) in dst.chunks_mut(plane_o).enumerate() {
                plane.fill(b.data()[co]);
            }
            im2col(
                &padded[n * g.ci * plane_p..(n + 1) * g.ci * plane_p],
                &g,
                &mut cols,
            );
            gemm(g.co, ckk, plane_o, w.data(), false, &cols, false, 1.0, dst);
        }
        Tensor::new(&[g.n, g.co, g.ho, g.wo], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let g = self.geometry(x, w, b).expect("validated in forward");
        let plane_o = g.ho * g.wo;
        let plane_p = g.hp * g.wp;
        let ckk = g.ci * g.k * g.k;
        let gd = grad.data();

        let gb = needs[2].then(|| {
            let mut out = vec![0.0; g.co];
            for n in 0..g.n {
                for (co, o) in out.iter_mut().enumerate() {
                    *o += gd[(n * g.co + co) * plane_o..(n * g.co + co + 1) * plane_o]
                        .iter()
                        .sum::<f64>();
                }
            }
            Tensor::new(&[g.co], out).expect("shape")
        });

        let mut cols = vec![0.0; ckk * plane_o];
        let gw = needs[1].then(|| {
            let padded = pad_replicate(x.data(), &g);
            let mut out = vec![0.0; g.co * ckk];
            for n in 0..g.n {
                im2col(
                    &padded[n * g.ci * plane_p..(n + 1) * g.ci * plane_p],
                    &g,
                    &mut cols,
                );
                let go = &gd[n * g.co * plane_o..(n + 1) * g.co * plane_o];
                gemm(g.co, plane_o, ckk, go, false, &cols, true, 1.0, &mut out);
            }
            Tensor::new(w.shape(), out).expect("shape")
        });

        let gx = needs[0].then(|| {
            let mut out = vec![0.0; g.n * g.ci * g.h * g.w];
            let mut gpad = vec![0.0; g.ci * plane_p];
            for n in 0..g.n {
                let go = &gd[n * g.co * plane_o..(n + 1) * g.co * plane_o];
                gemm(
                    ckk,
                    g.co,
                    plane_o,
                    w.data(),
                    true,
                    go,
                    false,
                    0.0,
                    &mut cols,
                );
                gpad.fill(0.0);
                col2im(&cols, &g, &mut gpad);
                for ci in 0..g.ci {
                    let src = &gpad[ci * plane_p..(ci + 1) * plane_p];
                    let dst =
                        &mut out[(n * g.ci + ci) * g.h * g.w..(n * g.ci + ci + 1) * g.h * g.w];
                    for py in 0..g.hp {
                        let sy = py.saturating_sub(g.pad).min(g.h - 1);
                        for px in 0..g.wp {
                            let sx = px.saturating_sub(g.pad).min(g.w - 1);
                            dst[sy * g.w + sx] += src[py * g.wp + px];
                        }
                    }
                }
            }
            Tensor::new(x.shape(), out).expect("shape")
        });

        vec![gx, gw, gb]
    }
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.apply(Conv2d { stride }, &[x, w, b])
    }
}
