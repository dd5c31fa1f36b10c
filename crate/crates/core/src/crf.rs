//! Response curves sampled on a uniform grid, the PCA curve model, and the
//! differentiable pieces the linearization network needs: a projection onto
//! valid (monotone, endpoint-pinned) curves and LUT application.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use diffcore::{DiffError, Graph, Operation, Tensor, Var};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::imagio::HdrImage;

pub const DEFAULT_SAMPLES: usize = 1024;
pub const DEFAULT_COMPONENTS: usize = 11;

/// A valid response curve: `D >= 2` samples of a non-decreasing map of
/// `[0, 1]` onto itself with `g[0] = 0` and `g[D-1] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfCurve {
    samples: Vec<f64>,
}

impl CrfCurve {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(invalid!("a curve needs at least 2 samples, got {n}"));
        }
        if samples[0] != 0.0 || samples[n - 1] != 1.0 {
            return Err(invalid!(
                "curve endpoints must be 0 and 1, got {} and {}",
                samples[0],
                samples[n - 1]
            ));
        }
        if let Some(i) = samples.windows(2).position(|w| !(w[1] >= w[0])) {
            return Err(invalid!("curve decreases at sample {}", i + 1));
        }
        Ok(Self { samples })
    }

    /// Samples `f` at `i / (D - 1)`; the endpoints are pinned to 0 and 1.
    pub fn from_fn(d: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if d < 2 {
            return Err(invalid!("a curve needs at least 2 samples, got {d}"));
        }
        let mut s: Vec<f64> = (0..d).map(|i| f(grid(i, d))).collect();
        s[0] = 0.0;
        s[d - 1] = 1.0;
        Self::new(s)
    }

    pub fn identity(d: usize) -> Self {
        Self::from_fn(d, |x| x).expect("identity is valid")
    }

    /// `x^gamma`.
    pub fn gamma(d: usize, gamma: f64) -> Self {
        Self::from_fn(d, |x| x.powf(gamma)).expect("power curves are valid")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Piecewise-linear evaluation at `x` in `[0, 1]`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(invalid!("curve input {x} outside [0, 1]"));
        }
        Ok(lut(&self.samples, x).0)
    }
}

fn grid(i: usize, d: usize) -> f64 {
    i as f64 / (d - 1) as f64
}

/// Samples equal to the uniform grid; such a curve maps every input to itself.
fn is_identity(g: &[f64]) -> bool {
    g.iter().enumerate().all(|(i, &v)| v == grid(i, g.len()))
}

/// Segment lookup shared by the forward pass and its derivative: returns
/// `(y, i, f)` with `y = g[i] (1 - f) + g[i+1] f`. A point exactly on a
/// sample belongs to the segment on its left.
fn lut(g: &[f64], x: f64) -> (f64, usize, f64) {
    let d = g.len();
    let pos = x * (d - 1) as f64;
    let i = ((pos.ceil() as i64) - 1).clamp(0, d as i64 - 2) as usize;
    let f = pos - i as f64;
    let y = if f == 0.0 {
        g[i]
    } else if f == 1.0 {
        g[i + 1]
    } else {
        g[i] * (1.0 - f) + g[i + 1] * f
    };
    (y, i, f)
}

/// Mean curve plus `K` component vectors, all of length `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmorBasis {
    pub mean: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmorBasis {
    pub fn new(mean: Vec<f64>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d < 2 {
            return Err(invalid!("basis curves need at least 2 samples"));
        }
        if vectors.is_empty() {
            return Err(invalid!("basis needs at least one component"));
        }
        if let Some(k) = vectors.iter().position(|v| v.len() != d) {
            return Err(invalid!(
                "component {} has {} samples, mean has {d}",
                k + 1,
                vectors[k].len()
            ));
        }
        if mean
            .iter()
            .chain(vectors.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(invalid!("basis contains non-finite values"));
        }
        Ok(Self { mean, vectors })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    /// `(K, D)` matrix of the components.
    pub fn matrix_tensor(&self) -> Tensor {
        Tensor::new(&[self.k(), self.d()], self.vectors.concat()).expect("shape")
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::new(&[self.d()], self.mean.clone()).expect("shape")
    }
}

fn parse_row(line: Option<&str>, d: usize, what: &str) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::Format(format!("missing {what}")))?;
    let row: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("non-numeric token {t:?} in {what}")))
        })
        .collect::<Result<_>>()?;
    if row.len() != d {
        return Err(Error::Format(format!(
            "{what} has {} values, expected {d}",
            row.len()
        )));
    }
    Ok(row)
}

/// Parses the text format: `EMOR <D> <K>`, the mean, then `K` components,
/// one curve per line.
pub fn parse_basis(text: &str) -> Result<EmorBasis> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty basis file".into()))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    let (d, k) = match tok.as_slice() {
        ["EMOR", d, k] => (
            d.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad D {d:?}")))?,
            k.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad K {k:?}")))?,
        ),
        _ => return Err(Error::Format(format!("bad basis header {header:?}"))),
    };
    let mean = parse_row(lines.next(), d, "mean curve")?;
    let vectors = (1..=k)
        .map(|i| parse_row(lines.next(), d, &format!("component {i}")))
        .collect::<Result<Vec<_>>>()?;
    if lines.next().is_some() {
        return Err(Error::Format(format!(
            "more than {k} components in basis file"
        )));
    }
    EmorBasis::new(mean, vectors).map_err(|e| Error::Format(e.to_string()))
}

pub fn format_basis(basis: &EmorBasis) -> String {
    let mut out = format!("EMOR {} {}\n", basis.d(), basis.k());
    for row in std::iter::once(&basis.mean).chain(&basis.vectors) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<EmorBasis> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_basis(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_basis(basis: &EmorBasis, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_basis(basis)).map_err(|e| Error::io(path, e))
}

/// Components whose singular value falls below this fraction of the
/// largest carry no usable variance.
const RANK_TOL: f64 = 1e-13;

/// PCA basis of the power curves `x^gamma`, computed from the singular
/// value decomposition of the centred sample matrix. Each component is
/// signed so that its largest-magnitude entry is positive.
pub fn synth_gamma_basis(gammas: &[f64], d: usize, k: usize) -> Result<EmorBasis> {
    if d < 2 || k == 0 {
        return Err(invalid!("need D >= 2 and K >= 1, got D={d} K={k}"));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(invalid!("gamma must be positive, got {g}"));
    }
    let mut distinct = gammas.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k + 1 {
        return Err(Error::Degenerate(format!(
            "{} distinct gammas cannot span {k} components",
            distinct.len()
        )));
    }
    let n = gammas.len();
    let curves: Vec<Vec<f64>> = gammas
        .iter()
        .map(|&g| (0..d).map(|i| grid(i, d).powf(g)).collect())
        .collect();
    let mean: Vec<f64> = (0..d)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |r, c| curves[r][c] - mean[c]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let sk = svd.singular_values[order[k - 1]];
    if !(s1 > 0.0) || sk <= RANK_TOL * s1 {
        return Err(Error::Degenerate(format!(
            "sample covariance has rank < {k} (sigma_{k} / sigma_1 = {:e})",
            if s1 > 0.0 { sk / s1 } else { 0.0 }
        )));
    }
    let vectors = order[..k]
        .iter()
        .map(|&j| {
            let mut v: Vec<f64> = v_t.row(j).iter().copied().collect();
            let peak = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if peak < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    EmorBasis::new(mean, vectors)
}

/// Gammas of the bundled basis: 1.0 to 3.0 in steps of 0.1.
pub fn shipped_gammas() -> Vec<f64> {
    (10..=30).map(|i| f64::from(i) / 10.0).collect()
}

/// The bundled 11-component basis at 1024 samples, computed once.
pub fn shipped_basis() -> &'static EmorBasis {
    static BASIS: OnceLock<EmorBasis> = OnceLock::new();
    BASIS.get_or_init(|| {
        synth_gamma_basis(&shipped_gammas(), DEFAULT_SAMPLES, DEFAULT_COMPONENTS)
            .expect("bundled gammas span 11 components")
    })
}

/// `g0 + sum_k w_k g_k`; the result is not necessarily a valid curve.
pub fn reconstruct_inverse_crf(w: &[f64], basis: &EmorBasis) -> Result<Vec<f64>> {
    if w.len() != basis.k() {
        return Err(invalid!(
            "{} weights for a {}-component basis",
            w.len(),
            basis.k()
        ));
    }
    let mut g = basis.mean.clone();
    for (wk, v) in w.iter().zip(&basis.vectors) {
        for (gi, vi) in g.iter_mut().zip(v) {
            *gi += wk * vi;
        }
    }
    Ok(g)
}

/// Result of the shift-integrate-normalise projection, with what the
/// backward pass needs.
struct Projection {
    out: Vec<f64>,
    /// Cumulative sums before normalisation.
    cum: Vec<f64>,
    total: f64,
    /// Index of the most negative difference, if any was negative.
    argmin: Option<usize>,
}

fn project_raw(g: &[f64]) -> std::result::Result<Projection, String> {
    let d = g.len();
    if d < 2 {
        return Err(format!("curve needs at least 2 samples, got {d}"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err("curve contains non-finite values".into());
    }
    let mut m = 0.0;
    let mut argmin = None;
    let mut scale = 0.0;
    for i in 1..d {
        let diff = g[i] - g[i - 1];
        scale += diff.abs();
        if diff < m {
            m = diff;
            argmin = Some(i);
        }
    }
    let mut cum = vec![0.0; d];
    for i in 1..d {
        cum[i] = cum[i - 1] + (g[i] - g[i - 1] - m);
    }
    let total = cum[d - 1];
    if !(total > 1e-12 * scale) {
        return Err("degenerate curve: shifted derivatives sum to zero".into());
    }
    let mut out: Vec<f64> = cum.iter().map(|c| c / total).collect();
    out[0] = 0.0;
    out[d - 1] = 1.0;
    Ok(Projection {
        out,
        cum,
        total,
        argmin,
    })
}

fn is_valid_curve(g: &[f64]) -> bool {
    g.len() >= 2 && g[0] == 0.0 && g[g.len() - 1] == 1.0 && g.windows(2).all(|w| w[1] >= w[0])
}

/// Shifts the first differences `g[d] - g[d-1]` (for `d >= 1`) up by the
/// most negative one, integrates from `0`, and divides by the total so the
/// last sample is `1`. Valid curves are returned unchanged, which makes the
/// projection exactly idempotent.
pub fn project_monotone(g: &[f64]) -> Result<CrfCurve> {
    if is_valid_curve(g) {
        return Ok(CrfCurve {
            samples: g.to_vec(),
        });
    }
    let p = project_raw(g).map_err(Error::Degenerate)?;
    CrfCurve::new(p.out)
}

/// Generalised inverse resampled on the uniform grid. A flat run of `g`
/// inverts to its left edge; the last sample is pinned to 1 so a flat top
/// still yields a valid curve.
pub fn invert_curve(g: &CrfCurve) -> CrfCurve {
    let s = &g.samples;
    let d = s.len();
    let mut out = Vec::with_capacity(d);
    let mut i = 0;
    for j in 0..d {
        let y = grid(j, d);
        while i < d - 1 && s[i] < y {
            i += 1;
        }
        let x = if s[i] <= y || i == 0 {
            grid(i, d)
        } else {
            let (a, b) = (s[i - 1], s[i]);
            ((i - 1) as f64 + (y - a) / (b - a)) / (d - 1) as f64
        };
        out.push(x);
    }
    out[0] = 0.0;
    out[d - 1] = 1.0;
    for j in 1..d {
        if out[j] < out[j - 1] {
            out[j] = out[j - 1];
        }
    }
    CrfCurve::new(out).expect("generalised inverse is a valid curve")
}

/// Per-value LUT lookup with linear interpolation.
pub fn apply_curve(img: &HdrImage, g: &CrfCurve) -> Result<HdrImage> {
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid!("apply_curve input {v} outside [0, 1]"));
    }
    if is_identity(&g.samples) {
        return Ok(img.clone());
    }
    img.map(|x| lut(&g.samples, x).0)
}

/// Least-squares weights for `target - mean` via the normal equations.
pub fn fit_weights(target: &[f64], basis: &EmorBasis) -> Result<Vec<f64>> {
    let d = basis.d();
    if target.len() != d {
        return Err(invalid!(
            "target has {} samples, basis has {d}",
            target.len()
        ));
    }
    let k = basis.k();
    let b = DMatrix::from_fn(d, k, |r, c| basis.vectors[c][r]);
    let rhs = DVector::from_fn(d, |r, _| target[r] - basis.mean[r]);
    let gram = b.transpose() * &b;
    let diag_max = gram.diagonal().max();
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("basis is rank-deficient".into()))?;
    let l_min = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(diag_max > 0.0) || l_min * l_min <= 1e-12 * diag_max {
        return Err(Error::Degenerate("basis is rank-deficient".into()));
    }
    let w = chol.solve(&(b.transpose() * rhs));
    Ok(w.iter().copied().collect())
}

/// One sample per line.
pub fn format_curve(g: &[f64]) -> String {
    let mut out = String::with_capacity(g.len() * 20);
    for v in g {
        writeln!(out, "{v}").expect("write to string");
    }
    out
}

pub fn parse_curve(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Format(format!("non-numeric curve sample {l:?}")))
        })
        .collect()
}

pub fn write_curve(g: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_curve(g)).map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curve(&text)
}

/// Differentiable [`project_monotone`] over the rows of an `(N, D)` tensor.
///
/// The most negative difference moves with its input; when several tie,
/// the gradient goes to the first.
pub struct ProjectMonotone;

impl Operation for ProjectMonotone {
    fn name(&self) -> &'static str {
        "project_monotone"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let x = inputs[0];
        let (n, d) = x.dims2().ok_or_else(|| {
            DiffError::shape(self.name(), format!("expected (N, D), got {:?}", x.shape()))
        })?;
        let mut out = Vec::with_capacity(n * d);
        for row in x.data().chunks_exact(d) {
            if is_valid_curve(row) {
                out.extend_from_slice(row);
            } else {
                let p = project_raw(row).map_err(|m| DiffError::domain(self.name(), m))?;
                out.extend(p.out);
            }
        }
        Tensor::new(&[n, d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (_, d) = x.dims2().expect("validated");
        let mut gx = Vec::with_capacity(x.len());
        for (row, gy) in x.data().chunks_exact(d).zip(grad.data().chunks_exact(d)) {
            gx.extend(project_backward(row, gy));
        }
        vec![Some(Tensor::new(x.shape(), gx).expect("shape"))]
    }
}

fn project_backward(g: &[f64], gy: &[f64]) -> Vec<f64> {
    let d = g.len();
    let p = project_raw(g).expect("forward succeeded");
    // y_i = c_i / S with S = c_{D-1}; endpoints are constants
    let mut gc = vec![0.0; d];
    let mut gs = 0.0;
    for i in 1..d - 1 {
        gc[i] = gy[i] / p.total;
        gs -= gy[i] * p.cum[i] / (p.total * p.total);
    }
    gc[d - 1] += gs;
    // c_i = sum_{j<=i} s_j  =>  dL/ds_j = sum_{i>=j} dL/dc_i
    let mut gsh = vec![0.0; d];
    let mut acc = 0.0;
    for j in (1..d).rev() {
        acc += gc[j];
        gsh[j] = acc;
    }
    // s_j = diff_j - m  with m = min(min diff, 0)
    let mut gdiff = gsh.clone();
    if let Some(a) = p.argmin {
        let gm: f64 = -gsh[1..].iter().sum::<f64>();
        gdiff[a] += gm;
    }
    let mut gx = vec![0.0; d];
    for j in 1..d {
        gx[j] += gdiff[j];
        gx[j - 1] -= gdiff[j];
    }
    gx
}

/// Differentiable LUT: inputs `x (N, C, H, W)` in `[0, 1]` and curves
/// `g (N, D)`, one per batch item.
pub struct ApplyCurve;

impl ApplyCurve {
    fn dims(x: &Tensor, g: &Tensor) -> diffcore::Result<(usize, usize, usize)> {
        let (n, c, h, w) = x
            .dims4()
            .ok_or_else(|| DiffError::shape("apply_curve", format!("image {:?}", x.shape())))?;
        match g.dims2() {
            Some((gn, d)) if gn == n && d >= 2 => Ok((n, c * h * w, d)),
            _ => Err(DiffError::shape(
                "apply_curve",
                format!("image {:?} with curves {:?}", x.shape(), g.shape()),
            )),
        }
    }
}

impl Operation for ApplyCurve {
    fn name(&self) -> &'static str {
        "apply_curve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let (x, g) = (inputs[0], inputs[1]);
        let (_, per, d) = Self::dims(x, g)?;
        let mut out = Vec::with_capacity(x.len());
        for (xs, gs) in x.data().chunks_exact(per).zip(g.data().chunks_exact(d)) {
            let identity = is_identity(gs);
            for &v in xs {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DiffError::domain(
                        self.name(),
                        format!("input {v} outside [0, 1]"),
                    ));
                }
                out.push(if identity { v } else { lut(gs, v).0 });
            }
        }
        Tensor::new(x.shape(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, g) = (inputs[0], inputs[1]);
        let (_, per, d) = Self::dims(x, g).expect("validated");
        let mut gx = vec![0.0; x.len()];
        let mut gg = vec![0.0; g.len()];
        let scale = (d - 1) as f64;
        for (b, gs) in g.data().chunks_exact(d).enumerate() {
            let ggs = &mut gg[b * d..(b + 1) * d];
            for p in b * per..(b + 1) * per {
                let (_, i, f) = lut(gs, x.data()[p]);
                let up = grad.data()[p];
                gx[p] = up * (gs[i + 1] - gs[i]) * scale;
                ggs[i] += up * (1.0 - f);
                ggs[i + 1] += up * f;
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape(), gx).expect("shape")),
            needs[1].then(|| Tensor::new(g.shape(), gg).expect("shape")),
        ]
    }
}

/// Graph-side curve primitives.
pub trait CurveOps {
    fn project_monotone(&mut self, g: Var) -> diffcore::Result<Var>;
    fn apply_curve(&mut self, x: Var, g: Var) -> diffcore::Result<Var>;
}

impl CurveOps for Graph {
    fn project_monotone(&mut self, g: Var) -> diffcore::Result<Var> {
        self.apply(ProjectMonotone, &[g])
    }

    fn apply_curve(&mut self, x: Var, g: Var) -> diffcore::Result<Var> {
        self.apply(ApplyCurve, &[x, g])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_basis() -> EmorBasis {
        EmorBasis::new(
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            vec![vec![0.0, 0.1, 0.1, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn basis_text_round_trip() {
        let text = "EMOR 4 1\n0 0.3333333333333333 0.6666666666666666 1\n0 0.1 0.1 0\n";
        let b = parse_basis(text).unwrap();
        assert_eq!(b, tiny_basis());
        assert_eq!(parse_basis(&format_basis(&b)).unwrap(), b);

        let shipped = shipped_basis();
        assert_eq!(&parse_basis(&format_basis(shipped)).unwrap(), shipped);
    }

    #[test]
    fn basis_parse_errors() {
        assert!(parse_basis("EMOR 4 2\n0 0.3 0.6 1\n0 0.1 0.1 0\n").is_err());
        assert!(parse_basis("EMOR 4 1\n0 0.3 0.6\n0 0.1 0.1 0\n").is_err());
        assert!(parse_basis("EMOR 4 1\n0 x 0.6 1\n0 0.1 0.1 0\n").is_err());
        assert!(parse_basis("EMOR 4\n").is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let b = tiny_basis();
        assert_eq!(reconstruct_inverse_crf(&[0.0], &b).unwrap(), b.mean);
        let e1 = reconstruct_inverse_crf(&[1.0], &b).unwrap();
        for i in 0..4 {
            assert_eq!(e1[i], b.mean[i] + b.vectors[0][i]);
        }
        assert!(reconstruct_inverse_crf(&[1.0, 2.0], &b).is_err());
    }

    #[test]
    fn projection_examples() {
        let out = project_monotone(&[0.0, 0.6, 0.4, 1.0]).unwrap();
        assert_eq!(out.samples(), &[0.0, 0.5, 0.5, 1.0]);
        let valid = [0.0, 0.1, 0.1, 0.7, 1.0];
        assert_eq!(project_monotone(&valid).unwrap().samples(), &valid);
        let err = project_monotone(&[0.3; 5]).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
        assert!(project_monotone(&[1.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn projection_pins_first_sample_when_shifted() {
        let out = project_monotone(&[0.2, -0.1, 0.5, 0.9]).unwrap();
        assert_eq!(out.samples()[0], 0.0);
        assert_eq!(out.samples()[3], 1.0);
    }

    #[test]
    fn invert_examples() {
        let id = CrfCurve::identity(1024);
        let inv = invert_curve(&id);
        for (a, b) in inv.samples().iter().zip(id.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sq = CrfCurve::gamma(1024, 2.0);
        let root = invert_curve(&sq);
        for (i, v) in root.samples().iter().enumerate() {
            assert!((v - grid(i, 1024).sqrt()).abs() < 2.0 / 1024.0);
        }
    }

    #[test]
    fn invert_maps_flat_runs_to_left_edge() {
        let g = CrfCurve::new(vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        let h = invert_curve(&g);
        // y = 2/3 lies between samples 2 (0.5) and 3 (1.0)
        assert!((h.samples()[2] - (2.0 + (2.0 / 3.0 - 0.5) / 0.5) / 3.0).abs() < 1e-15);
        let flat = CrfCurve::new(vec![0.0, 1.0 / 3.0, 1.0, 1.0]).unwrap();
        let h = invert_curve(&flat);
        assert_eq!(h.samples()[1], 1.0 / 3.0);
        assert_eq!(h.samples()[3], 1.0);
    }

    #[test]
    fn apply_examples() {
        let img = HdrImage::from_fn(4, 4, |y, x, c| (y * 12 + x * 3 + c) as f64 / 47.0).unwrap();
        let out = apply_curve(&img, &CrfCurve::identity(1024)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let g2 = CrfCurve::gamma(1024, 2.0);
        assert_eq!(g2.eval(1.0).unwrap(), 1.0);
        assert!((g2.eval(0.5).unwrap() - 0.25).abs() < 2.0 / 1024.0);
        let bad = HdrImage::constant(1, 1, 1.5).unwrap();
        assert!(apply_curve(&bad, &g2).is_err());
    }

    #[test]
    fn gamma_basis_degenerate_for_equal_gammas() {
        let err = synth_gamma_basis(&[2.2; 12], 64, 3).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn fit_weights_examples() {
        let basis = shipped_basis();
        let w = fit_weights(&basis.mean, basis).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-12));
        let mut target = basis.mean.clone();
        for (t, v) in target.iter_mut().zip(&basis.vectors[1]) {
            *t += 0.5 * v;
        }
        let w = fit_weights(&target, basis).unwrap();
        for (k, wk) in w.iter().enumerate() {
            let want = if k == 1 { 0.5 } else { 0.0 };
            assert!((wk - want).abs() < 1e-9, "w[{k}] = {wk}");
        }
    }

    #[test]
    fn fit_rejects_rank_deficient_basis() {
        let v = vec![0.0, 0.1, 0.2, 0.0];
        let b = EmorBasis::new(vec![0.0, 0.3, 0.6, 1.0], vec![v.clone(), v]).unwrap();
        assert!(matches!(
            fit_weights(&[0.0, 0.2, 0.5, 1.0], &b),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn curve_dump_round_trip() {
        let g = CrfCurve::gamma(1024, 2.2);
        let text = format_curve(g.samples());
        assert_eq!(text.lines().count(), 1024);
        assert_eq!(parse_curve(&text).unwrap(), g.samples());
    }

    proptest! {
        #[test]
        fn projection_is_valid_and_idempotent(
            raw in prop::collection::vec(-1.0f64..1.0, 2..40)
        ) {
            if let Ok(p) = project_monotone(&raw) {
                let s = p.samples();
                prop_assert_eq!(s[0], 0.0);
                prop_assert_eq!(s[s.len() - 1], 1.0);
                prop_assert!(s.windows(2).all(|w| w[1] >= w[0]));
                let again = project_monotone(s).unwrap();
                prop_assert_eq!(again.samples(), s);
            }
        }

        #[test]
        fn reconstruct_is_linear(a in -3.0f64..3.0, w in prop::collection::vec(-1.0f64..1.0, 11)) {
            let b = shipped_basis();
            let base = reconstruct_inverse_crf(&w, b).unwrap();
            let aw: Vec<f64> = w.iter().map(|v| a * v).collect();
            let scaled = reconstruct_inverse_crf(&aw, b).unwrap();
            for i in 0..b.d() {
                let lhs = scaled[i] - b.mean[i];
                let rhs = a * (base[i] - b.mean[i]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
