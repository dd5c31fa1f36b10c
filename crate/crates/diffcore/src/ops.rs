//! Built-in operations and the `Graph` helpers that record them.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Operation, Var};
use crate::tensor::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DiffError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

pub(crate) fn dims4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .ok_or_else(|| DiffError::shape(op, format!("expected NCHW, got {:?}", t.shape())))
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| DiffError::shape(op, format!("expected (N, F), got {:?}", t.shape())))
}

/// Pointwise maps. Derivatives at kinks take the left-segment slope.
#[derive(Clone, Copy, Debug)]
pub enum Pointwise {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Square,
    Abs,
    /// `ln(max(x, eps))`
    LogClamped(f64),
    /// `ln(1 + mu x) / ln(1 + mu)`
    MuLaw(f64),
    Scale(f64),
    AddScalar(f64),
    /// Clamp to `[lo, hi]`; the gradient passes on the closed interval.
    Clamp(f64, f64),
}

impl Pointwise {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Pointwise::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Pointwise::Relu => x.max(0.0),
            Pointwise::Tanh => x.tanh(),
            Pointwise::Square => x * x,
            Pointwise::Abs => x.abs(),
            Pointwise::LogClamped(eps) => x.max(eps).ln(),
            Pointwise::MuLaw(mu) => (mu * x).ln_1p() / mu.ln_1p(),
            Pointwise::Scale(c) => c * x,
            Pointwise::AddScalar(c) => x + c,
            Pointwise::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// `dy/dx` given input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Square => 2.0 * x,
            Pointwise::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Pointwise::LogClamped(eps) => {
                if x > eps {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Pointwise::MuLaw(mu) => mu / ((1.0 + mu * x) * mu.ln_1p()),
            Pointwise::Scale(c) => c,
            Pointwise::AddScalar(_) => 1.0,
            Pointwise::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Operation for Pointwise {
    fn name(&self) -> &'static str {
        match self {
            Pointwise::LeakyRelu(_) => "leaky_relu",
            Pointwise::Relu => "relu",
            Pointwise::Tanh => "tanh",
            Pointwise::Square => "square",
            Pointwise::Abs => "abs",
            Pointwise::LogClamped(_) => "log",
            Pointwise::MuLaw(_) => "mu_law",
            Pointwise::Scale(_) => "scale",
            Pointwise::AddScalar(_) => "add_scalar",
            Pointwise::Clamp(..) => "clamp",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| self.eval(x)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut g = grad.clone();
        for ((gv, &x), &y) in g
            .data_mut()
            .iter_mut()
            .zip(inputs[0].data())
            .zip(output.data())
        {
            *gv *= self.derivative(x, y);
        }
        vec![Some(g)]
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary(BinaryKind);

impl Operation for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape(self.name(), a, b)?;
        Ok(match self.0 {
            BinaryKind::Add => a.zip_map(b, |x, y| x + y),
            BinaryKind::Sub => a.zip_map(b, |x, y| x - y),
            BinaryKind::Mul => a.zip_map(b, |x, y| x * y),
        })
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        match self.0 {
            BinaryKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
            BinaryKind::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            BinaryKind::Mul => vec![
                needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b)),
                needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a)),
            ],
        }
    }
}

#[derive(Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
}

struct Reduce(ReduceKind);

impl Operation for Reduce {
    fn name(&self) -> &'static str {
        match self.0 {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.is_empty() {
            return Err(DiffError::shape(self.name(), "empty input"));
        }
        Ok(Tensor::scalar(match self.0 {
            ReduceKind::Sum => x.sum(),
            ReduceKind::Mean => x.mean(),
        }))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let scale = match self.0 {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / inputs[0].len() as f64,
        };
        vec![Some(Tensor::full(inputs[0].shape(), grad.item() * scale))]
    }
}

/// `(N, F) x (F, G) + (G)`
struct Dense;

impl Operation for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, f) = dims2("dense", x)?;
        let (wf, g) = dims2("dense", w)?;
        if wf != f || b.shape() != [g] {
            return Err(DiffError::shape(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = vec![0.0; n * g];
        for i in 0..n {
            let row = &mut out[i * g..(i + 1) * g];
            row.copy_from_slice(b.data());
            for k in 0..f {
                let xv = x.data()[i * f + k];
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in row.iter_mut().zip(&w.data()[k * g..(k + 1) * g]) {
                    *o += xv * wv;
                }
            }
        }
        Tensor::new(&[n, g], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, f) = x.dims2().expect("checked");
        let g = w.shape()[1];
        let gd = grad.data();
        let gx = needs[0].then(|| {
            let mut out = vec![0.0; n * f];
            for i in 0..n {
                for k in 0..f {
                    let wrow = &w.data()[k * g..(k + 1) * g];
                    out[i * f + k] = wrow
                        .iter()
                        .zip(&gd[i * g..(i + 1) * g])
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
            Tensor::new(&[n, f], out).expect("shape")
        });
        let gw = needs[1].then(|| {
            let mut out = vec![0.0; f * g];
            for i in 0..n {
                for k in 0..f {
                    let xv = x.data()[i * f + k];
                    for (o, &gv) in out[k * g..(k + 1) * g]
                        .iter_mut()
                        .zip(&gd[i * g..(i + 1) * g])
                    {
                        *o += xv * gv;
                    }
                }
            }
            Tensor::new(&[f, g], out).expect("shape")
        });
        let gb = needs[2].then(|| {
            let mut out = vec![0.0; g];
            for i in 0..n {
                for (o, &gv) in out.iter_mut().zip(&gd[i * g..(i + 1) * g]) {
                    *o += gv;
                }
            }
            Tensor::new(&[g], out).expect("shape")
        });
        vec![gx, gw, gb]
    }
}

/// Concatenation along the channel axis of NCHW tensors.
struct ConcatChannels;

impl Operation for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, _, h, w) = dims4("concat", inputs[0])?;
        let mut total = 0;
        for t in inputs {
            let (tn, tc, th, tw) = dims4("concat", t)?;
            if (tn, th, tw) != (n, h, w) {
                return Err(DiffError::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape(), inputs[0].shape()),
                ));
            }
            total += tc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for t in inputs {
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Tensor::new(&[n, total, h, w], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, total, h, w) = grad.dims4().expect("nchw");
        let plane = h * w;
        let mut offset = 0;
        let mut result = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let c = t.shape()[1];
            if need {
                let mut d = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let start = (b * total + offset) * plane;
                    d.extend_from_slice(&grad.data()[start..start + c * plane]);
                }
                result.push(Some(Tensor::new(t.shape(), d).expect("shape")));
            } else {
                result.push(None);
            }
            offset += c;
        }
        result
    }
}

struct SliceChannels {
    start: usize,
    len: usize,
}

impl Operation for SliceChannels {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c, h, w) = dims4("slice_channels", inputs[0])?;
        if self.start + self.len > c || self.len == 0 {
            return Err(DiffError::shape(
                "slice_channels",
                format!(
                    "[{}, {}) of {c} channels",
                    self.start,
                    self.start + self.len
                ),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * self.len * plane);
        for b in 0..n {
            let s = (b * c + self.start) * plane;
            out.extend_from_slice(&inputs[0].data()[s..s + self.len * plane]);
        }
        Tensor::new(&[n, self.len, h, w], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let plane = h * w;
        let mut out = Tensor::zeros(inputs[0].shape());
        for b in 0..n {
            let s = (b * c + self.start) * plane;
            out.data_mut()[s..s + self.len * plane]
                .copy_from_slice(&grad.data()[b * self.len * plane..(b + 1) * self.len * plane]);
        }
        vec![Some(out)]
    }
}

/// Nearest-neighbour upsampling by two.
struct UpsampleNearest;

impl Operation for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c, h, w) = dims4("upsample_nearest", inputs[0])?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = inputs[0].data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                let srow = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let orow = &mut out[(p * oh + y) * ow..(p * oh + y + 1) * ow];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = srow[x / 2];
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h * w];
        let gd = grad.data();
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * h + y / 2) * w + x / 2] += gd[(p * oh + y) * ow + x];
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
    }
}

/// 2x2 average pooling with stride 2; a trailing odd row or column is dropped.
struct AvgPool2;

impl Operation for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c, h, w) = dims4("avg_pool2", inputs[0])?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(DiffError::shape(
                "avg_pool2",
                format!("input {h}x{w} too small"),
            ));
        }
        let src = inputs[0].data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = p * h * w;
                    let s = src[base + 2 * y * w + 2 * x]
                        + src[base + 2 * y * w + 2 * x + 1]
                        + src[base + (2 * y + 1) * w + 2 * x]
                        + src[base + (2 * y + 1) * w + 2 * x + 1];
                    out[(p * oh + y) * ow + x] = 0.25 * s;
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let g = 0.25 * grad.data()[(p * oh + y) * ow + x];
                    let base = p * h * w;
                    out[base + 2 * y * w + 2 * x] += g;
                    out[base + 2 * y * w + 2 * x + 1] += g;
                    out[base + (2 * y + 1) * w + 2 * x] += g;
                    out[base + (2 * y + 1) * w + 2 * x + 1] += g;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
    }
}

/// `(N, C, H, W) -> (N, C)`
struct GlobalAvgPool;

impl Operation for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c, h, w) = dims4("global_avg_pool", inputs[0])?;
        let plane = h * w;
        let out = inputs[0]
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Tensor::new(&[n, c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (_, _, h, w) = inputs[0].dims4().expect("nchw");
        let plane = h * w;
        let mut out = Vec::with_capacity(inputs[0].len());
        for &g in grad.data() {
            out.extend(std::iter::repeat_n(g / plane as f64, plane));
        }
        vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
    }
}

/// Mean of absolute horizontal and vertical neighbour differences, taken
/// over the pooled set of all difference terms.
struct TotalVariation;

impl Operation for TotalVariation {
    fn name(&self) -> &'static str {
        "total_variation"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, c, h, w) = dims4("total_variation", inputs[0])?;
        let count = n * c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
        if count == 0 {
            return Err(DiffError::shape(
                "total_variation",
                "image has no neighbour pairs",
            ));
        }
        let d = inputs[0].data();
        let mut s = 0.0;
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = d[base + y * w + x];
                    if x + 1 < w {
                        s += (d[base + y * w + x + 1] - v).abs();
                    }
                    if y + 1 < h {
                        s += (d[base + (y + 1) * w + x] - v).abs();
                    }
                }
            }
        }
        Ok(Tensor::scalar(s / count as f64))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let count = n * c * (h * (w - 1) + (h - 1) * w);
        let scale = grad.item() / count as f64;
        let d = inputs[0].data();
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        let mut out = vec![0.0; d.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let i = base + y * w + x;
                    if x + 1 < w {
                        let s = sign(d[i + 1] - d[i]) * scale;
                        out[i + 1] += s;
                        out[i] -= s;
                    }
                    if y + 1 < h {
                        let s = sign(d[i + w] - d[i]) * scale;
                        out[i + w] += s;
                        out[i] -= s;
                    }
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
    }
}

impl Graph {
    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        self.apply(f, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.apply(Pointwise::LeakyRelu(alpha), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise::Tanh, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise::Square, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Pointwise::Abs, &[x])
    }

    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Pointwise::LogClamped(eps), &[x])
    }

    pub fn mu_law(&mut self, x: Var, mu: f64) -> Result<Var> {
        self.apply(Pointwise::MuLaw(mu), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Pointwise::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Pointwise::AddScalar(c), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Pointwise::Clamp(lo, hi), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary(BinaryKind::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary(BinaryKind::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary(BinaryKind::Mul), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Reduce(ReduceKind::Sum), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Reduce(ReduceKind::Mean), &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Dense, &[x, w, b])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DiffError::shape("concat", "no inputs"));
        }
        self.apply(ConcatChannels, xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(SliceChannels { start, len }, &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        self.apply(UpsampleNearest, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(AvgPool2, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(GlobalAvgPool, &[x])
    }

    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        self.apply(TotalVariation, &[x])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d)?;
        self.mean(s)
    }
}
