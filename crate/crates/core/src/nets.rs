//! The four reversal networks and their composition.
//!
//! Images travel as `(N, 3, H, W)` tensors and curves as `(N, D)`. Every
//! network reads its weights from a [`Bound`] parameter set, so the same
//! forward code serves training (trainable binding) and inference.

use diffcore::rng::{seeded, SeededRng};
use diffcore::{he_normal, Bound, DiffError, Graph, Operation, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::crf::{CrfCurve, CurveOps, EmorBasis};
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureOps, FEATURE_CHANNELS};
use crate::imagio::{HdrImage, LdrImage};
use crate::objectives::LossWeights;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_GAMMA_THRESH: f64 = 0.95;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub preset: Preset,
    /// U-Net depth; inputs must be divisible by `2^(levels - 1)`.
    pub levels: usize,
    pub base_channels: usize,
    /// Output channels of each backbone stage; every stage after the first
    /// halves the resolution.
    pub backbone_channels: Vec<usize>,
    /// Residual blocks per backbone stage.
    pub backbone_blocks: usize,
    /// Training patch side.
    pub patch: usize,
}

impl NetConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            levels: 3,
            base_channels: 8,
            backbone_channels: vec![16, 32],
            backbone_blocks: 1,
            patch: 64,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            levels: 6,
            base_channels: 16,
            backbone_channels: vec![64, 128, 256, 512],
            backbone_blocks: 2,
            patch: 256,
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 10 || self.base_channels == 0 {
            return Err(invalid!("U-Net needs 1..=10 levels and a positive width"));
        }
        if self.backbone_channels.is_empty()
            || self.backbone_channels.contains(&0)
            || self.backbone_blocks == 0
        {
            return Err(invalid!("backbone needs at least one non-empty stage"));
        }
        if self.patch == 0 || self.patch % self.size_multiple() != 0 {
            return Err(invalid!(
                "patch size {} must be a positive multiple of {}",
                self.patch,
                self.size_multiple()
            ));
        }
        Ok(())
    }
}

/// How the output layer of a network starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    Zero,
    /// He initialisation scaled by the factor.
    Scaled(f64),
}

fn conv_params(
    set: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
    rng: &mut SeededRng,
) {
    let w = if gain == 0.0 {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        he_normal(&[cout, cin, k, k], cin * k * k, gain, rng)
    };
    set.insert(format!("{name}.w"), w)
        .expect("unique layer names");
    set.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
        .expect("unique layer names");
}

fn dense_params(
    set: &mut ParamSet,
    name: &str,
    fin: usize,
    fout: usize,
    gain: f64,
    rng: &mut SeededRng,
) {
    let w = if gain == 0.0 {
        Tensor::zeros(&[fin, fout])
    } else {
        he_normal(&[fin, fout], fin, gain, rng)
    };
    set.insert(format!("{name}.w"), w)
        .expect("unique layer names");
    set.insert(format!("{name}.b"), Tensor::zeros(&[fout]))
        .expect("unique layer names");
}

fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

fn head_gain(h: HeadInit) -> f64 {
    match h {
        HeadInit::Zero => 0.0,
        HeadInit::Scaled(s) => s * lrelu_gain(),
    }
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b, stride).map_err(|e| e.in_layer(name))?)
}

fn conv_lrelu(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let c = conv(g, p, name, x, stride)?;
    Ok(g.leaky_relu(c, LEAKY_SLOPE)?)
}

fn dense(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(g.dense(x, w, b).map_err(|e| e.in_layer(name))?)
}

fn unet_width(cfg: &NetConfig, level: usize) -> usize {
    cfg.base_channels << level
}

/// Encoder of two convolutions per level (the first strided below the top
/// level), decoder of nearest upsampling, convolution, skip concatenation
/// and convolution, then a 3x3 output layer.
pub fn unet_params(
    cfg: &NetConfig,
    cin: usize,
    cout: usize,
    head: HeadInit,
    rng: &mut SeededRng,
) -> ParamSet {
    let mut set = ParamSet::new();
    let gain = lrelu_gain();
    let mut c = cin;
    for l in 0..cfg.levels {
        let w = unet_width(cfg, l);
        conv_params(&mut set, &format!("enc{l}a"), c, w, 3, gain, rng);
        conv_params(&mut set, &format!("enc{l}b"), w, w, 3, gain, rng);
        c = w;
    }
    for l in (0..cfg.levels - 1).rev() {
        let w = unet_width(cfg, l);
        conv_params(&mut set, &format!("dec{l}up"), c, w, 3, gain, rng);
        conv_params(&mut set, &format!("dec{l}"), 2 * w, w, 3, gain, rng);
        c = w;
    }
    conv_params(&mut set, "head", c, cout, 3, head_gain(head), rng);
    set
}

pub fn unet_forward(g: &mut Graph, p: &Bound, cfg: &NetConfig, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let m = cfg.size_multiple();
    if shape.len() != 4 || shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(Error::Diff(DiffError::shape(
            "unet",
            format!("input {shape:?} must be NCHW with sides divisible by {m}"),
        )));
    }
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for l in 0..cfg.levels {
        let stride = if l == 0 { 1 } else { 2 };
        h = conv_lrelu(g, p, &format!("enc{l}a"), h, stride)?;
        h = conv_lrelu(g, p, &format!("enc{l}b"), h, 1)?;
        skips.push(h);
    }
    for l in (0..cfg.levels - 1).rev() {
        let up = g.upsample_nearest(h)?;
        let up = conv_lrelu(g, p, &format!("dec{l}up"), up, 1)?;
        let cat = g.concat(&[up, skips[l]])?;
        h = conv_lrelu(g, p, &format!("dec{l}"), cat, 1)?;
    }
    conv(g, p, "head", h, 1)
}

/// Strided stem, residual stages, global average pooling and two dense
/// layers producing `k` curve weights.
pub fn backbone_params(
    cfg: &NetConfig,
    cin: usize,
    k: usize,
    head: HeadInit,
    rng: &mut SeededRng,
) -> ParamSet {
    let mut set = ParamSet::new();
    let gain = lrelu_gain();
    let c0 = cfg.backbone_channels[0];
    conv_params(&mut set, "stem", cin, c0, 3, gain, rng);
    let mut c = c0;
    for (s, &w) in cfg.backbone_channels.iter().enumerate() {
        for b in 0..cfg.backbone_blocks {
            let name = format!("s{s}b{b}");
            conv_params(&mut set, &format!("{name}c1"), c, w, 3, gain, rng);
            conv_params(&mut set, &format!("{name}c2"), w, w, 3, gain, rng);
            if c != w || (s > 0 && b == 0) {
                conv_params(&mut set, &format!("{name}proj"), c, w, 1, 1.0, rng);
            }
            c = w;
        }
    }
    dense_params(&mut set, "fc1", c, c, gain, rng);
    dense_params(&mut set, "fc2", c, k, head_gain(head), rng);
    set
}

pub fn backbone_forward(g: &mut Graph, p: &Bound, cfg: &NetConfig, x: Var) -> Result<Var> {
    let mut h = conv_lrelu(g, p, "stem", x, 2)?;
    for s in 0..cfg.backbone_channels.len() {
        for b in 0..cfg.backbone_blocks {
            let name = format!("s{s}b{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let r = conv_lrelu(g, p, &format!("{name}c1"), h, stride)?;
            let r = conv(g, p, &format!("{name}c2"), r, 1)?;
            let proj = format!("{name}proj");
            let short = if p.var(&format!("{proj}.w")).is_ok() {
                conv(g, p, &proj, h, stride)?
            } else {
                h
            };
            let sum = g.add(r, short)?;
            h = g.leaky_relu(sum, LEAKY_SLOPE)?;
        }
    }
    let pooled = g.global_avg_pool(h)?;
    let f = dense(g, p, "fc1", pooled)?;
    let f = g.leaky_relu(f, LEAKY_SLOPE)?;
    dense(g, p, "fc2", f)
}

/// `max(0, x - gamma) / (1 - gamma)`; the slope at `x = gamma` is 0.
pub struct OverexposureMask {
    pub gamma: f64,
}

impl Operation for OverexposureMask {
    fn name(&self) -> &'static str {
        "overexposure_mask"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let gamma = self.gamma;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(DiffError::domain(
                self.name(),
                format!("threshold {gamma} outside (0, 1)"),
            ));
        }
        Ok(inputs[0].map(|x| (x - gamma).max(0.0) / (1.0 - gamma)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let slope = 1.0 / (1.0 - self.gamma);
        let gx = inputs[0].zip_map(grad, |x, up| if x > self.gamma { slope * up } else { 0.0 });
        vec![Some(gx)]
    }
}

pub fn overexposure_mask(g: &mut Graph, lin: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid!("mask threshold must lie in (0, 1), got {gamma}"));
    }
    Ok(g.apply(OverexposureMask { gamma }, &[lin])?)
}

/// `clamp(L + tanh(net(L)), 0, 1)`.
pub fn dequantize_forward(g: &mut Graph, ldr: Var, p: &Bound, cfg: &NetConfig) -> Result<Var> {
    let r = unet_forward(g, p, cfg, ldr)?;
    let r = g.tanh(r)?;
    let s = g.add(ldr, r)?;
    Ok(g.clamp(s, 0.0, 1.0)?)
}

/// Predicts an inverse response curve from the feature stack of `deq` and
/// applies it. Returns `(curve (N, D), linear image)`.
pub fn linearize_forward(
    g: &mut Graph,
    deq: Var,
    p: &Bound,
    cfg: &NetConfig,
    basis: &EmorBasis,
) -> Result<(Var, Var)> {
    let feats = g.feature_stack(deq)?;
    let w = backbone_forward(g, p, cfg, feats)?;
    let curve = curve_from_weights(g, w, basis)?;
    let lin = g.apply_curve(deq, curve)?;
    Ok((curve, lin))
}

/// `project(g0 + w B)` for `(N, K)` weights.
pub fn curve_from_weights(g: &mut Graph, w: Var, basis: &EmorBasis) -> Result<Var> {
    let b = g.constant(basis.matrix_tensor());
    let m = g.constant(basis.mean_tensor());
    let raw = g.dense(w, b, m).map_err(|e| e.in_layer("reconstruct"))?;
    Ok(g.project_monotone(raw)?)
}

/// `lin + alpha(lin) * relu(net(lin))`.
pub fn hallucinate_forward(
    g: &mut Graph,
    lin: Var,
    p: &Bound,
    cfg: &NetConfig,
    gamma: f64,
) -> Result<Var> {
    let alpha = overexposure_mask(g, lin, gamma)?;
    let r = unet_forward(g, p, cfg, lin)?;
    let r = g.relu(r)?;
    let masked = g.mul(alpha, r)?;
    Ok(g.add(lin, masked)?)
}

/// `max(hdr + net([deq, lin, hdr]), 0)`.
pub fn refine_forward(
    g: &mut Graph,
    hdr: Var,
    deq: Var,
    lin: Var,
    p: &Bound,
    cfg: &NetConfig,
) -> Result<Var> {
    let cat = g
        .concat(&[deq, lin, hdr])
        .map_err(|e| e.in_layer("refine"))?;
    let r = unet_forward(g, p, cfg, cat)?;
    let s = g.add(hdr, r)?;
    Ok(g.clamp(s, 0.0, f64::INFINITY)?)
}

/// Parameters of all four networks plus the curve model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub deq: ParamSet,
    pub lin: ParamSet,
    pub hal: ParamSet,
    pub refine: ParamSet,
    pub basis: EmorBasis,
    pub gamma_thresh: f64,
    pub lambdas: LossWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Net {
    Deq,
    Lin,
    Hal,
    Ref,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Deq, Net::Lin, Net::Hal, Net::Ref];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::Deq => "deq/",
            Net::Lin => "lin/",
            Net::Hal => "hal/",
            Net::Ref => "ref/",
        }
    }
}

/// Output-layer initialisation per network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadInits {
    pub deq: HeadInit,
    pub lin: HeadInit,
    pub hal: HeadInit,
    pub refine: HeadInit,
}

impl Default for HeadInits {
    /// The dequantization head starts random, the hallucination head small
    /// (a zero head would sit on the ReLU kink and never receive gradient),
    /// and the linearization and refinement heads start at zero so those
    /// stages begin at the mean curve and at the unrefined estimate.
    fn default() -> Self {
        Self {
            deq: HeadInit::Scaled(1.0),
            lin: HeadInit::Zero,
            hal: HeadInit::Scaled(0.1),
            refine: HeadInit::Zero,
        }
    }
}

impl HeadInits {
    pub fn zero() -> Self {
        Self {
            deq: HeadInit::Zero,
            lin: HeadInit::Zero,
            hal: HeadInit::Zero,
            refine: HeadInit::Zero,
        }
    }
}

impl ModelBundle {
    pub fn init(config: NetConfig, basis: EmorBasis, heads: HeadInits, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = |i: u64| seeded(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i));
        let deq = unet_params(&config, 3, 3, heads.deq, &mut rng(1));
        let lin = backbone_params(&config, FEATURE_CHANNELS, basis.k(), heads.lin, &mut rng(2));
        let hal = unet_params(&config, 3, 3, heads.hal, &mut rng(3));
        let refine = unet_params(&config, 9, 3, heads.refine, &mut rng(4));
        Ok(Self {
            config,
            deq,
            lin,
            hal,
            refine,
            basis,
            gamma_thresh: DEFAULT_GAMMA_THRESH,
            lambdas: LossWeights::default(),
        })
    }

    /// Zero heads over a basis whose mean is the identity curve, so every
    /// stage passes its input through unchanged.
    pub fn identity(config: NetConfig, basis: &EmorBasis) -> Result<Self> {
        let mean = CrfCurve::identity(basis.d()).samples().to_vec();
        let basis = EmorBasis::new(mean, basis.vectors.clone())?;
        Self::init(config, basis, HeadInits::zero(), 0)
    }

    pub fn params(&self, net: Net) -> &ParamSet {
        match net {
            Net::Deq => &self.deq,
            Net::Lin => &self.lin,
            Net::Hal => &self.hal,
            Net::Ref => &self.refine,
        }
    }

    pub fn params_mut(&mut self, net: Net) -> &mut ParamSet {
        match net {
            Net::Deq => &mut self.deq,
            Net::Lin => &mut self.lin,
            Net::Hal => &mut self.hal,
            Net::Ref => &mut self.refine,
        }
    }

    /// Binds all four sets; those listed in `trainable` receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &[Net]) -> BundleBinding {
        let mut bind = |n: Net| self.params(n).bind(g, trainable.contains(&n));
        BundleBinding {
            deq: bind(Net::Deq),
            lin: bind(Net::Lin),
            hal: bind(Net::Hal),
            refine: bind(Net::Ref),
        }
    }
}

pub struct BundleBinding {
    pub deq: Bound,
    pub lin: Bound,
    pub hal: Bound,
    pub refine: Bound,
}

impl BundleBinding {
    pub fn get(&self, net: Net) -> &Bound {
        match net {
            Net::Deq => &self.deq,
            Net::Lin => &self.lin,
            Net::Hal => &self.hal,
            Net::Ref => &self.refine,
        }
    }
}

/// Graph handles of every stage output.
#[derive(Clone, Copy, Debug)]
pub struct PipelineVars {
    pub deq: Var,
    pub curve: Var,
    pub lin: Var,
    pub hdr: Var,
    pub refined: Option<Var>,
}

pub fn pipeline_graph(
    g: &mut Graph,
    ldr: Var,
    bundle: &ModelBundle,
    b: &BundleBinding,
    use_refinement: bool,
) -> Result<PipelineVars> {
    let cfg = &bundle.config;
    let deq = dequantize_forward(g, ldr, &b.deq, cfg)?;
    let (curve, lin) = linearize_forward(g, deq, &b.lin, cfg, &bundle.basis)?;
    let hdr = hallucinate_forward(g, lin, &b.hal, cfg, bundle.gamma_thresh)?;
    let refined = if use_refinement {
        Some(refine_forward(g, hdr, deq, lin, &b.refine, cfg)?)
    } else {
        None
    };
    Ok(PipelineVars {
        deq,
        curve,
        lin,
        hdr,
        refined,
    })
}

/// Concrete stage outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub deq: HdrImage,
    pub curve: CrfCurve,
    pub lin: HdrImage,
    pub mask: HdrImage,
    pub hdr: HdrImage,
    pub refined: Option<HdrImage>,
}

impl PipelineOutput {
    /// The refined estimate when present, otherwise the hallucinated one.
    pub fn final_hdr(&self) -> &HdrImage {
        self.refined.as_ref().unwrap_or(&self.hdr)
    }
}

/// Runs every stage on `ldr`, whose sides must be multiples of
/// [`NetConfig::size_multiple`].
pub fn full_pipeline(
    ldr: &LdrImage,
    bundle: &ModelBundle,
    use_refinement: bool,
) -> Result<PipelineOutput> {
    let mut g = Graph::new();
    let x = g.constant(ldr.unit_view().to_tensor());
    let b = bundle.bind(&mut g, &[]);
    let v = pipeline_graph(&mut g, x, bundle, &b, use_refinement)?;
    let mask = overexposure_mask(&mut g, v.lin, bundle.gamma_thresh)?;
    let curve = CrfCurve::new(g.value(v.curve).data().to_vec())?;
    Ok(PipelineOutput {
        deq: HdrImage::from_tensor(g.value(v.deq), 0)?,
        curve,
        lin: HdrImage::from_tensor(g.value(v.lin), 0)?,
        mask: HdrImage::from_tensor(g.value(mask), 0)?,
        hdr: HdrImage::from_tensor(g.value(v.hdr), 0)?,
        refined: v
            .refined
            .map(|r| HdrImage::from_tensor(g.value(r), 0))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::shipped_basis;

    fn toy_bundle(heads: HeadInits) -> ModelBundle {
        ModelBundle::init(NetConfig::toy(), shipped_basis().clone(), heads, 3).unwrap()
    }

    #[test]
    fn mask_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4], vec![0.95, 1.0, 0.975, 0.5]).unwrap());
        let a = overexposure_mask(&mut g, x, 0.95).unwrap();
        let v = g.value(a).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 0.5).abs() < 1e-12);
        assert_eq!(v[3], 0.0);
        assert!(overexposure_mask(&mut g, x, 1.0).is_err());
    }

    #[test]
    fn toy_shapes_and_resolution_independence() {
        let bundle = toy_bundle(HeadInits::default());
        for side in [64, 96] {
            let ldr = LdrImage::new(
                side,
                side,
                (0..side * side * 3).map(|i| (i * 37 % 256) as u8).collect(),
            )
            .unwrap();
            let out = full_pipeline(&ldr, &bundle, true).unwrap();
            assert_eq!(out.hdr.height(), side);
            assert_eq!(out.curve.len(), 1024);
            assert!(out.deq.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out
                .hdr
                .data()
                .iter()
                .zip(out.lin.data())
                .all(|(h, l)| h >= l));
        }
    }

    #[test]
    fn odd_sizes_are_rejected_with_layer_name() {
        let bundle = toy_bundle(HeadInits::default());
        let ldr = LdrImage::new(10, 10, vec![100; 300]).unwrap();
        let err = full_pipeline(&ldr, &bundle, false).unwrap_err().to_string();
        assert!(err.contains("unet"), "{err}");
    }

    #[test]
    fn bundle_init_is_deterministic() {
        assert_eq!(
            toy_bundle(HeadInits::default()),
            toy_bundle(HeadInits::default())
        );
    }

    #[test]
    fn paper_preset_builds() {
        let cfg = NetConfig::paper();
        cfg.validate().unwrap();
        let b = ModelBundle::init(cfg, shipped_basis().clone(), HeadInits::default(), 0).unwrap();
        assert!(b.deq.numel() > 1_000_000);
        assert!(b.lin.get("s3b1c2.w").is_some());
    }
}
