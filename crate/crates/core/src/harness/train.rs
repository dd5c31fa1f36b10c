//! Stage-wise, joint and refinement training loops.

use diffcore::rng::{seeded, uniform, SeededRng};
use diffcore::{AdamConfig, Graph, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::dataset::LoadedSample;
use crate::nets::{
    dequantize_forward, hallucinate_forward, linearize_forward, pipeline_graph, BundleBinding,
    ModelBundle, Net, Preset,
};
use crate::objectives::{
    loss_total, LossBreakdown, LossWeights, PerceptualExtractor, Predictions, Targets,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Deq,
    Lin,
    Hal,
    Joint,
    Refine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Deq => "deq",
            Stage::Lin => "lin",
            Stage::Hal => "hal",
            Stage::Joint => "joint",
            Stage::Refine => "refine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deq" => Ok(Stage::Deq),
            "lin" => Ok(Stage::Lin),
            "hal" => Ok(Stage::Hal),
            "joint" => Ok(Stage::Joint),
            "refine" => Ok(Stage::Refine),
            other => Err(invalid!("unknown stage {other:?}")),
        }
    }

    /// Networks whose parameters this stage updates.
    pub fn trainable(self) -> &'static [Net] {
        match self {
            Stage::Deq => &[Net::Deq],
            Stage::Lin => &[Net::Lin],
            Stage::Hal => &[Net::Hal],
            Stage::Joint => &[Net::Deq, Net::Lin, Net::Hal],
            Stage::Refine => &[Net::Deq, Net::Lin, Net::Hal, Net::Ref],
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Stage::Deq | Stage::Lin | Stage::Hal => 1e-4,
            Stage::Joint | Stage::Refine => 1e-5,
        }
    }

    pub fn default_batch(self) -> usize {
        match self {
            Stage::Deq | Stage::Lin | Stage::Hal => 8,
            Stage::Joint | Stage::Refine => 4,
        }
    }

    /// Objective weights of the stage. Stage-wise training uses each
    /// network's own loss; the joint and refinement stages use `lambdas`.
    pub fn weights(self, lambdas: &LossWeights) -> LossWeights {
        let z = LossWeights::zero();
        match self {
            Stage::Deq => LossWeights { deq: 1.0, ..z },
            Stage::Lin => LossWeights {
                lin: 1.0,
                crf: 0.1,
                ..z
            },
            Stage::Hal => LossWeights {
                hal: 1.0,
                perceptual: lambdas.perceptual,
                tv: lambdas.tv,
                ..z
            },
            Stage::Joint => *lambdas,
            Stage::Refine => lambdas.for_refinement(),
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Deq => 0x11,
            Stage::Lin => 0x22,
            Stage::Hal => 0x33,
            Stage::Joint => 0x44,
            Stage::Refine => 0x55,
        }
    }
}

/// Training settings. Fields left unset take the stage or preset default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: u64,
    /// Architecture used when training starts from a fresh initialisation.
    pub preset: Preset,
    /// Overrides the bundle's loss weights (refinement still zeroes the
    /// stage terms).
    pub lambdas: Option<LossWeights>,
    pub log_every: usize,
    /// Calls the checkpoint hook every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Deq,
            steps: 200,
            batch: None,
            patch: None,
            lr: None,
            seed: 0,
            preset: Preset::Toy,
            lambdas: None,
            log_every: 20,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.stage.default_lr())
    }

    pub fn batch(&self) -> usize {
        self.batch.unwrap_or_else(|| self.stage.default_batch())
    }

    pub fn weights(&self, bundle: &ModelBundle) -> LossWeights {
        self.stage
            .weights(self.lambdas.as_ref().unwrap_or(&bundle.lambdas))
    }
}

/// Stacked training tensors, `(N, 3, P, P)` images and `(N, D)` curves.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ldr: Tensor,
    pub i_n: Tensor,
    pub i_c: Tensor,
    pub h: Tensor,
    pub curve: Tensor,
}

impl Batch {
    /// Crops `size` windows at the given corners and stacks them.
    pub fn from_crops(
        samples: &[&LoadedSample],
        corners: &[(usize, usize)],
        size: (usize, usize),
    ) -> Result<Self> {
        let mut parts: [Vec<Tensor>; 4] = Default::default();
        let mut curves = Vec::new();
        for (s, &(y, x)) in samples.iter().zip(corners) {
            parts[0].push(s.ldr.unit_view().crop(y, x, size)?.to_tensor());
            parts[1].push(s.i_n.crop(y, x, size)?.to_tensor());
            parts[2].push(s.i_c.crop(y, x, size)?.to_tensor());
            parts[3].push(s.h.crop(y, x, size)?.to_tensor());
            curves.extend_from_slice(s.curve.samples());
        }
        let d = samples.first().map_or(0, |s| s.curve.len());
        let [ldr, i_n, i_c, h] = parts.map(|p| Tensor::concat_batch(&p));
        Ok(Self {
            ldr: ldr?,
            i_n: i_n?,
            i_c: i_c?,
            h: h?,
            curve: Tensor::new(&[samples.len(), d], curves)?,
        })
    }

    /// Whole images; all samples must share one size.
    pub fn full(samples: &[&LoadedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid!("empty batch"))?;
        let size = (first.ldr.height(), first.ldr.width());
        Self::from_crops(samples, &vec![(0, 0); samples.len()], size)
    }
}

/// Seeded uniform choice of samples and crop corners.
pub struct BatchSampler {
    rng: SeededRng,
    batch: usize,
    patch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, batch: usize, patch: usize) -> Self {
        Self {
            rng: seeded(seed),
            batch,
            patch,
        }
    }

    fn index(&mut self, n: usize) -> usize {
        ((uniform(&mut self.rng) * n as f64) as usize).min(n - 1)
    }

    pub fn next(&mut self, data: &[LoadedSample]) -> Result<Batch> {
        if data.is_empty() {
            return Err(invalid!("no training samples"));
        }
        let mut picks = Vec::with_capacity(self.batch);
        let mut corners = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let s = &data[self.index(data.len())];
            let (h, w) = (s.ldr.height(), s.ldr.width());
            if h < self.patch || w < self.patch {
                return Err(invalid!(
                    "sample {} ({h}x{w}) is smaller than the {} patch",
                    s.entry.id,
                    self.patch
                ));
            }
            let y = self.index(h - self.patch + 1);
            let x = self.index(w - self.patch + 1);
            picks.push(s);
            corners.push((y, x));
        }
        Batch::from_crops(&picks, &corners, (self.patch, self.patch))
    }
}

/// Builds the stage's forward graph and objective on `batch`.
pub fn stage_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    b: &BundleBinding,
    batch: &Batch,
    stage: Stage,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<(diffcore::Var, LossBreakdown)> {
    let cfg = &bundle.config;
    let mut pred = Predictions::default();
    let mut tgt = Targets::default();
    match stage {
        Stage::Deq => {
            let x = g.constant(batch.ldr.clone());
            pred.deq = Some(dequantize_forward(g, x, &b.deq, cfg)?);
            tgt.i_n = Some(g.constant(batch.i_n.clone()));
        }
        Stage::Lin => {
            let x = g.constant(batch.i_n.clone());
            let (curve, lin) = linearize_forward(g, x, &b.lin, cfg, &bundle.basis)?;
            pred.curve = Some(curve);
            pred.lin = Some(lin);
            tgt.i_c = Some(g.constant(batch.i_c.clone()));
            tgt.curve = Some(g.constant(batch.curve.clone()));
        }
        Stage::Hal => {
            let x = g.constant(batch.i_c.clone());
            pred.hdr = Some(hallucinate_forward(g, x, &b.hal, cfg, bundle.gamma_thresh)?);
            tgt.h = Some(g.constant(batch.h.clone()));
        }
        Stage::Joint | Stage::Refine => {
            let x = g.constant(batch.ldr.clone());
            let v = pipeline_graph(g, x, bundle, b, stage == Stage::Refine)?;
            pred = Predictions {
                deq: Some(v.deq),
                curve: Some(v.curve),
                lin: Some(v.lin),
                hdr: Some(v.refined.unwrap_or(v.hdr)),
            };
            tgt = Targets {
                i_n: Some(g.constant(batch.i_n.clone())),
                curve: Some(g.constant(batch.curve.clone())),
                i_c: Some(g.constant(batch.i_c.clone())),
                h: Some(g.constant(batch.h.clone())),
            };
        }
    }
    loss_total(g, &pred, &tgt, weights, extractor)
}

/// Objective of `stage` on `batch` without updating anything.
pub fn evaluate_loss(
    bundle: &ModelBundle,
    batch: &Batch,
    stage: Stage,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[]);
    let (_, breakdown) = stage_loss(
        &mut g,
        bundle,
        &b,
        batch,
        stage,
        weights,
        &PerceptualExtractor::default(),
    )?;
    Ok(breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub breakdown: LossBreakdown,
}

/// Runs `cfg.steps` Adam updates of the stage's networks. The loss logged
/// for a step is measured before that step's update. `checkpoint` is called
/// with the number of completed steps every `cfg.checkpoint_every` steps.
pub fn train(
    bundle: &mut ModelBundle,
    data: &[LoadedSample],
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let lr = cfg.lr();
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid!("learning rate must be positive, got {lr}"));
    }
    let batch = cfg.batch();
    if batch == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let patch = cfg.patch.unwrap_or(bundle.config.patch);
    if patch % bundle.config.size_multiple() != 0 {
        return Err(invalid!(
            "patch {patch} must be a multiple of {}",
            bundle.config.size_multiple()
        ));
    }
    let weights = cfg.weights(bundle);
    weights.validate()?;
    let adam = AdamConfig::with_lr(lr);
    let extractor = PerceptualExtractor::default();
    let trainable = cfg.stage.trainable();
    let mut sampler = BatchSampler::new(
        cfg.seed ^ cfg.stage.salt().wrapping_mul(0x9e37_79b9_7f4a_7c15),
        batch,
        patch,
    );
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let b = sampler.next(data)?;
        let mut g = Graph::new();
        let binding = bundle.bind(&mut g, trainable);
        let (loss, breakdown) = stage_loss(
            &mut g, bundle, &binding, &b, cfg.stage, &weights, &extractor,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        for &net in trainable {
            let collected = binding.get(net).collect(&g, &grads);
            bundle
                .params_mut(net)
                .adam_step(&collected, &adam)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            info!(
                "{} step {step}: loss {:.6}",
                cfg.stage.name(),
                breakdown.total
            );
        }
        log.push(StepLog {
            step,
            loss: breakdown.total,
            breakdown,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint(step + 1, bundle)?;
        }
    }
    Ok(log)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(losses: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
