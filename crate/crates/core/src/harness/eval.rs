//! Inference at arbitrary resolution and test-split evaluation.

use diffcore::{Graph, Tensor};
use serde::{Serialize, Serializer};

use crate::crf::CrfCurve;
use crate::error::{invalid, Result};
use crate::harness::dataset::{load_split, DatasetManifest, LoadedSample, Split};
use crate::imagio::{HdrImage, LdrImage};
use crate::nets::{full_pipeline, ModelBundle, PipelineOutput};
use crate::objectives::{
    crf_l2, loss_total, psnr, ssim, tone_map_image, LossBreakdown, LossWeights,
    PerceptualExtractor, Predictions, Targets, MU,
};

/// Extends `img` to the next multiple of `m` on each side by repeating the
/// last row and column.
pub fn pad_replicate(img: &LdrImage, m: usize) -> Result<LdrImage> {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    let src = img.bytes();
    let mut out = Vec::with_capacity(ph * pw * 3);
    for y in 0..ph {
        let row = y.min(h - 1) * w;
        for x in 0..pw {
            let i = (row + x.min(w - 1)) * 3;
            out.extend_from_slice(&src[i..i + 3]);
        }
    }
    LdrImage::new(ph, pw, out)
}

/// Runs the full pipeline on an image of any size; the input is padded to
/// the network's size multiple and the outputs cropped back.
pub fn infer(ldr: &LdrImage, bundle: &ModelBundle, use_refinement: bool) -> Result<PipelineOutput> {
    if ldr.height() == 0 || ldr.width() == 0 {
        return Err(invalid!("empty image"));
    }
    let padded = pad_replicate(ldr, bundle.config.size_multiple())?;
    let out = full_pipeline(&padded, bundle, use_refinement)?;
    if padded.height() == ldr.height() && padded.width() == ldr.width() {
        return Ok(out);
    }
    let size = (ldr.height(), ldr.width());
    let crop = |img: &HdrImage| img.crop(0, 0, size);
    Ok(PipelineOutput {
        deq: crop(&out.deq)?,
        lin: crop(&out.lin)?,
        mask: crop(&out.mask)?,
        hdr: crop(&out.hdr)?,
        refined: out.refined.as_ref().map(crop).transpose()?,
        curve: out.curve,
    })
}

/// Outputs equal to the ground truth, for checking the evaluator itself.
pub fn oracle_output(s: &LoadedSample) -> PipelineOutput {
    PipelineOutput {
        deq: s.i_n.clone(),
        curve: s.curve.clone(),
        lin: s.i_c.clone(),
        mask: s.i_c.map(|_| 0.0).expect("finite"),
        hdr: s.h.clone(),
        refined: None,
    }
}

fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Metrics of one output. PSNR and SSIM compare μ-law tone-mapped HDR
/// images; `psnr_lin` compares the linearised image with `I_c`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    #[serde(serialize_with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "db")]
    pub psnr_lin: f64,
    pub crf_l2: f64,
    /// Curve error of the basis mean, the estimate of an untrained model.
    pub crf_l2_mean_curve: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleReport {
    pub id: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean: Scores,
    pub samples: Vec<SampleReport>,
}

/// Scores `out` against the sample's ground truth.
pub fn score(
    s: &LoadedSample,
    out: &PipelineOutput,
    mean_curve: &CrfCurve,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<Scores> {
    let est = out.final_hdr();
    let (tm_est, tm_ref) = (tone_map_image(est, MU), tone_map_image(&s.h, MU));
    let mut g = Graph::new();
    let mut c = |img: &HdrImage| g.constant(img.to_tensor());
    let pred = Predictions {
        deq: Some(c(&out.deq)),
        lin: Some(c(&out.lin)),
        hdr: Some(c(est)),
        curve: None,
    };
    let tgt = Targets {
        i_n: Some(c(&s.i_n)),
        i_c: Some(c(&s.i_c)),
        h: Some(c(&s.h)),
        curve: None,
    };
    let curve_tensor = |cv: &CrfCurve| Tensor::new(&[1, cv.len()], cv.samples().to_vec());
    let pred = Predictions {
        curve: Some(g.constant(curve_tensor(&out.curve)?)),
        ..pred
    };
    let tgt = Targets {
        curve: Some(g.constant(curve_tensor(&s.curve)?)),
        ..tgt
    };
    let (_, losses) = loss_total(&mut g, &pred, &tgt, weights, extractor)?;
    Ok(Scores {
        psnr: psnr(&tm_est, &tm_ref, 1.0)?,
        ssim: ssim(&tm_est, &tm_ref)?,
        psnr_lin: psnr(&out.lin, &s.i_c, 1.0)?,
        crf_l2: crf_l2(out.curve.samples(), s.curve.samples())?,
        crf_l2_mean_curve: crf_l2(mean_curve.samples(), s.curve.samples())?,
        losses,
    })
}

fn mean_scores(all: &[&Scores]) -> Scores {
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&Scores) -> f64| all.iter().map(|s| f(s)).sum::<f64>() / n;
    let mut losses = LossBreakdown::default();
    losses.total = avg(&|s| s.losses.total);
    macro_rules! terms {
        ($($f:ident),*) => {$(
            losses.terms.$f = avg(&|s| s.losses.terms.$f);
            losses.weighted.$f = avg(&|s| s.losses.weighted.$f);
        )*};
    }
    terms!(deq, lin, crf, hal, perceptual, tv);
    Scores {
        psnr: avg(&|s| s.psnr),
        ssim: avg(&|s| s.ssim),
        psnr_lin: avg(&|s| s.psnr_lin),
        crf_l2: avg(&|s| s.crf_l2),
        crf_l2_mean_curve: avg(&|s| s.crf_l2_mean_curve),
        losses,
    }
}

/// Scores `predict` on every sample. The mean curve is the basis mean.
pub fn evaluate_with(
    samples: &[LoadedSample],
    mean_curve: &CrfCurve,
    weights: &LossWeights,
    mut predict: impl FnMut(&LoadedSample) -> Result<PipelineOutput>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let extractor = PerceptualExtractor::default();
    let reports = samples
        .iter()
        .map(|s| {
            let out = predict(s)?;
            Ok(SampleReport {
                id: s.entry.id,
                scores: score(s, &out, mean_curve, weights, &extractor)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_scores(&reports.iter().map(|r| &r.scores).collect::<Vec<_>>());
    Ok(EvalReport {
        count: reports.len(),
        mean,
        samples: reports,
    })
}

/// Evaluates `bundle` on the test split of `manifest`.
pub fn evaluate(
    manifest: &DatasetManifest,
    bundle: &ModelBundle,
    use_refinement: bool,
) -> Result<EvalReport> {
    let samples = load_split(manifest, Split::Test)?;
    if samples.is_empty() {
        return Err(invalid!(
            "manifest {} has no test samples",
            manifest.path().display()
        ));
    }
    let mean_curve = CrfCurve::new(bundle.basis.mean.clone())?;
    evaluate_with(&samples, &mean_curve, &bundle.lambdas, |s| {
        infer(&s.ldr, bundle, use_refinement)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_repeats_the_border() {
        let img = LdrImage::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = pad_replicate(&img, 4).unwrap();
        assert_eq!((p.height(), p.width()), (4, 4));
        assert_eq!(&p.bytes()[..12], &[1, 2, 3, 4, 5, 6, 4, 5, 6, 4, 5, 6]);
        assert_eq!(&p.bytes()[36..48], &p.bytes()[..12]);
    }
}
