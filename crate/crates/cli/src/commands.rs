use std::fs;
use std::io::Write;
use std::path::Path;

use hdrev_core::crf::{
    apply_curve, fit_weights, invert_curve, load_basis, read_curve, reconstruct_inverse_crf,
    shipped_basis, write_basis, write_curve, CrfCurve, EmorBasis,
};
use hdrev_core::forward::exposure_grid;
use hdrev_core::harness::bundle_io::BUNDLE_FILE;
use hdrev_core::harness::eval::{evaluate_with, oracle_output};
use hdrev_core::harness::gradsuite::{case_names, run_suite};
use hdrev_core::harness::scenes::write_scenes;
use hdrev_core::harness::{
    evaluate, infer, load_bundle, load_split, save_bundle, synth_dataset, train, DatasetManifest,
    Split, Stage, SynthOptions, TrainConfig,
};
use hdrev_core::imagio::{read_hdr, read_ldr, write_hdr};
use hdrev_core::nets::{HeadInits, ModelBundle, NetConfig, Preset};
use hdrev_core::objectives::{crf_l2, LossWeights};
use hdrev_core::Error;
use log::info;

use crate::args::*;
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Scenes(a) => scenes(a),
        Command::Synth(a) => synth(a),
        Command::Init(a) => init(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Crf(c) => crf(c),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn basis_or_shipped(path: Option<&Path>) -> Result<EmorBasis> {
    Ok(match path {
        Some(p) => load_basis(p)?,
        None => shipped_basis().clone(),
    })
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Toy => Preset::Toy,
        PresetArg::Paper => Preset::Paper,
    }
}

fn stage(s: StageArg) -> Stage {
    match s {
        StageArg::Deq => Stage::Deq,
        StageArg::Lin => Stage::Lin,
        StageArg::Hal => Stage::Hal,
        StageArg::Joint => Stage::Joint,
        StageArg::Refine => Stage::Refine,
    }
}

fn scenes(a: ScenesArgs) -> Result<()> {
    if a.count == 0 || a.height == 0 || a.width == 0 {
        return Err(Failure::Usage(
            "count, height and width must be positive".into(),
        ));
    }
    let paths = write_scenes(&a.out, a.count, a.height, a.width, a.seed)?;
    info!("wrote {} scenes to {}", paths.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let grid =
        exposure_grid(a.exposures, a.ev_lo, a.ev_hi).map_err(|e| Failure::Usage(e.to_string()))?;
    let basis = basis_or_shipped(a.basis.as_deref())?;
    let mut opts = SynthOptions::new(grid, a.crfs, a.seed);
    opts.test_sources = a.test_sources;
    opts.noise = !a.no_noise;
    let m = synth_dataset(&a.hdr, &basis, &opts, &a.out)?;
    let test = m.split(Split::Test).count();
    info!(
        "{} samples ({} train, {test} test) in {}",
        m.entries.len(),
        m.entries.len() - test,
        a.out.display()
    );
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let basis = basis_or_shipped(a.basis.as_deref())?;
    let cfg = NetConfig::for_preset(preset(a.preset));
    let bundle = if a.identity {
        ModelBundle::identity(cfg, &basis)?
    } else {
        ModelBundle::init(cfg, basis, HeadInits::default(), a.seed)?
    };
    save_bundle(&bundle, &a.out)?;
    info!("initialised bundle in {}", a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Failure::Core(Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.stage = stage(a.stage);
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = Some(v);
    }
    if let Some(v) = a.batch {
        cfg.batch = Some(v);
    }
    if let Some(v) = a.patch {
        cfg.patch = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if !(cfg.lr() > 0.0 && cfg.lr().is_finite()) {
        return Err(Failure::Usage(format!(
            "learning rate must be positive, got {}",
            cfg.lr()
        )));
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let manifest = DatasetManifest::read(&a.data)?;
    manifest.validate()?;
    let data = load_split(&manifest, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Format(format!("{} has no training samples", a.data.display())).into());
    }
    let mut bundle = if a.bundle.join(BUNDLE_FILE).is_file() {
        load_bundle(&a.bundle)?
    } else if matches!(cfg.stage, Stage::Joint | Stage::Refine) {
        return Err(Failure::Usage(format!(
            "stage {} continues from a bundle trained by the deq, lin and hal stages; none found in {}",
            cfg.stage.name(),
            a.bundle.display()
        )));
    } else {
        ModelBundle::init(
            NetConfig::for_preset(cfg.preset),
            basis_or_shipped(None)?,
            HeadInits::default(),
            cfg.seed,
        )?
    };
    let dir = a.bundle.clone();
    let log = train(&mut bundle, &data, &cfg, |step, b| {
        info!("checkpoint after {step} steps");
        save_bundle(b, &dir)
    })?;
    save_bundle(&bundle, &a.bundle)?;

    let mut lines = String::new();
    for entry in &log {
        lines.push_str(&serde_json::to_string(entry).map_err(Error::from)?);
        lines.push('\n');
    }
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.bundle.join(format!("train_{}.jsonl", cfg.stage.name())));
    write_text(&log_path, &lines)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!(
            "{}: loss {:.6} -> {:.6} over {} steps",
            cfg.stage.name(),
            first.loss,
            last.loss,
            log.len()
        );
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let ldr = read_ldr(&a.input)?;
    let out = infer(&ldr, &bundle, a.refine)?;
    write_hdr(out.final_hdr(), &a.output)?;
    if let Some(p) = &a.dump_deq {
        write_hdr(&out.deq, p)?;
    }
    if let Some(p) = &a.dump_crf {
        write_curve(out.curve.samples(), p)?;
    }
    if let Some(p) = &a.dump_lin {
        write_hdr(&out.lin, p)?;
    }
    if let Some(p) = &a.dump_mask {
        write_hdr(&out.mask, p)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.data)?;
    manifest.validate()?;
    let report = if a.oracle {
        let samples = load_split(&manifest, Split::Test)?;
        let basis = match &a.bundle {
            Some(dir) => load_bundle(dir)?.basis,
            None => basis_or_shipped(None)?,
        };
        let mean = CrfCurve::new(basis.mean.clone())?;
        evaluate_with(&samples, &mean, &LossWeights::default(), |s| {
            Ok(oracle_output(s))
        })?
    } else {
        let dir = a
            .bundle
            .as_ref()
            .expect("clap requires --bundle without --oracle");
        evaluate(&manifest, &load_bundle(dir)?, a.refine)?
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    match &a.out {
        Some(p) => {
            write_text(p, &json)?;
            info!(
                "{} samples: psnr {:.3} dB, ssim {:.4}, crf_l2 {:.4}",
                report.count, report.mean.psnr, report.mean.ssim, report.mean.crf_l2
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.list {
        for n in case_names() {
            println!("{n}");
        }
        return Ok(());
    }
    if a.points == 0 {
        return Err(Failure::Usage("--points must be positive".into()));
    }
    let results = run_suite(a.points, a.seed, a.filter.as_deref())?;
    if results.is_empty() {
        return Err(Failure::Usage(format!(
            "no case matches {:?}",
            a.filter.unwrap_or_default()
        )));
    }
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{:<20} max_rel_err {:.3e} (tol {:.0e}) checked {:>5} kinks {:>3}  {status}",
            r.name, r.max_rel_err, r.tol, r.checked, r.kinks
        );
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient check(s) failed")).into());
    }
    Ok(())
}

fn load_curve(path: &Path) -> Result<CrfCurve> {
    Ok(CrfCurve::new(read_curve(path)?)?)
}

fn crf(c: CrfCommand) -> Result<()> {
    match c {
        CrfCommand::Fit { curve, basis } => {
            let basis = basis_or_shipped(basis.as_deref())?;
            let g = read_curve(&curve)?;
            let w = fit_weights(&g, &basis)?;
            let fitted = reconstruct_inverse_crf(&w, &basis)?;
            let out = serde_json::json!({ "weights": w, "residual_l2": crf_l2(&fitted, &g)? });
            println!(
                "{}",
                serde_json::to_string_pretty(&out).map_err(Error::from)?
            );
        }
        CrfCommand::Apply {
            curve,
            input,
            output,
        } => {
            let g = load_curve(&curve)?;
            write_hdr(&apply_curve(&read_hdr(&input)?, &g)?, &output)?;
        }
        CrfCommand::Invert { curve, output } => {
            let g = load_curve(&curve)?;
            write_curve(invert_curve(&g).samples(), &output)?;
        }
        CrfCommand::Plot {
            curve,
            width,
            height,
        } => {
            if width < 2 || height < 2 {
                return Err(Failure::Usage(
                    "plot needs width and height of at least 2".into(),
                ));
            }
            let g = load_curve(&curve)?;
            let mut out = std::io::stdout().lock();
            for line in plot(&g, width, height) {
                let _ = writeln!(out, "{line}");
            }
        }
        CrfCommand::Gamma {
            gamma,
            output,
            samples,
        } => {
            if !(gamma > 0.0 && gamma.is_finite()) || samples < 2 {
                return Err(Failure::Usage(
                    "gamma must be positive and samples at least 2".into(),
                ));
            }
            write_curve(CrfCurve::gamma(samples, gamma).samples(), &output)?;
        }
        CrfCommand::Basis { output } => {
            write_basis(&basis_or_shipped(None)?, &output)?;
        }
    }
    Ok(())
}

/// Character plot with `x` rightwards and `g(x)` upwards.
fn plot(g: &CrfCurve, width: usize, height: usize) -> Vec<String> {
    let mut grid = vec![vec![' '; width]; height];
    for col in 0..width {
        let x = col as f64 / (width - 1) as f64;
        let y = g.eval(x).unwrap_or(0.0);
        let row = ((1.0 - y) * (height - 1) as f64).round() as usize;
        grid[row.min(height - 1)][col] = '*';
    }
    let mut lines: Vec<String> = grid
        .into_iter()
        .map(|r| format!("|{}", r.into_iter().collect::<String>()))
        .collect();
    lines.push(format!("+{}", "-".repeat(width)));
    lines
}
