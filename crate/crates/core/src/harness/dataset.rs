//! Dataset synthesis and the JSON-lines manifest.
//!
//! Every HDR source is mean-normalised, then pushed through the simulated
//! camera once per exposure time and response curve. Samples whose LDR
//! image is mostly over- or under-exposed are dropped. Each kept sample is
//! a directory holding `L.ppm`, `In.pfm`, `Ic.pfm`, `H.pfm` and
//! `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use diffcore::rng::{seeded, uniform};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{fit_weights, CrfCurve, EmorBasis, DEFAULT_SAMPLES};
use crate::error::{invalid, Error, Result};
use crate::forward::{extreme_fractions, is_extreme, synthesize_pair, ExposureGrid, NoiseParams};
use crate::imagio::{normalize_mean, read_hdr, read_ldr, write_hdr, write_ldr, HdrImage, LdrImage};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TARGET_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Sidecar written next to each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub t: f64,
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub seed: u64,
    pub crf_id: usize,
    /// Exponent of the inverse response `x^gamma`.
    pub gamma: f64,
    /// Least-squares basis weights of the inverse response.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Sample directory relative to the manifest.
    pub dir: String,
    pub split: Split,
    pub source: String,
    pub t: f64,
    pub crf_id: usize,
    pub gamma: f64,
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub seed: u64,
    pub over: f64,
    pub under: f64,
    pub is_extreme: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.path();
        fs::write(&path, self.to_jsonl()?).map_err(|e| Error::io(&path, e))
    }

    /// Reads `manifest.jsonl` from `path`, which may name the file or its
    /// directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Format(format!("{} line {}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Self { root, entries })
    }

    /// Checks that every referenced file exists and no extreme sample slipped in.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.is_extreme {
                return Err(Error::Format(format!("entry {} is flagged extreme", e.id)));
            }
            for f in SAMPLE_FILES {
                let p = self.root.join(&e.dir).join(f);
                if !p.is_file() {
                    return Err(Error::Format(format!(
                        "entry {}: missing {}",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

const SAMPLE_FILES: [&str; 5] = ["L.ppm", "In.pfm", "Ic.pfm", "H.pfm", "meta.json"];

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub grid: ExposureGrid,
    pub crf_count: usize,
    pub seed: u64,
    /// Number of sources (taken from the end of the sorted list) held out.
    pub test_sources: usize,
    pub gamma_range: (f64, f64),
    pub noise: bool,
}

impl SynthOptions {
    pub fn new(grid: ExposureGrid, crf_count: usize, seed: u64) -> Self {
        Self {
            grid,
            crf_count,
            seed,
            test_sources: 1,
            gamma_range: (1.0, 3.0),
            noise: true,
        }
    }

    /// Inverse-response exponents, one per curve id.
    pub fn gammas(&self) -> Vec<f64> {
        let mut rng = seeded(self.seed ^ 0x6372_665f_6761_6d6d);
        let (lo, hi) = self.gamma_range;
        (0..self.crf_count)
            .map(|_| lo + (hi - lo) * uniform(&mut rng))
            .collect()
    }
}

fn list_hdr(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")))
        .collect();
    files.sort();
    Ok(files)
}

struct Job<'a> {
    id: usize,
    source: usize,
    image: &'a HdrImage,
    t: f64,
    crf_id: usize,
}

/// Synthesizes the dataset into `out_dir` and writes its manifest.
pub fn synth_dataset(
    hdr_dir: impl AsRef<Path>,
    basis: &EmorBasis,
    opts: &SynthOptions,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let hdr_dir = hdr_dir.as_ref();
    let out_dir = out_dir.as_ref();
    if opts.crf_count == 0 {
        return Err(invalid!("crf_count must be at least 1"));
    }
    let files = list_hdr(hdr_dir)?;
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no .pfm files in {}",
            hdr_dir.display()
        )));
    }
    let mut sources = Vec::new();
    for f in &files {
        match read_hdr(f).and_then(|img| normalize_mean(&img, TARGET_MEAN)) {
            Ok(img) => sources.push((f.file_name().unwrap().to_string_lossy().into_owned(), img)),
            Err(e) => warn!("skipping {}: {e}", f.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::Format(format!(
            "no readable HDR images in {}",
            hdr_dir.display()
        )));
    }

    let gammas = opts.gammas();
    let curves: Vec<CrfCurve> = gammas
        .iter()
        .map(|&g| CrfCurve::gamma(DEFAULT_SAMPLES, g))
        .collect();
    let weights: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| fit_weights(c.samples(), basis))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (s, (_, img)) in sources.iter().enumerate() {
        for &t in &opts.grid.times {
            for crf_id in 0..opts.crf_count {
                jobs.push(Job {
                    id: jobs.len(),
                    source: s,
                    image: img,
                    t,
                    crf_id,
                });
            }
        }
    }
    let n_test = opts.test_sources.min(sources.len().saturating_sub(1));
    let first_test = sources.len() - n_test;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Option<ManifestEntry>> = jobs
        .par_iter()
        .map(|job| -> Result<Option<ManifestEntry>> {
            let seed = opts.seed ^ job.id as u64;
            let mut rng = seeded(seed);
            let noise = if opts.noise {
                NoiseParams::draw(&mut rng, seed)
            } else {
                NoiseParams::none()
            };
            let sample = synthesize_pair(job.image, &curves[job.crf_id], job.t, &noise)?;
            let (over, under) = extreme_fractions(&sample.ldr);
            if is_extreme(&sample.ldr) {
                return Ok(None);
            }
            let dir = format!("samples/{:05}", job.id);
            let abs = out_dir.join(&dir);
            fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
            write_ldr(&sample.ldr, abs.join("L.ppm"))?;
            write_hdr(&sample.i_n, abs.join("In.pfm"))?;
            write_hdr(&sample.i_c, abs.join("Ic.pfm"))?;
            write_hdr(&sample.h, abs.join("H.pfm"))?;
            let meta = SampleMeta {
                t: job.t,
                sigma_s: noise.sigma_s,
                sigma_c: noise.sigma_c,
                seed,
                crf_id: job.crf_id,
                gamma: gammas[job.crf_id],
                weights: weights[job.crf_id].clone(),
            };
            let meta_path = abs.join("meta.json");
            fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
                .map_err(|e| Error::io(&meta_path, e))?;
            Ok(Some(ManifestEntry {
                id: job.id,
                dir,
                split: if job.source >= first_test {
                    Split::Test
                } else {
                    Split::Train
                },
                source: sources[job.source].0.clone(),
                t: job.t,
                crf_id: job.crf_id,
                gamma: gammas[job.crf_id],
                sigma_s: noise.sigma_s,
                sigma_c: noise.sigma_c,
                seed,
                over,
                under,
                is_extreme: false,
            }))
        })
        .collect::<Result<_>>()?;
    let entries: Vec<ManifestEntry> = results.into_iter().flatten().collect();
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

/// A sample with its images loaded.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub ldr: LdrImage,
    pub i_n: HdrImage,
    pub i_c: HdrImage,
    pub h: HdrImage,
    /// Ground-truth inverse response.
    pub curve: CrfCurve,
}

impl LoadedSample {
    pub fn load(root: &Path, entry: &ManifestEntry) -> Result<Self> {
        let dir = root.join(&entry.dir);
        Ok(Self {
            entry: entry.clone(),
            ldr: read_ldr(dir.join("L.ppm"))?,
            i_n: read_hdr(dir.join("In.pfm"))?,
            i_c: read_hdr(dir.join("Ic.pfm"))?,
            h: read_hdr(dir.join("H.pfm"))?,
            curve: CrfCurve::gamma(DEFAULT_SAMPLES, entry.gamma),
        })
    }
}

/// Every sample of one split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedSample>> {
    manifest
        .split(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| LoadedSample::load(&manifest.root, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::exposure_grid;

    #[test]
    fn gammas_are_seeded_and_in_range() {
        let opts = SynthOptions::new(exposure_grid(2, 0.0, 1.0).unwrap(), 5, 9);
        let g = opts.gammas();
        assert_eq!(g, opts.gammas());
        assert!(g.iter().all(|&v| (1.0..=3.0).contains(&v)));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions::new(exposure_grid(2, 0.0, 1.0).unwrap(), 1, 0);
        let err = synth_dataset(
            dir.path(),
            crate::crf::shipped_basis(),
            &opts,
            dir.path().join("out"),
        );
        assert!(err.is_err());
    }
}
