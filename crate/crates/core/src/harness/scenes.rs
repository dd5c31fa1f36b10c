//! Procedural HDR scenes: a sky gradient, textured ground, coloured
//! objects and a few very bright light sources, so that every exposure
//! setting produces both clipped highlights and dark regions.

use std::path::{Path, PathBuf};

use diffcore::rng::{seeded, uniform, SeededRng};

use crate::error::{Error, Result};
use crate::imagio::{write_hdr, HdrImage};

fn range(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut SeededRng, h: usize, w: usize, cell: f64) -> Self {
        let rows = (h as f64 / cell) as usize + 2;
        let cols = (w as f64 / cell) as usize + 2;
        let grid = (0..rows * cols).map(|_| uniform(rng)).collect();
        Self { cell, cols, grid }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (gy, gx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let v = |r: usize, c: usize| self.grid[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - fx) + v(iy, ix + 1) * fx;
        let bottom = v(iy + 1, ix) * (1.0 - fx) + v(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

struct Light {
    y: f64,
    x: f64,
    radius: f64,
    peak: f64,
    tint: [f64; 3],
}

struct Blob {
    y: f64,
    x: f64,
    ry: f64,
    rx: f64,
    colour: [f64; 3],
}

/// A deterministic `height x width` radiance map for `seed`.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<HdrImage> {
    let mut rng = seeded(seed);
    let (hf, wf) = (height as f64, width as f64);
    let horizon = range(&mut rng, 0.35, 0.65) * hf;
    let sky_top = [
        range(&mut rng, 0.6, 1.2),
        range(&mut rng, 0.8, 1.4),
        range(&mut rng, 1.2, 2.0),
    ];
    let sky_low = [
        range(&mut rng, 1.0, 2.0),
        range(&mut rng, 0.9, 1.6),
        range(&mut rng, 0.7, 1.4),
    ];
    let ground = [
        range(&mut rng, 0.05, 0.3),
        range(&mut rng, 0.05, 0.3),
        range(&mut rng, 0.03, 0.2),
    ];
    let coarse = ValueNoise::new(&mut rng, height, width, 16.0);
    let fine = ValueNoise::new(&mut rng, height, width, 4.0);

    let lights: Vec<Light> = (0..1 + (uniform(&mut rng) * 3.0) as usize)
        .map(|_| Light {
            y: range(&mut rng, 0.05, 0.9) * hf,
            x: range(&mut rng, 0.05, 0.95) * wf,
            radius: range(&mut rng, 0.03, 0.09) * hf.min(wf),
            peak: range(&mut rng, 4.0, 40.0),
            tint: [
                range(&mut rng, 0.8, 1.0),
                range(&mut rng, 0.8, 1.0),
                range(&mut rng, 0.7, 1.0),
            ],
        })
        .collect();
    let blobs: Vec<Blob> = (0..3 + (uniform(&mut rng) * 4.0) as usize)
        .map(|_| Blob {
            y: range(&mut rng, 0.3, 1.0) * hf,
            x: range(&mut rng, 0.0, 1.0) * wf,
            ry: range(&mut rng, 0.05, 0.2) * hf,
            rx: range(&mut rng, 0.05, 0.2) * wf,
            colour: [
                range(&mut rng, 0.01, 0.9),
                range(&mut rng, 0.01, 0.9),
                range(&mut rng, 0.01, 0.9),
            ],
        })
        .collect();

    HdrImage::from_fn(height, width, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let tex = 0.6 + 0.3 * coarse.at(yf, xf) + 0.2 * fine.at(yf, xf);
        let mut v = if yf < horizon {
            let s = yf / horizon;
            sky_top[c] * (1.0 - s) + sky_low[c] * s
        } else {
            ground[c] * tex * (1.5 - (yf - horizon) / (hf - horizon + 1.0))
        };
        for b in &blobs {
            let d = ((yf - b.y) / b.ry).powi(2) + ((xf - b.x) / b.rx).powi(2);
            if d < 1.0 {
                v = b.colour[c] * tex;
            }
        }
        for l in &lights {
            let d2 = ((yf - l.y).powi(2) + (xf - l.x).powi(2)) / (l.radius * l.radius);
            v += l.peak * l.tint[c] * (-0.5 * d2).exp();
        }
        v
    })
}

/// Writes `count` scenes as `scene_000.pfm`, ... into `dir`.
pub fn write_scenes(
    dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let img = generate_scene(
                seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
                height,
                width,
            )?;
            let path = dir.join(format!("scene_{i:03}.pfm"));
            write_hdr(&img, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_high_range() {
        let a = generate_scene(5, 64, 80).unwrap();
        assert_eq!(a, generate_scene(5, 64, 80).unwrap());
        assert_ne!(a, generate_scene(6, 64, 80).unwrap());
        assert!(a.max() > 2.0);
        assert!(a.data().iter().any(|&v| v < 0.2));
    }
}
