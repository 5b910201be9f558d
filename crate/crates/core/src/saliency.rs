//! Randomized input sampling (RISE) saliency over the reverse trajectory.
//!
//! Each random mask blanks part of the H&E condition; its score at a probed
//! timestep is the mean squared change of the single reverse update relative
//! to the unmasked update, evaluated at the unmasked trajectory's `x_t`. A
//! pixel's saliency is the mean score over masks weighted by how much of that
//! pixel each mask removed.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis, Zip};
use ndarray_npy::write_npy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserPair;
use crate::diffusion::{trajectory_batch, PathMask, Predictor, State};
use crate::error::{ensure, Error, Result};
use crate::image::{denormalize, luminance, to_unit, write_png, Image};
use crate::nn::ConditionalNet;
use crate::schedules::SchedulePair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    /// Timesteps to probe, any order; reported from high to low.
    pub timesteps: Vec<usize>,
    pub n_masks: usize,
    /// Probability that a grid cell is kept.
    pub keep_prob: f64,
    /// Mask grid resolution (`cell x cell`); must divide the image size.
    pub cell: usize,
    pub seed: u64,
    /// Colour (model range) painted over removed regions.
    pub fill: [f32; 3],
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self { timesteps: vec![], n_masks: 1000, keep_prob: 0.5, cell: 8, seed: 0, fill: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Probed timesteps in trajectory order (descending).
    pub timesteps: Vec<usize>,
    /// One `(H, W)` map per timestep, normalised to `[0, 1]`.
    #[serde(skip)]
    pub maps: Vec<Array2<f64>>,
    pub n_masks: usize,
    pub keep_prob: f64,
    pub cell: usize,
}

impl SaliencyMap {
    /// Map at the last probed step of the trajectory (smallest `t`).
    pub fn final_map(&self) -> &Array2<f64> {
        self.maps.last().expect("at least one probed timestep")
    }

    pub fn map_at(&self, t: usize) -> Option<&Array2<f64>> {
        self.timesteps.iter().position(|&x| x == t).map(|i| &self.maps[i])
    }

    /// Stack as `(n_timesteps, H, W)`.
    pub fn stacked(&self) -> Array3<f64> {
        let views: Vec<_> = self.maps.iter().map(|m| m.view()).collect();
        ndarray::stack(Axis(0), &views).expect("maps share a shape")
    }

    /// Write `saliency.npy`, `saliency.json` and one heat overlay PNG per timestep.
    pub fn export(&self, dir: &Path, cond_he: &Image) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let npy = dir.join("saliency.npy");
        write_npy(&npy, &self.stacked()).map_err(|e| Error::Serde(format!("{}: {e}", npy.display())))?;
        let json = dir.join("saliency.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let mut written = vec![npy, json];
        for (t, map) in self.timesteps.iter().zip(&self.maps) {
            let path = dir.join(format!("saliency_t{t:04}.png"));
            write_png(&path, &denormalize(&heat_overlay(cond_he, map)))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Blend a red (high) to green (low) heat map over the grey-scale H&E image.
pub fn heat_overlay(cond_he: &Image, map: &Array2<f64>) -> Image {
    let grey = luminance(to_unit(cond_he).view());
    Image::from_shape_fn(cond_he.dim(), |(c, y, x)| {
        let s = map[[y, x]] as f32;
        let heat = match c {
            0 => s,
            1 => 1.0 - s,
            _ => 0.0,
        };
        let unit = 0.5 * grey[[y, x]] + 0.5 * heat;
        unit * 2.0 - 1.0
    })
}

/// Smooth random mask: bilinear upsampling of a shifted `(cell + 1)^2` binary grid.
pub fn random_mask(h: usize, w: usize, cell: usize, keep_prob: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let g = cell + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| if rng.random_bool(keep_prob) { 1.0 } else { 0.0 }).collect();
    let (ch, cw) = (h as f64 / cell as f64, w as f64 / cell as f64);
    let (sy, sx) = (rng.random_range(0.0..ch), rng.random_range(0.0..cw));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let gy = (y as f64 + sy) / ch;
        let gx = (x as f64 + sx) / cw;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = ((gy - y0 as f64) as f32, (gx - x0 as f64) as f32);
        let at = |yy: usize, xx: usize| grid[yy.min(g - 1) * g + xx.min(g - 1)];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn apply_mask(cond: &Image, mask: &Array2<f32>, fill: [f32; 3]) -> Image {
    Image::from_shape_fn(cond.dim(), |(c, y, x)| {
        let v = cond[[c, y, x]];
        v + (1.0 - mask[[y, x]]) * (fill[c] - v)
    })
}

/// Min-max normalise; maps with no spread become all zeros.
pub fn normalize_map(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if !(spread > 1e-12 * max.abs().max(min.abs()).max(f64::MIN_POSITIVE)) {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - min) / spread)
}

fn step_delta(r: &Image, e: &Image, s: &SchedulePair, t: usize) -> Vec<f64> {
    let (g, n) = (s.gamma(t), s.eta(t));
    r.iter().zip(e).map(|(&r, &e)| g * r as f64 + n * e as f64).collect()
}

pub fn rise_saliency<N: ConditionalNet>(cond_he: &Image, predictor: &DenoiserPair<N>, cfg: &RiseConfig) -> Result<SaliencyMap>
where
    DenoiserPair<N>: Predictor,
{
    ensure!(predictor.epochs_trained > 0, InvalidState, "predictor has not been trained");
    ensure!(cfg.keep_prob > 0.0 && cfg.keep_prob < 1.0, InvalidArgument, "keep probability {} not in (0, 1)", cfg.keep_prob);
    ensure!(cfg.n_masks >= 1, InvalidArgument, "need at least one mask");
    let s = &predictor.schedule;
    let (_, h, w) = cond_he.dim();
    ensure!(cfg.cell >= 1 && h % cfg.cell == 0 && w % cfg.cell == 0, InvalidArgument, "cell {} must divide {h}x{w}", cfg.cell);
    let mut timesteps = cfg.timesteps.clone();
    timesteps.sort_unstable_by(|a, b| b.cmp(a));
    timesteps.dedup();
    ensure!(!timesteps.is_empty(), InvalidArgument, "no timesteps to probe");
    ensure!(
        timesteps.iter().all(|&t| (1..=s.timesteps).contains(&t)),
        InvalidArgument,
        "probed timesteps {timesteps:?} must lie in [1, {}]",
        s.timesteps
    );

    // x_t of the unmasked trajectory at every probed step
    let mut states: Vec<(usize, State)> = Vec::new();
    let lowest = *timesteps.last().expect("non-empty");
    trajectory_batch(std::slice::from_ref(cond_he), predictor, s, PathMask::BOTH, &[cfg.seed], lowest, |t, xs| {
        if timesteps.contains(&t) {
            states.push((t, xs[0].clone()));
        }
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a11_e4c7);
    let masks: Vec<Array2<f32>> = (0..cfg.n_masks).map(|_| random_mask(h, w, cfg.cell, cfg.keep_prob, &mut rng)).collect();
    // realised removal coverage per pixel, shared by every probed timestep
    let mut cover = Array2::<f64>::zeros((h, w));
    for m in &masks {
        cover.zip_mut_with(m, |c, &mv| *c += 1.0 - mv as f64);
    }
    let mut maps = Vec::with_capacity(timesteps.len());
    for (t, x) in &states {
        let x_img = x.mapv(|v| v as f32);
        let (r0, e0) = predictor.predict(&x_img, *t, cond_he)?;
        let base = step_delta(&r0, &e0, s, *t);
        let mut acc = Array2::<f64>::zeros((h, w));
        for chunk in masks.chunks(32) {
            let conds: Vec<Image> = chunk.iter().map(|m| apply_mask(cond_he, m, cfg.fill)).collect();
            let xs = vec![x_img.clone(); chunk.len()];
            let preds = predictor.predict_batch(&xs, *t, &conds)?;
            for ((m, c), (r, e)) in chunk.iter().zip(&conds).zip(&preds) {
                // an unchanged condition cannot move the update
                if c == cond_he {
                    continue;
                }
                let d = step_delta(r, e, s, *t);
                let score = d.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d.len() as f64;
                acc.zip_mut_with(m, |a, &mv| *a += score * (1.0 - mv as f64));
            }
        }
        // mean score given the pixel was removed
        Zip::from(&mut acc).and(&cover).for_each(|a, &c| *a = if c > 0.0 { *a / c } else { 0.0 });
        maps.push(normalize_map(&acc));
    }
    Ok(SaliencyMap { timesteps, maps, n_masks: cfg.n_masks, keep_prob: cfg.keep_prob, cell: cfg.cell })
}

/// Mean of `map` inside and outside a boolean footprint.
pub fn inside_outside_means(map: &Array2<f64>, footprint: &Array2<bool>) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &inside) in map.iter().zip(footprint) {
        if inside {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

/// Pearson correlation of two equally shaped maps.
pub fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
