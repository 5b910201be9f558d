//! Pixel-level quality metrics and the composite quality ranking.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::{ensure_same_shape, luminance, to_unit, Image};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
/// Dynamic range of unit-range images.
pub const DATA_RANGE: f64 = 1.0;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            tmp[[y, x]] = (0..n).map(|i| k[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| k[i] * tmp[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel unit-range images.
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure!(a.dim() == b.dim(), InvalidArgument, "ssim: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
    let (h, w) = a.dim();
    ensure!(h > 0 && w > 0, InvalidArgument, "ssim: empty image");
    // shrink the window for images smaller than 11 px
    let mut size = WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SIGMA);
    let c1 = (K1 * DATA_RANGE).powi(2);
    let c2 = (K2 * DATA_RANGE).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for (((ma, mb), (xaa, xbb)), xab) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let var_a = xaa - ma * ma;
        let var_b = xbb - mb * mb;
        let cov = xab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM on the luminance of unit-range RGB images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b, "ssim")?;
    let la = luminance(a.view()).mapv(f64::from);
    let lb = luminance(b.view()).mapv(f64::from);
    ssim_gray(&la, &lb)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b, "mse")?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64, max: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    }
}

/// PSNR in dB of unit-range images; `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, DATA_RANGE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityResult {
    pub ssim: f64,
    /// `None` encodes +infinity in JSON.
    #[serde(with = "inf_as_null")]
    pub psnr_db: f64,
    pub n_pairs: usize,
}

pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("Inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(serde::de::IgnoredAny),
        }
        Ok(match V::deserialize(d)? {
            V::N(v) => v,
            V::S(_) => f64::INFINITY,
        })
    }
}

/// Mean SSIM and pooled-MSE PSNR over model-range `(generated, reference)` pairs.
pub fn evaluate_pairs(pairs: &[(&Image, &Image)]) -> Result<QualityResult> {
    ensure!(!pairs.is_empty(), InvalidArgument, "no image pairs to evaluate");
    let mut ssim_sum = 0.0;
    let mut mse_sum = 0.0;
    for (g, r) in pairs {
        let (gu, ru) = (to_unit(g), to_unit(r));
        ssim_sum += ssim(&gu, &ru)?;
        mse_sum += mse(&gu, &ru)?;
    }
    let n = pairs.len() as f64;
    Ok(QualityResult { ssim: ssim_sum / n, psnr_db: psnr_from_mse(mse_sum / n, DATA_RANGE), n_pairs: pairs.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub method: String,
    pub ssim_rank: f64,
    pub psnr_rank: f64,
    pub composite: f64,
    pub final_rank: usize,
}

/// Methods ordered by ascending composite score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRanking {
    pub entries: Vec<RankEntry>,
}

impl MethodRanking {
    pub fn get(&self, method: &str) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.method == method)
    }
}

/// Descending ranks with ties sharing the mean rank, returned doubled so they stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap_or(Ordering::Equal));
    let mut out = vec![0u64; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // mean of 1-based positions start+1 ..= end, doubled
        let doubled = (start + 1 + end) as u64;
        for &i in &idx[start..end] {
            out[i] = doubled;
        }
        start = end;
    }
    out
}

/// Composite `0.6 * SSIM rank + 0.4 * PSNR rank`; smaller is better.
pub fn quality_rank(methods: &[(String, QualityResult)]) -> Result<MethodRanking> {
    ensure!(methods.len() >= 2, InvalidArgument, "quality ranking needs at least 2 methods, got {}", methods.len());
    ensure!(
        methods.iter().all(|(_, q)| !q.ssim.is_nan() && !q.psnr_db.is_nan()),
        InvalidArgument,
        "metric values must not be NaN"
    );
    let ssim: Vec<f64> = methods.iter().map(|(_, q)| q.ssim).collect();
    let psnr: Vec<f64> = methods.iter().map(|(_, q)| q.psnr_db).collect();
    let (rs, rp) = (doubled_ranks(&ssim), doubled_ranks(&psnr));
    // 20 * composite = 6 * (2 * ssim_rank) + 4 * (2 * psnr_rank): exact integer comparison
    let scaled: Vec<u64> = rs.iter().zip(&rp).map(|(a, b)| 6 * a + 4 * b).collect();
    let mut entries: Vec<RankEntry> = methods
        .iter()
        .enumerate()
        .map(|(i, (name, _))| RankEntry {
            method: name.clone(),
            ssim_rank: rs[i] as f64 / 2.0,
            psnr_rank: rp[i] as f64 / 2.0,
            composite: scaled[i] as f64 / 20.0,
            final_rank: 1 + scaled.iter().filter(|&&v| v < scaled[i]).count(),
        })
        .collect();
    entries.sort_by(|a, b| a.final_rank.cmp(&b.final_rank).then_with(|| a.method.cmp(&b.method)));
    Ok(MethodRanking { entries })
}

/// `1 -> "1st"`, `2 -> "2nd"`, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(ssim: f64, psnr: f64) -> QualityResult {
        QualityResult { ssim, psnr_db: psnr, n_pairs: 1 }
    }

    fn checkerboard(n: usize) -> Image {
        Image::from_shape_fn((3, n, n), |(_, y, x)| ((x + y) % 2) as f32)
    }

    #[test]
    fn ssim_identity() {
        let x = checkerboard(16);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_low() {
        let x = checkerboard(16);
        let inv = x.mapv(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.1);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert_eq!(ssim(&checkerboard(8), &checkerboard(9)).unwrap_err().kind(), "invalid-argument");
    }

    #[test]
    fn psnr_cases() {
        let x = checkerboard(8);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let a = Image::zeros((3, 4, 4));
        let b = Image::from_elem((3, 4, 4), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let ones = Image::ones((3, 4, 4));
        assert_eq!(psnr(&a, &ones).unwrap(), 0.0);
    }

    #[test]
    fn dominance_and_swapped_strengths() {
        let r = quality_rank(&[("A".into(), q(0.9, 30.0)), ("B".into(), q(0.5, 20.0))]).unwrap();
        assert_eq!(r.get("A").unwrap().final_rank, 1);

        let r = quality_rank(&[("A".into(), q(0.9, 20.0)), ("B".into(), q(0.5, 30.0))]).unwrap();
        let (a, b) = (r.get("A").unwrap(), r.get("B").unwrap());
        assert_eq!((a.ssim_rank, a.psnr_rank), (1.0, 2.0));
        assert!((a.composite - 1.4).abs() < 1e-12);
        assert!((b.composite - 1.6).abs() < 1e-12);
        assert_eq!(a.final_rank, 1);
    }

    #[test]
    fn ties_share_mean_rank() {
        let r = quality_rank(&[
            ("A".into(), q(0.5, 10.0)),
            ("B".into(), q(0.5, 11.0)),
            ("C".into(), q(0.1, f64::INFINITY)),
        ])
        .unwrap();
        assert_eq!(r.get("A").unwrap().ssim_rank, 1.5);
        assert_eq!(r.get("B").unwrap().ssim_rank, 1.5);
        assert_eq!(r.get("C").unwrap().psnr_rank, 1.0);
    }

    #[test]
    fn too_few_methods() {
        assert_eq!(quality_rank(&[("A".into(), q(0.5, 1.0))]).unwrap_err().kind(), "invalid-argument");
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinal(1), "1st");
        assert_eq!(ordinal(2), "2nd");
        assert_eq!(ordinal(3), "3rd");
        assert_eq!(ordinal(9), "9th");
        assert_eq!(ordinal(11), "11th");
    }

    #[test]
    fn json_infinity() {
        let r = q(1.0, f64::INFINITY);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"Inf\""));
        let back: QualityResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
