//! Spatial perturbations of IHC patches and the robustness report built on them.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataio::PairedPatch;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::quality::evaluate_pairs;
use crate::sfs::compute_sfs;

/// Smoothing width of the elastic displacement field, in pixels.
pub const ELASTIC_SIGMA: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

impl Severity {
    /// Peak displacement in pixels.
    pub fn amplitude(self) -> f64 {
        match self {
            Severity::Low => 2.0,
            Severity::Medium => 6.0,
            Severity::High => 12.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
        }
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Severity::Low),
            "medium" => Ok(Severity::Medium),
            "high" => Ok(Severity::High),
            other => Err(Error::InvalidArgument(format!("unknown elastic severity '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Diagonal shift by `px` pixels on both axes.
    Translate { px: f64 },
    /// Rotation about the image centre.
    Rotate { degrees: f64 },
    Elastic { severity: Severity, seed: u64 },
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Translate { px } => write!(f, "Translation {px}px"),
            Perturbation::Rotate { degrees } => write!(f, "Rotation {degrees}°"),
            Perturbation::Elastic { severity, .. } => write!(f, "Elastic {}", severity.name()),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `translate:5`, `rotate:10`, `elastic:high` or `elastic:high:7` (with seed).
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad magnitude in '{s}'")));
        match parts.as_slice() {
            ["translate", v] => Ok(Perturbation::Translate { px: num(v)? }),
            ["rotate", v] => Ok(Perturbation::Rotate { degrees: num(v)? }),
            ["elastic", sev] => Ok(Perturbation::Elastic { severity: sev.parse()?, seed: 0 }),
            ["elastic", sev, seed] => Ok(Perturbation::Elastic {
                severity: sev.parse()?,
                seed: seed.parse().map_err(|_| Error::InvalidArgument(format!("bad seed in '{s}'")))?,
            }),
            _ => Err(Error::InvalidArgument(format!("cannot parse perturbation '{s}'"))),
        }
    }
}

/// The nine-row battery: 5/10/15 px, 5/10/15 degrees, low/medium/high elastic.
pub fn standard_battery(seed: u64) -> Vec<Perturbation> {
    let mut v: Vec<Perturbation> = [5.0, 10.0, 15.0].iter().map(|&px| Perturbation::Translate { px }).collect();
    v.extend([5.0, 10.0, 15.0].iter().map(|&degrees| Perturbation::Rotate { degrees }));
    v.extend([Severity::Low, Severity::Medium, Severity::High].into_iter().map(|severity| Perturbation::Elastic { severity, seed }));
    v
}

/// Mirror a continuous coordinate into `[0, n - 1]`.
fn reflect(c: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let c = c.rem_euclid(period);
    if c > (n - 1) as f64 {
        period - c
    } else {
        c
    }
}

/// Bilinear resampling: output pixel `(y, x)` reads input at `src(y, x)`.
fn warp(img: &Image, src: impl Fn(usize, usize) -> (f64, f64)) -> Image {
    let (c, h, w) = img.dim();
    let mut out = Image::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (sy, sx) = (reflect(sy, h), reflect(sx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bottom = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn gaussian_blur(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let (h, w) = field.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            k.iter()
                .enumerate()
                .map(|(i, kv)| {
                    let off = i as f64 - radius as f64;
                    let (sy, sx) = if horizontal { (y, reflect(x as f64 + off, w) as usize) } else { (reflect(y as f64 + off, h) as usize, x) };
                    kv * src[[sy, sx]]
                })
                .sum::<f64>()
                / norm
        })
    };
    pass(&pass(field, true), false)
}

/// Smoothed random displacement field scaled to a peak magnitude of `amplitude`.
fn displacement(h: usize, w: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
    let smooth = gaussian_blur(&raw, ELASTIC_SIGMA);
    let peak = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        smooth
    } else {
        smooth * (amplitude / peak)
    }
}

/// Apply a perturbation; output has the input's shape.
pub fn apply(img: &Image, p: &Perturbation) -> Result<Image> {
    let (_, h, w) = img.dim();
    let half = h.min(w) as f64 / 2.0;
    match *p {
        Perturbation::Translate { px } => {
            ensure!(px.is_finite() && px >= 0.0, InvalidArgument, "translation must be a finite non-negative pixel count");
            ensure!(px <= half, InvalidArgument, "translation {px}px exceeds half the image size ({half})");
            Ok(warp(img, |y, x| (y as f64 - px, x as f64 - px)))
        }
        Perturbation::Rotate { degrees } => {
            ensure!(degrees.is_finite() && degrees >= 0.0, InvalidArgument, "rotation must be finite and non-negative");
            let (s, c) = degrees.to_radians().sin_cos();
            let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            Ok(warp(img, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // inverse rotation of the output coordinate
                (cy - s * dx + c * dy, cx + c * dx + s * dy)
            }))
        }
        Perturbation::Elastic { severity, seed } => {
            let amp = severity.amplitude();
            ensure!(amp <= half, InvalidArgument, "elastic amplitude {amp}px exceeds half the image size ({half})");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dy = displacement(h, w, amp, &mut rng);
            let dx = displacement(h, w, amp, &mut rng);
            Ok(warp(img, |y, x| (y as f64 + dy[[y, x]], x as f64 + dx[[y, x]])))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
    pub ssim: f64,
    #[serde(with = "crate::quality::inf_as_null")]
    pub psnr_db: f64,
    pub accuracy: f64,
    pub sfs: f64,
    pub ssim_drop_pct: f64,
    /// Omitted while the baseline PSNR is infinite.
    pub psnr_drop_pct: Option<f64>,
    pub accuracy_drop_pct: f64,
    pub sfs_drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub baseline: PerturbationRow,
    pub rows: Vec<PerturbationRow>,
}

fn drop_pct(base: f64, value: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - value) / base * 100.0
    }
}

impl PerturbationReport {
    pub fn row(&self, p: &Perturbation) -> Option<&PerturbationRow> {
        self.rows.iter().find(|r| r.perturbation.as_ref() == Some(p))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Perturbation | SSIM | PSNR (dB) | Accuracy | SFS |\n|---|---|---|---|---|\n");
        let psnr = |v: f64| if v.is_finite() { format!("{v:.2}") } else { "Inf".to_string() };
        let b = &self.baseline;
        s += &format!("| {} | {:.2} | {} | {:.2} | {:.2} |\n", b.name, b.ssim, psnr(b.psnr_db), b.accuracy, b.sfs);
        for r in &self.rows {
            let pd = r.psnr_drop_pct.map(|d| format!(" ({d:.1}%)")).unwrap_or_default();
            s += &format!(
                "| {} | {:.2} ({:.1}%) | {}{} | {:.2} ({:.1}%) | {:.2} ({:.1}%) |\n",
                r.name, r.ssim, r.ssim_drop_pct, psnr(r.psnr_db), pd, r.accuracy, r.accuracy_drop_pct, r.sfs, r.sfs_drop_pct
            );
        }
        s
    }
}

/// Compare each perturbed copy of `set` against the originals.
pub fn run_battery(set: &[&PairedPatch], classifier: &Classifier, perturbations: &[Perturbation]) -> Result<PerturbationReport> {
    ensure!(!set.is_empty(), InvalidArgument, "perturbation set is empty");
    ensure!(classifier.epochs_trained > 0, InvalidState, "classifier has not been trained");
    let originals: Vec<&Image> = set.iter().map(|p| &p.ihc).collect();
    let truth: Vec<usize> = set.iter().map(|p| classifier.label(p)).collect();
    let real_preds = classifier.predict(&originals)?;
    let n_classes = classifier.n_classes();

    let measure = |name: String, p: Option<Perturbation>, images: &[&Image], base: Option<&PerturbationRow>| -> Result<PerturbationRow> {
        let pairs: Vec<(&Image, &Image)> = images.iter().copied().zip(originals.iter().copied()).collect();
        let q = evaluate_pairs(&pairs)?;
        let preds = classifier.predict(images)?;
        let sfs = compute_sfs(&real_preds, &preds, &truth, n_classes)?;
        let (sd, pd, ad, fd) = match base {
            Some(b) => (
                drop_pct(b.ssim, q.ssim),
                b.psnr_db.is_finite().then(|| drop_pct(b.psnr_db, q.psnr_db)),
                drop_pct(b.accuracy, sfs.acc_gen),
                drop_pct(b.sfs, sfs.sfs),
            ),
            None => (0.0, None, 0.0, 0.0),
        };
        Ok(PerturbationRow {
            name,
            perturbation: p,
            ssim: q.ssim,
            psnr_db: q.psnr_db,
            accuracy: sfs.acc_gen,
            sfs: sfs.sfs,
            ssim_drop_pct: sd,
            psnr_drop_pct: pd,
            accuracy_drop_pct: ad,
            sfs_drop_pct: fd,
        })
    };

    let baseline = measure("Identical IHC pair".into(), None, &originals, None)?;
    let mut rows = Vec::with_capacity(perturbations.len());
    for p in perturbations {
        let moved: Vec<Image> = originals.iter().map(|img| apply(img, p)).collect::<Result<_>>()?;
        let refs: Vec<&Image> = moved.iter().collect();
        rows.push(measure(p.to_string(), Some(*p), &refs, Some(&baseline))?);
    }
    Ok(PerturbationReport { baseline, rows })
}
