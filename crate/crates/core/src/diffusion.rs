//! Forward corruption and the dual-path reverse sampler.
//!
//! Forward marginal: `x_t = x_0 + alpha_bar[t] * eps + beta_bar[t] * r`, where
//! `r` is the residual between the stains. Reverse update:
//! `x_{t-1} = x_t - gamma_t * r_hat - eta_t * eps_hat`, with either path
//! switchable off. Sampler state is kept in `f64` so that long trajectories
//! telescope without accumulating `f32` rounding.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::{ensure_same_shape, Image};
use crate::schedules::SchedulePair;

/// Full-precision sampler state, shape `(3, H, W)`.
pub type State = Array3<f64>;

/// Sign convention of the restoration residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `r = he - ihc`; the forward process ends at the H&E image and sampling
    /// restores toward IHC.
    #[default]
    HeMinusIhc,
    /// `r = ihc - he`.
    IhcMinusHe,
}

impl std::str::FromStr for Orientation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "he_minus_ihc" | "he-minus-ihc" => Ok(Self::HeMinusIhc),
            "ihc_minus_he" | "ihc-minus-he" => Ok(Self::IhcMinusHe),
            _ => Err(format!("unknown orientation `{s}` (he_minus_ihc|ihc_minus_he)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualImage(pub Image);

impl ResidualImage {
    pub fn zeros_like(img: &Image) -> Self {
        Self(Image::zeros(img.raw_dim()))
    }
}

/// Which reverse-update terms are active. Serialized by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PathMask {
    pub use_restoration: bool,
    pub use_noise: bool,
}

impl PathMask {
    pub const BOTH: Self = Self { use_restoration: true, use_noise: true };
    pub const RESTORATION_ONLY: Self = Self { use_restoration: true, use_noise: false };
    pub const NOISE_ONLY: Self = Self { use_restoration: false, use_noise: true };

    pub fn new(use_restoration: bool, use_noise: bool) -> Result<Self> {
        ensure!(
            use_restoration || use_noise,
            InvalidArgument,
            "path mask must enable at least one path"
        );
        Ok(Self { use_restoration, use_noise })
    }

    pub fn name(&self) -> &'static str {
        match (self.use_restoration, self.use_noise) {
            (true, true) => "both",
            (true, false) => "restoration",
            (false, true) => "noise",
            (false, false) => "none",
        }
    }
}

impl std::str::FromStr for PathMask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(Self::BOTH),
            "restoration" => Ok(Self::RESTORATION_ONLY),
            "noise" => Ok(Self::NOISE_ONLY),
            _ => Err(format!("unknown path mask `{s}` (both|restoration|noise)")),
        }
    }
}

impl From<PathMask> for String {
    fn from(m: PathMask) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for PathMask {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// One point on a reverse trajectory.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub t: usize,
    pub x_t: State,
    pub cond_he: Image,
}

impl DiffusionSample {
    pub fn new(t: usize, x_t: State, cond_he: Image) -> Result<Self> {
        ensure!(
            x_t.dim() == cond_he.dim(),
            InvalidArgument,
            "state shape {:?} differs from conditioning shape {:?}",
            x_t.dim(),
            cond_he.dim()
        );
        Ok(Self { t, x_t, cond_he })
    }

    pub fn image(&self) -> Image {
        self.x_t.mapv(|v| v as f32)
    }
}

/// Source of the Gaussian noise in the forward process.
#[derive(Clone, Copy, Debug)]
pub enum Noise<'a> {
    Explicit(&'a Image),
    Seed(u64),
}

/// Restoration/noise predictions for a batch of states at a common timestep.
pub trait Predictor {
    /// Predict `(r_hat, eps_hat)` for each `(x_t, cond_he)` pair at step `t`.
    fn predict_batch(&self, x_t: &[Image], t: usize, cond_he: &[Image]) -> Result<Vec<(Image, Image)>>;

    fn predict(&self, x_t: &Image, t: usize, cond_he: &Image) -> Result<(Image, Image)> {
        let mut out = self.predict_batch(std::slice::from_ref(x_t), t, std::slice::from_ref(cond_he))?;
        Ok(out.pop().expect("one prediction per input"))
    }
}

/// Standard-normal image drawn from a seeded ChaCha stream.
pub fn gaussian_image(shape: (usize, usize, usize), seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

pub fn residual(target_ihc: &Image, source_he: &Image, orientation: Orientation) -> Result<ResidualImage> {
    ensure_same_shape(target_ihc, source_he, "residual")?;
    let r = match orientation {
        Orientation::HeMinusIhc => source_he - target_ihc,
        Orientation::IhcMinusHe => target_ihc - source_he,
    };
    Ok(ResidualImage(r))
}

/// Forward marginal at step `t`.
pub fn forward_sample(x0: &Image, residual: &ResidualImage, s: &SchedulePair, t: usize, noise: Noise<'_>) -> Result<State> {
    ensure!(t <= s.timesteps, InvalidArgument, "t = {t} outside [0, {}]", s.timesteps);
    ensure_same_shape(x0, &residual.0, "forward_sample residual")?;
    let generated;
    let eps = match noise {
        Noise::Explicit(e) => {
            ensure_same_shape(x0, e, "forward_sample noise")?;
            e
        }
        Noise::Seed(seed) => {
            generated = gaussian_image(x0.dim(), seed);
            &generated
        }
    };
    let (a, b) = (s.alpha_bar[t], s.beta_bar[t]);
    let mut out = State::zeros(x0.raw_dim());
    Zip::from(&mut out)
        .and(x0)
        .and(eps)
        .and(&residual.0)
        .for_each(|o, &x, &e, &r| *o = x as f64 + a * e as f64 + b * r as f64);
    Ok(out)
}

/// One reverse update from `t` to `t - 1`.
pub fn reverse_step(
    sample: &DiffusionSample,
    r_hat: &Image,
    eps_hat: &Image,
    s: &SchedulePair,
    mask: PathMask,
) -> Result<DiffusionSample> {
    ensure!(sample.t >= 1, InvalidState, "cannot reverse from t = 0");
    ensure!(sample.t <= s.timesteps, InvalidArgument, "t = {} outside [1, {}]", sample.t, s.timesteps);
    ensure!(
        r_hat.dim() == sample.x_t.dim() && eps_hat.dim() == sample.x_t.dim(),
        InvalidArgument,
        "prediction shapes {:?}/{:?} differ from state {:?}",
        r_hat.dim(),
        eps_hat.dim(),
        sample.x_t.dim()
    );
    let mut x = sample.x_t.clone();
    apply_update(&mut x, r_hat, eps_hat, s, sample.t, mask);
    Ok(DiffusionSample { t: sample.t - 1, x_t: x, cond_he: sample.cond_he.clone() })
}

fn apply_update(x: &mut State, r_hat: &Image, eps_hat: &Image, s: &SchedulePair, t: usize, mask: PathMask) {
    if mask.use_restoration {
        let g = s.gamma(t);
        Zip::from(&mut *x).and(r_hat).for_each(|x, &r| *x -= g * r as f64);
    }
    if mask.use_noise {
        let e = s.eta(t);
        Zip::from(&mut *x).and(eps_hat).for_each(|x, &n| *x -= e * n as f64);
    }
}

/// Start state `x_T = cond_he + alpha_bar[T] * eps`.
pub fn initial_state(cond_he: &Image, s: &SchedulePair, seed: u64) -> State {
    let eps = gaussian_image(cond_he.dim(), seed);
    let a = s.alpha_bar[s.timesteps];
    let mut x = State::zeros(cond_he.raw_dim());
    Zip::from(&mut x).and(cond_he).and(&eps).for_each(|x, &c, &e| *x = c as f64 + a * e as f64);
    x
}

/// Run the full reverse trajectory for one H&E image.
pub fn sample_ihc<P: Predictor + ?Sized>(
    cond_he: &Image,
    predictor: &P,
    s: &SchedulePair,
    mask: PathMask,
    rng_seed: u64,
) -> Result<Image> {
    let mut out = sample_ihc_batch(std::slice::from_ref(cond_he), predictor, s, mask, &[rng_seed])?;
    Ok(out.pop().expect("one output per input"))
}

/// Batched sampler; each image gets its own noise seed.
pub fn sample_ihc_batch<P: Predictor + ?Sized>(
    cond_he: &[Image],
    predictor: &P,
    s: &SchedulePair,
    mask: PathMask,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    let states = trajectory_batch(cond_he, predictor, s, mask, seeds, 0, |_, _| {})?;
    Ok(states
        .into_iter()
        .map(|x| x.mapv(|v| v.clamp(-1.0, 1.0) as f32))
        .collect())
}

/// Run the reverse process from `T` down to `stop_at`, calling `visit(t, states)`
/// with the states at every `t` (including `T` and `stop_at`).
pub fn trajectory_batch<P, F>(
    cond_he: &[Image],
    predictor: &P,
    s: &SchedulePair,
    mask: PathMask,
    seeds: &[u64],
    stop_at: usize,
    mut visit: F,
) -> Result<Vec<State>>
where
    P: Predictor + ?Sized,
    F: FnMut(usize, &[State]),
{
    ensure!(
        cond_he.len() == seeds.len(),
        InvalidArgument,
        "{} conditioning images but {} seeds",
        cond_he.len(),
        seeds.len()
    );
    ensure!(stop_at <= s.timesteps, InvalidArgument, "stop_at = {stop_at} beyond T");
    if let Some(first) = cond_he.first() {
        for c in cond_he {
            ensure_same_shape(first, c, "sample batch")?;
        }
    }
    let mut states: Vec<State> = cond_he
        .iter()
        .zip(seeds)
        .map(|(c, &seed)| initial_state(c, s, seed))
        .collect();
    visit(s.timesteps, &states);
    for t in (stop_at + 1..=s.timesteps).rev() {
        let inputs: Vec<Image> = states.iter().map(|x| x.mapv(|v| v as f32)).collect();
        let preds = predictor.predict_batch(&inputs, t, cond_he)?;
        ensure!(
            preds.len() == states.len(),
            InvalidState,
            "predictor returned {} outputs for {} inputs",
            preds.len(),
            states.len()
        );
        for (x, (r_hat, eps_hat)) in states.iter_mut().zip(&preds) {
            ensure!(
                r_hat.dim() == x.dim() && eps_hat.dim() == x.dim(),
                InvalidArgument,
                "predictor output shape mismatch"
            );
            apply_update(x, r_hat, eps_hat, s, t, mask);
        }
        visit(t - 1, &states);
    }
    Ok(states)
}
