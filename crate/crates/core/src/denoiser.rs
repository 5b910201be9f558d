//! Restoration and noise predictors and their joint training.
//!
//! Two independent networks share one topology. Each sees `x_t` concatenated
//! with the conditioning H&E image and a sinusoidal embedding of `t`. Training
//! draws `t` uniformly in `[1, T]` and `eps ~ N(0, I)`, builds `x_t` from the
//! forward marginal, and minimises
//! `w_res * MSE(r_hat, r) + w_eps * MSE(eps_hat, eps)`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::PairedPatch;
use crate::diffusion::{forward_sample, gaussian_image, residual, Noise, Orientation, Predictor};
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::unet::{UNet, UNetConfig};
use crate::nn::{timestep_embedding, Adam, ConditionalNet, Feature};
use crate::schedules::SchedulePair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub timesteps: usize,
    pub w_res: f64,
    pub w_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (when a directory is given).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            timesteps: 20,
            w_res: 1.0,
            w_eps: 1.0,
            seed: 0,
            checkpoint_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs > 0, InvalidArgument, "epochs must be positive");
        ensure!(self.batch_size > 0, InvalidArgument, "batch_size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning_rate must be positive"
        );
        ensure!(self.timesteps > 0, InvalidArgument, "timesteps must be positive");
        ensure!(self.checkpoint_interval > 0, InvalidArgument, "checkpoint_interval must be positive");
        ensure!(
            self.w_res >= 0.0 && self.w_eps >= 0.0 && self.w_res + self.w_eps > 0.0,
            InvalidArgument,
            "loss weights must be non-negative with a positive sum (got {}, {})",
            self.w_res,
            self.w_eps
        );
        Ok(())
    }
}

/// Architecture of each predictor network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base_width: usize,
    pub t_embedding_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { base_width: 32, t_embedding_dim: 32 }
    }
}

/// Restoration predictor `r_theta` and noise predictor `eps_theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserPair<N = UNet> {
    pub restorer: N,
    pub noiser: N,
    pub t_embedding_dim: usize,
    pub schedule: SchedulePair,
    pub orientation: Orientation,
    /// Completed training epochs; zero means untrained.
    pub epochs_trained: usize,
}

impl DenoiserPair<UNet> {
    pub fn new_unet(arch: &ArchConfig, schedule: SchedulePair, orientation: Orientation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = UNetConfig { in_channels: 6, out_channels: 3, base_width: arch.base_width, temb_dim: arch.t_embedding_dim };
        let restorer = UNet::new(cfg.clone(), &mut rng);
        let noiser = UNet::new(cfg, &mut rng);
        Self { restorer, noiser, t_embedding_dim: arch.t_embedding_dim, schedule, orientation, epochs_trained: 0 }
    }
}

/// Inputs of one training batch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x_t: Vec<Image>,
    pub cond_he: Vec<Image>,
    pub t: Vec<usize>,
    pub residual: Vec<Image>,
    pub eps: Vec<Image>,
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub restoration: f64,
    pub noise: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,combined,restoration,noise\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.loss.combined, e.loss.restoration, e.loss.noise));
        }
        s
    }
}

fn embed_batch(ts: &[usize], dim: usize) -> Vec<Vec<f32>> {
    ts.iter().map(|&t| timestep_embedding(t, 1, dim).remove(0)).collect()
}

fn mse_and_grad(pred: &Feature, target: &Feature, weight: f64) -> (f64, Feature) {
    let n = pred.data.len() as f64;
    let mut sum = 0.0f64;
    let scale = (2.0 * weight / n) as f32;
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p - t;
            sum += (d as f64) * (d as f64);
            scale * d
        })
        .collect();
    (sum / n, Feature { data, ..pred.clone() })
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

impl<N: ConditionalNet> DenoiserPair<N> {
    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t <= self.schedule.timesteps, InvalidArgument, "t = {t} outside [0, {}]", self.schedule.timesteps);
        Ok(())
    }

    /// Forward both networks on a batch at per-sample timesteps.
    fn forward_both(&self, x_t: &[Image], ts: &[usize], cond_he: &[Image]) -> (Feature, N::Cache, Feature, N::Cache, Vec<Vec<f32>>) {
        let input = Feature::concat(&Feature::from_images(&refs(x_t)), &Feature::from_images(&refs(cond_he)));
        let temb = embed_batch(ts, self.t_embedding_dim);
        let (r, rc) = self.restorer.forward(&input, &temb);
        let (e, ec) = self.noiser.forward(&input, &temb);
        (r, rc, e, ec, temb)
    }

    /// Compute the weighted loss on one batch and accumulate gradients into both networks.
    pub fn accumulate_gradients(&mut self, batch: &TrainBatch, w_res: f64, w_eps: f64) -> LossParts {
        let (r_hat, rc, e_hat, ec, temb) = self.forward_both(&batch.x_t, &batch.t, &batch.cond_he);
        let r_true = Feature::from_images(&refs(&batch.residual));
        let e_true = Feature::from_images(&refs(&batch.eps));
        let (l_res, d_res) = mse_and_grad(&r_hat, &r_true, w_res);
        let (l_eps, d_eps) = mse_and_grad(&e_hat, &e_true, w_eps);
        self.restorer.backward(rc, &d_res, &temb);
        self.noiser.backward(ec, &d_eps, &temb);
        LossParts { restoration: l_res, noise: l_eps, combined: w_res * l_res + w_eps * l_eps }
    }

    /// Loss without touching gradients.
    pub fn evaluate_loss(&self, batch: &TrainBatch, w_res: f64, w_eps: f64) -> LossParts {
        let (r_hat, _, e_hat, _, _) = self.forward_both(&batch.x_t, &batch.t, &batch.cond_he);
        let (l_res, _) = mse_and_grad(&r_hat, &Feature::from_images(&refs(&batch.residual)), w_res);
        let (l_eps, _) = mse_and_grad(&e_hat, &Feature::from_images(&refs(&batch.eps)), w_eps);
        LossParts { restoration: l_res, noise: l_eps, combined: w_res * l_res + w_eps * l_eps }
    }

    /// Predict `(r_hat, eps_hat)` for one state.
    pub fn predict_one(&self, x_t: &Image, t: usize, cond_he: &Image) -> Result<(Image, Image)> {
        self.predict(x_t, t, cond_he)
    }

    /// Build a training batch from records: random `t`, random `eps`, forward marginal.
    pub fn make_batch<R: Rng>(&self, records: &[&PairedPatch], rng: &mut R) -> Result<TrainBatch> {
        let s = &self.schedule;
        let mut batch = TrainBatch { x_t: vec![], cond_he: vec![], t: vec![], residual: vec![], eps: vec![] };
        for p in records {
            let t = rng.random_range(1..=s.timesteps);
            let eps = gaussian_image(p.ihc.dim(), rng.random());
            let r = residual(&p.ihc, &p.he, self.orientation)?;
            let x_t = forward_sample(&p.ihc, &r, s, t, Noise::Explicit(&eps))?;
            batch.x_t.push(x_t.mapv(|v| v as f32));
            batch.cond_he.push(p.he.clone());
            batch.t.push(t);
            batch.residual.push(r.0);
            batch.eps.push(eps);
        }
        Ok(batch)
    }
}

impl<N: ConditionalNet> Predictor for DenoiserPair<N> {
    fn predict_batch(&self, x_t: &[Image], t: usize, cond_he: &[Image]) -> Result<Vec<(Image, Image)>> {
        self.check_t(t)?;
        ensure!(x_t.len() == cond_he.len(), InvalidArgument, "batch length mismatch");
        let mut out = Vec::with_capacity(x_t.len());
        const CHUNK: usize = 32;
        for (xs, cs) in x_t.chunks(CHUNK).zip(cond_he.chunks(CHUNK)) {
            for (x, c) in xs.iter().zip(cs) {
                ensure!(x.dim() == c.dim(), InvalidArgument, "x_t {:?} vs cond_he {:?}", x.dim(), c.dim());
            }
            let ts = vec![t; xs.len()];
            let (r, _, e, _, _) = self.forward_both(xs, &ts, cs);
            ensure!(
                r.data.iter().chain(&e.data).all(|v| v.is_finite()),
                NumericFailure,
                "predictor produced non-finite output at t = {t}"
            );
            out.extend(r.to_images().into_iter().zip(e.to_images()));
        }
        Ok(out)
    }
}

/// Callback invoked at checkpoint epochs; returns the path written.
pub type CheckpointFn<'a, N> = dyn FnMut(&DenoiserPair<N>, usize) -> Result<PathBuf> + 'a;

/// Train both predictors in place.
pub fn train<N: ConditionalNet>(
    pair: &mut DenoiserPair<N>,
    data: &[PairedPatch],
    cfg: &TrainConfig,
    mut checkpoint: Option<&mut CheckpointFn<'_, N>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    ensure!(!data.is_empty(), InvalidArgument, "training set is empty");
    ensure!(
        cfg.timesteps == pair.schedule.timesteps,
        InvalidArgument,
        "config T = {} but schedule T = {}",
        cfg.timesteps,
        pair.schedule.timesteps
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_r = Adam::new(cfg.learning_rate as f32);
    let mut opt_e = Adam::new(cfg.learning_rate as f32);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_good: Option<PathBuf> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<&PairedPatch> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = pair.make_batch(&records, &mut rng)?;
            let loss = pair.accumulate_gradients(&batch, cfg.w_res, cfg.w_eps);
            if !loss.combined.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: format!("combined loss became {}", loss.combined),
                    last_checkpoint: last_good,
                });
            }
            opt_r.step(pair.restorer.params_mut());
            opt_e.step(pair.noiser.params_mut());
            let k = records.len() as f64;
            acc.restoration += loss.restoration * k;
            acc.noise += loss.noise * k;
            acc.combined += loss.combined * k;
            seen += records.len();
        }
        let n = seen as f64;
        let loss = LossParts { restoration: acc.restoration / n, noise: acc.noise / n, combined: acc.combined / n };
        log.epochs.push(EpochLog { epoch, loss });
        pair.epochs_trained += 1;
        if epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs {
            if let Some(cb) = checkpoint.as_deref_mut() {
                let path = cb(pair, epoch)?;
                log.checkpoints.push(path.clone());
                last_good = Some(path);
            }
        }
    }
    Ok(log)
}

/// Checkpoint callback writing `<dir>/denoiser_epoch_<e>.json`.
pub fn checkpoint_to_dir(dir: &Path) -> impl FnMut(&DenoiserPair<UNet>, usize) -> Result<PathBuf> + '_ {
    move |pair, epoch| {
        let path = dir.join(format!("denoiser_epoch_{epoch:04}.json"));
        crate::checkpoint::save_denoiser(&path, pair, None)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_dataset;
    use crate::nn::toy::ToyNet;
    use crate::schedules::{make_schedule, NoiseShape, RestorationShape};

    fn toy_pair(seed: u64) -> DenoiserPair<ToyNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedule = make_schedule(10, NoiseShape::Linear, RestorationShape::Linear).unwrap();
        DenoiserPair {
            restorer: ToyNet::new(6, 3, 8, &mut rng),
            noiser: ToyNet::new(6, 3, 8, &mut rng),
            t_embedding_dim: 8,
            schedule,
            orientation: Orientation::HeMinusIhc,
            epochs_trained: 0,
        }
    }

    fn toy_batch(pair: &DenoiserPair<ToyNet>) -> TrainBatch {
        let data = synth_dataset(3, 8, [0.25; 4], 5).unwrap();
        let recs: Vec<&PairedPatch> = data.iter().collect();
        pair.make_batch(&recs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn combined_loss_gradient_matches_central_differences() {
        let (w_res, w_eps) = (0.7, 1.3);
        let mut pair = toy_pair(3);
        let batch = toy_batch(&pair);
        pair.accumulate_gradients(&batch, w_res, w_eps);
        let analytic: Vec<Vec<f32>> = pair
            .restorer
            .params()
            .iter()
            .chain(pair.noiser.params().iter())
            .map(|p| p.grad.clone())
            .collect();
        // the toy predictor is linear in its parameters, so the loss is quadratic
        // and central differences are exact up to rounding
        let h = 1.0f32;
        let n_r = pair.restorer.params().len();
        let mut worst = 0.0f64;
        for (pi, g) in analytic.iter().enumerate() {
            for idx in (0..g.len()).step_by((g.len() / 7).max(1)) {
                let bump = |pair: &mut DenoiserPair<ToyNet>, delta: f32| {
                    let params = if pi < n_r { pair.restorer.params_mut() } else { pair.noiser.params_mut() };
                    let p = params.into_iter().nth(if pi < n_r { pi } else { pi - n_r }).unwrap();
                    p.value[idx] += delta;
                };
                bump(&mut pair, h);
                let lp = pair.evaluate_loss(&batch, w_res, w_eps).combined;
                bump(&mut pair, -2.0 * h);
                let lm = pair.evaluate_loss(&batch, w_res, w_eps).combined;
                bump(&mut pair, h);
                let fd = (lp - lm) / (2.0 * h as f64);
                let an = g[idx] as f64;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let mut pair = toy_pair(4);
        let batch = toy_batch(&pair);
        let l = pair.accumulate_gradients(&batch, 0.3, 2.0);
        assert_eq!(l.combined, 0.3 * l.restoration + 2.0 * l.noise);
    }

    #[test]
    fn zero_noise_weight_gives_zero_noiser_gradient() {
        let mut pair = toy_pair(5);
        let batch = toy_batch(&pair);
        pair.accumulate_gradients(&batch, 1.0, 0.0);
        assert!(pair.noiser.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
        assert!(pair.restorer.params().iter().any(|p| p.grad.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn predict_contracts() {
        let pair = toy_pair(6);
        let data = synth_dataset(2, 8, [0.25; 4], 1).unwrap();
        let (a1, b1) = pair.predict(&data[0].ihc, 3, &data[0].he).unwrap();
        let (a2, b2) = pair.predict(&data[0].ihc, 3, &data[0].he).unwrap();
        assert_eq!((&a1, &b1), (&a2, &b2));
        assert!(a1.iter().chain(b1.iter()).all(|v| v.is_finite()));
        let (a3, _) = pair.predict(&data[0].ihc, 3, &data[1].he).unwrap();
        let diff = a1.iter().zip(a3.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.0);
        assert_eq!(pair.predict(&data[0].ihc, 11, &data[0].he).unwrap_err().kind(), "invalid-argument");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut pair = toy_pair(7);
        let cfg = TrainConfig { timesteps: 10, ..TrainConfig::default() };
        assert_eq!(train(&mut pair, &[], &cfg, None).unwrap_err().kind(), "invalid-argument");
    }

    #[test]
    fn nan_loss_reports_training_failure() {
        let mut pair = toy_pair(8);
        pair.restorer.params_mut()[0].value[0] = f32::NAN;
        let data = synth_dataset(4, 8, [0.25; 4], 2).unwrap();
        let cfg = TrainConfig { timesteps: 10, epochs: 2, ..TrainConfig::default() };
        match train(&mut pair, &data, &cfg, None) {
            Err(Error::TrainingFailure { epoch, last_checkpoint, .. }) => {
                assert_eq!(epoch, 1);
                assert!(last_checkpoint.is_none());
            }
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_dataset(6, 8, [0.25; 4], 2).unwrap();
        let cfg = TrainConfig { timesteps: 10, epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut pair = toy_pair(9);
            train(&mut pair, &data, &cfg, None).unwrap().epochs.last().unwrap().loss.combined
        };
        assert_eq!(format!("{:.6}", run()), format!("{:.6}", run()));
    }
}
