//! HER2 classifier on IHC patches, trained with stage snapshots.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_archive, save_archive};
use crate::dataio::PairedPatch;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::resnet::{argmax, cross_entropy, ResNet};
use crate::nn::{Adam, Feature};
use crate::sfs::{compute_sfs, ClassifierStage, SfsReport, Stage};

const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width: usize,
    /// Positive = HER2 2+ or 3+; otherwise four classes.
    pub binarize: bool,
    /// Nominal underfit / properly-fit / overfit epochs; defaults to E/3, 2E/3, E.
    pub stage_epochs: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 24, batch_size: 16, learning_rate: 1e-3, width: 8, binarize: true, stage_epochs: None, seed: 0 }
    }
}

impl ClassifierConfig {
    pub fn n_classes(&self) -> usize {
        if self.binarize {
            2
        } else {
            4
        }
    }

    pub fn resolved_stage_epochs(&self) -> Result<[usize; 3]> {
        let e = self.epochs;
        let s = self.stage_epochs.unwrap_or([(e / 3).max(1), (2 * e / 3).max(1), e]);
        ensure!(
            s[0] >= 1 && s[0] < s[1] && s[1] < s[2] && s[2] <= e,
            InvalidArgument,
            "stage epochs {s:?} must be strictly increasing within 1..={e}"
        );
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: ResNet,
    pub binarize: bool,
    pub epochs_trained: usize,
    /// Set on stage snapshots taken during training.
    #[serde(default)]
    pub stage: Option<ClassifierStage>,
}

impl Classifier {
    pub fn new(width: usize, binarize: bool, seed: u64) -> Self {
        let n_classes = if binarize { 2 } else { 4 };
        let net = ResNet::new(3, width, n_classes, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { net, binarize, epochs_trained: 0, stage: None }
    }

    pub fn n_classes(&self) -> usize {
        self.net.n_classes
    }

    pub fn label(&self, p: &PairedPatch) -> usize {
        p.class(self.binarize)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        ensure!(self.epochs_trained > 0, InvalidState, "classifier has not been trained");
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let (logits, _) = self.net.forward(&Feature::from_images(chunk));
            out.extend(logits.iter().map(|z| argmax(z)));
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[usize]) -> Result<f64> {
        ensure!(images.len() == labels.len() && !labels.is_empty(), InvalidArgument, "accuracy needs matching, non-empty inputs");
        let preds = self.predict(images)?;
        Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// SFS of generated images against their real counterparts.
    pub fn sfs(&self, real: &[&Image], generated: &[&Image], truth: &[usize]) -> Result<SfsReport> {
        ensure!(real.len() == generated.len(), InvalidArgument, "{} real vs {} generated images", real.len(), generated.len());
        let real_preds = self.predict(real)?;
        let gen_preds = self.predict(generated)?;
        compute_sfs(&real_preds, &gen_preds, truth, self.n_classes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_archive(path, "classifier", self, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut c, _): (Classifier, _) = load_archive(path, "classifier")?;
        for p in c.net.params_mut() {
            p.ensure_buffers();
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct StagedClassifier {
    pub info: ClassifierStage,
    pub model: Classifier,
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub curve: Vec<CurvePoint>,
    pub stages: Vec<StagedClassifier>,
    /// False when no early epoch scored strictly below the properly-fit stage.
    pub stage_order_ok: bool,
}

impl ClassifierRun {
    pub fn stage(&self, which: Stage) -> &StagedClassifier {
        self.stages.iter().find(|s| s.info.stage == which).expect("all stages present")
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,test_acc\n");
        for p in &self.curve {
            s += &format!("{},{},{},{}\n", p.epoch, p.loss, p.train_acc, p.test_acc);
        }
        s
    }
}

/// Train on IHC patches, snapshotting stage checkpoints.
///
/// The underfit stage is walked back from its nominal epoch to the latest
/// earlier epoch whose test accuracy is strictly below the properly-fit stage.
pub fn train_classifier(train: &[&PairedPatch], test: &[&PairedPatch], cfg: &ClassifierConfig) -> Result<ClassifierRun> {
    ensure!(!train.is_empty() && !test.is_empty(), InvalidArgument, "classifier needs non-empty train and test sets");
    ensure!(cfg.batch_size >= 1 && cfg.width >= 1, InvalidArgument, "batch_size and width must be positive");
    ensure!(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite(), InvalidArgument, "learning_rate must be positive");
    let stage_epochs = cfg.resolved_stage_epochs()?;
    let mut model = Classifier::new(cfg.width, cfg.binarize, cfg.seed);
    let train_y: Vec<usize> = train.iter().map(|p| model.label(p)).collect();
    let test_y: Vec<usize> = test.iter().map(|p| model.label(p)).collect();
    let mut present = train_y.clone();
    present.sort_unstable();
    present.dedup();
    ensure!(present.len() >= 2, InvalidArgument, "training set contains a single class ({:?})", present);
    let train_x: Vec<&Image> = train.iter().map(|p| &p.ihc).collect();
    let test_x: Vec<&Image> = test.iter().map(|p| &p.ihc).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5_5f1e);
    let mut opt = Adam::new(cfg.learning_rate as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut snapshots: Vec<Classifier> = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&Image> = chunk.iter().map(|&i| train_x[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (logits, cache) = model.net.forward(&Feature::from_images(&xs));
            let (loss, dlogits) = cross_entropy(&logits, &ys);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: format!("classifier loss became {loss}"), last_checkpoint: None });
            }
            loss_sum += loss * chunk.len() as f64;
            model.net.backward(cache, &dlogits);
            opt.step(model.net.params_mut());
        }
        model.epochs_trained = epoch;
        curve.push(CurvePoint {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: model.accuracy(&train_x, &train_y)?,
            test_acc: model.accuracy(&test_x, &test_y)?,
        });
        if epoch <= stage_epochs[0] || stage_epochs[1..].contains(&epoch) {
            snapshots.push(model.clone());
        }
    }

    let snapshot = |epoch: usize| snapshots.iter().find(|m| m.epochs_trained == epoch).expect("snapshot kept").clone();
    let point = |epoch: usize| &curve[epoch - 1];
    let proper_acc = point(stage_epochs[1]).test_acc;
    let under = (1..=stage_epochs[0]).rev().find(|&e| point(e).test_acc < proper_acc);
    let stage_order_ok = under.is_some();
    let under = under.unwrap_or_else(|| {
        (1..=stage_epochs[0]).min_by(|&a, &b| point(a).test_acc.total_cmp(&point(b).test_acc)).expect("non-empty range")
    });
    let stages = [(Stage::Underfit, under), (Stage::ProperlyFit, stage_epochs[1]), (Stage::Overfit, stage_epochs[2])]
        .into_iter()
        .map(|(stage, epoch)| {
            let info = ClassifierStage { stage, epoch, train_acc: point(epoch).train_acc, test_acc: point(epoch).test_acc };
            let mut model = snapshot(epoch);
            model.stage = Some(info.clone());
            StagedClassifier { info, model }
        })
        .collect();
    Ok(ClassifierRun { curve, stages, stage_order_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_dataset;

    #[test]
    fn untrained_predict_is_invalid_state() {
        let c = Classifier::new(4, true, 0);
        let img = Image::zeros((3, 8, 8));
        assert_eq!(c.predict(&[&img]).unwrap_err().kind(), "invalid-state");
    }

    #[test]
    fn single_class_rejected() {
        let data = synth_dataset(6, 8, [1.0, 0.0, 0.0, 0.0], 1).unwrap();
        let refs: Vec<&PairedPatch> = data.iter().collect();
        let err = train_classifier(&refs, &refs, &ClassifierConfig { epochs: 3, ..Default::default() }).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
    }

    #[test]
    fn stage_epochs_validation() {
        let cfg = ClassifierConfig { epochs: 60, ..Default::default() };
        assert_eq!(cfg.resolved_stage_epochs().unwrap(), [20, 40, 60]);
        let bad = ClassifierConfig { epochs: 5, stage_epochs: Some([3, 3, 5]), ..Default::default() };
        assert!(bad.resolved_stage_epochs().is_err());
    }

    #[test]
    fn deterministic_curves_and_round_trip() {
        let data = synth_dataset(24, 8, [0.25; 4], 2).unwrap();
        let tr: Vec<&PairedPatch> = data.iter().skip(6).collect();
        let te: Vec<&PairedPatch> = data.iter().take(6).collect();
        let cfg = ClassifierConfig { epochs: 3, width: 4, ..Default::default() };
        let a = train_classifier(&tr, &te, &cfg).unwrap();
        let b = train_classifier(&tr, &te, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.stages.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        let m = &a.stage(Stage::Overfit).model;
        m.save(&path).unwrap();
        assert_eq!(&Classifier::load(&path).unwrap(), m);
    }
}
