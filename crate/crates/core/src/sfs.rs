//! Semantic Fidelity Score: classifier accuracy on generated images combined
//! with the mean per-class recall degradation relative to real images.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Underfit,
    ProperlyFit,
    Overfit,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Underfit, Stage::ProperlyFit, Stage::Overfit];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Underfit => "underfit",
            Stage::ProperlyFit => "properly_fit",
            Stage::Overfit => "overfit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "underfit" => Ok(Stage::Underfit),
            "properly_fit" | "proper" => Ok(Stage::ProperlyFit),
            "overfit" => Ok(Stage::Overfit),
            other => Err(Error::InvalidArgument(format!("unknown classifier stage '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStage {
    pub stage: Stage,
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfsReport {
    pub n_classes: usize,
    pub class_counts: Vec<usize>,
    /// `None` for classes absent from the ground truth.
    pub recall_real: Vec<Option<f64>>,
    pub recall_gen: Vec<Option<f64>>,
    pub avg_deg: f64,
    pub acc_real: f64,
    pub acc_gen: f64,
    pub sfs: f64,
    /// Unclamped value, which can exceed 1 when generated recalls beat real ones.
    pub sfs_raw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_stage: Option<ClassifierStage>,
}

fn check_labels(seqs: &[&[usize]], n_classes: usize) -> Result<()> {
    ensure!(n_classes >= 1, InvalidArgument, "need at least one class");
    let n = seqs[0].len();
    for s in seqs {
        ensure!(s.len() == n, InvalidArgument, "label sequences differ in length ({} vs {n})", s.len());
        if let Some(&bad) = s.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
        }
    }
    Ok(())
}

/// Per-class recall `TP_c / N_c`; `None` where `N_c = 0`.
pub fn class_recalls(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_labels(&[preds, truth], n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(truth) {
        count[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    Ok(tp.iter().zip(&count).map(|(&t, &n)| (n > 0).then(|| t as f64 / n as f64)).collect())
}

fn accuracy(preds: &[usize], truth: &[usize]) -> f64 {
    let correct = preds.iter().zip(truth).filter(|(p, y)| p == y).count();
    correct as f64 / truth.len() as f64
}

/// Combine `acc_gen` and the class-averaged recall drop into a score in `[0, 1]`.
pub fn sfs_from_parts(acc_gen: f64, avg_deg: f64) -> (f64, f64) {
    let raw = (acc_gen + (1.0 - avg_deg)) / 2.0;
    (raw.clamp(0.0, 1.0), raw)
}

pub fn compute_sfs(real_preds: &[usize], gen_preds: &[usize], truth: &[usize], n_classes: usize) -> Result<SfsReport> {
    check_labels(&[real_preds, gen_preds, truth], n_classes)?;
    ensure!(!truth.is_empty(), InvalidArgument, "empty label sequences");
    let recall_real = class_recalls(real_preds, truth, n_classes)?;
    let recall_gen = class_recalls(gen_preds, truth, n_classes)?;
    let mut class_counts = vec![0usize; n_classes];
    for &y in truth {
        class_counts[y] += 1;
    }
    let mut deg_sum = 0.0;
    let mut present = 0usize;
    for (r, g) in recall_real.iter().zip(&recall_gen) {
        if let (Some(r), Some(g)) = (r, g) {
            deg_sum += r - g;
            present += 1;
        }
    }
    let avg_deg = deg_sum / present as f64;
    let acc_gen = accuracy(gen_preds, truth);
    let (sfs, sfs_raw) = sfs_from_parts(acc_gen, avg_deg);
    Ok(SfsReport {
        n_classes,
        class_counts,
        recall_real,
        recall_gen,
        avg_deg,
        acc_real: accuracy(real_preds, truth),
        acc_gen,
        sfs,
        sfs_raw,
        classifier_stage: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: ClassifierStage,
    pub accuracy: f64,
    pub sfs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRobustness {
    pub rows: Vec<StageRow>,
    pub accuracy_range: f64,
    pub sfs_range: f64,
}

fn range(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = values.fold(f64::INFINITY, f64::min);
    max - min
}

/// Tabulate accuracy and SFS of one generated set under several classifier stages.
pub fn stage_robustness(reports: &[SfsReport]) -> Result<StageRobustness> {
    ensure!(!reports.is_empty(), InvalidState, "no classifier stage checkpoints supplied");
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let stage = r
            .classifier_stage
            .clone()
            .ok_or_else(|| Error::InvalidState("SFS report lacks its classifier stage".into()))?;
        rows.push(StageRow { stage, accuracy: r.acc_gen, sfs: r.sfs });
    }
    Ok(StageRobustness {
        accuracy_range: range(rows.iter().map(|r| r.accuracy)),
        sfs_range: range(rows.iter().map(|r| r.sfs)),
        rows,
    })
}

impl StageRobustness {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Stage | Epoch | Accuracy | SFS |\n|---|---|---|---|\n");
        for r in &self.rows {
            s += &format!("| {} | {} | {:.4} | {:.4} |\n", r.stage.stage, r.stage.epoch, r.accuracy, r.sfs);
        }
        s += &format!("| range | | {:.4} | {:.4} |\n", self.accuracy_range, self.sfs_range);
        s
    }
}
