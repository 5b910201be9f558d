//! Train the dual-path denoiser on synthetic pairs, then compare sampling with
//! both paths, restoration only and noise only.
//!
//! cargo run --release --example train_and_sample -- [epochs]

use stain_diffusion::classifier::{train_classifier, ClassifierConfig};
use stain_diffusion::cli::sample_records;
use stain_diffusion::dataio::{synth_dataset, synth_split, Dataset, PairedPatch, SplitName};
use stain_diffusion::denoiser::{train, ArchConfig, DenoiserPair, TrainConfig};
use stain_diffusion::diffusion::{Orientation, PathMask};
use stain_diffusion::image::Image;
use stain_diffusion::quality::evaluate_pairs;
use stain_diffusion::schedules::{make_schedule, NoiseShape, RestorationShape};
use stain_diffusion::sfs::Stage;

fn main() -> stain_diffusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let patches = synth_dataset(120, 32, [0.25; 4], 7)?;
    let split = synth_split(&patches, 0.25, 7)?;
    let ds = Dataset { patches, split };
    let train_set: Vec<PairedPatch> = ds.select(SplitName::Train).into_iter().cloned().collect();
    let test = ds.select(SplitName::Test);

    let cfg = TrainConfig { epochs, ..Default::default() };
    let s = make_schedule(cfg.timesteps, NoiseShape::Linear, RestorationShape::Linear)?;
    let mut pair = DenoiserPair::new_unet(&ArchConfig { base_width: 16, t_embedding_dim: 32 }, s, Orientation::HeMinusIhc, 0);
    let log = train(&mut pair, &train_set, &cfg, None)?;
    for e in &log.epochs {
        println!("epoch {:>3}: restoration {:.4} noise {:.4}", e.epoch, e.loss.restoration, e.loss.noise);
    }

    let clf_run = train_classifier(&ds.select(SplitName::Train), &test, &ClassifierConfig::default())?;
    let clf = &clf_run.stage(Stage::ProperlyFit).model;
    let real: Vec<&Image> = test.iter().map(|p| &p.ihc).collect();
    let truth: Vec<usize> = test.iter().map(|p| p.binary_label()).collect();
    println!("\n| Paths | SSIM | PSNR (dB) | Accuracy | SFS |\n|---|---|---|---|---|");
    for mask in [PathMask::BOTH, PathMask::RESTORATION_ONLY, PathMask::NOISE_ONLY] {
        let generated = sample_records(&pair, &test, mask, 1)?;
        let pairs: Vec<(&Image, &Image)> = generated.iter().zip(real.iter().copied()).collect();
        let q = evaluate_pairs(&pairs)?;
        let gen: Vec<&Image> = generated.iter().collect();
        let r = clf.sfs(&real, &gen, &truth)?;
        println!("| {} | {:.4} | {:.2} | {:.3} | {:.3} |", mask.name(), q.ssim, q.psnr_db, r.acc_gen, r.sfs);
    }
    Ok(())
}
