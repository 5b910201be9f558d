//! RISE saliency of the reverse update on a single stained blob, exported as
//! `.npy` plus heat-map overlays.
//!
//! cargo run --release --example saliency -- [out_dir]

use stain_diffusion::dataio::{synth_dataset, synth_single_blob};
use stain_diffusion::denoiser::{train, ArchConfig, DenoiserPair, TrainConfig};
use stain_diffusion::diffusion::Orientation;
use stain_diffusion::image::mean_color;
use stain_diffusion::saliency::{inside_outside_means, rise_saliency, RiseConfig};
use stain_diffusion::schedules::{make_schedule, NoiseShape, RestorationShape};

fn main() -> stain_diffusion::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/saliency".into());
    let data = synth_dataset(120, 32, [0.25; 4], 7)?;
    let cfg = TrainConfig { epochs: 10, ..Default::default() };
    let s = make_schedule(cfg.timesteps, NoiseShape::Linear, RestorationShape::Linear)?;
    let mut pair = DenoiserPair::new_unet(&ArchConfig { base_width: 16, t_embedding_dim: 32 }, s, Orientation::HeMinusIhc, 0);
    train(&mut pair, &data, &cfg, None)?;

    let (patch, footprint) = synth_single_blob(32, 3, 100)?;
    let t = pair.schedule.timesteps;
    let rise = RiseConfig { timesteps: vec![t, t / 2, 1], n_masks: 500, fill: mean_color(&patch.he), ..Default::default() };
    let map = rise_saliency(&patch.he, &pair, &rise)?;
    for (t, m) in map.timesteps.iter().zip(&map.maps) {
        let (inside, outside) = inside_outside_means(m, &footprint);
        println!("t = {t:>2}: mean saliency inside blob {inside:.3}, outside {outside:.3}");
    }
    for path in map.export(out.as_ref(), &patch.he)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
