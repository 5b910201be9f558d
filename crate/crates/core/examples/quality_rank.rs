//! SSIM/PSNR on a pair of images and the 0.6/0.4 composite ranking of several methods.

use stain_diffusion::diffusion::gaussian_image;
use stain_diffusion::quality::{ordinal, psnr, quality_rank, ssim, QualityResult};

fn main() -> stain_diffusion::Result<()> {
    let a = gaussian_image((3, 32, 32), 1).mapv(|v| (v * 0.4).clamp(-1.0, 1.0));
    let noisy = &a + &gaussian_image((3, 32, 32), 2).mapv(|v| v * 0.05);
    println!("SSIM(a, a) = {}, PSNR(a, a) = {}", ssim(&a, &a)?, psnr(&a, &a)?);
    println!("SSIM(a, noisy) = {:.4}, PSNR(a, noisy) = {:.2} dB", ssim(&a, &noisy)?, psnr(&a, &noisy)?);

    // published BCI benchmark values: (method, PSNR dB, SSIM)
    let table = [
        ("Reinhard", 15.34, 0.44),
        ("Macenko", 15.49, 0.41),
        ("Vahadane", 15.04, 0.35),
        ("CycleGAN", 16.20, 0.37),
        ("Pix2Pix", 19.63, 0.42),
        ("Pix2Pix-Pyramid", 21.61, 0.48),
        ("Palette", 17.13, 0.53),
        ("PST-Diff", 16.75, 0.38),
        ("Star-Diff", 21.30, 0.53),
    ];
    let methods: Vec<(String, QualityResult)> = table
        .iter()
        .map(|&(name, psnr_db, ssim)| (name.to_string(), QualityResult { ssim, psnr_db, n_pairs: 1 }))
        .collect();
    let ranking = quality_rank(&methods)?;
    println!("\n| Method | SSIM rank | PSNR rank | composite | rank |");
    println!("|---|---|---|---|---|");
    for e in &ranking.entries {
        println!("| {} | {} | {} | {:.2} | {} |", e.method, e.ssim_rank, e.psnr_rank, e.composite, ordinal(e.final_rank));
    }
    Ok(())
}
