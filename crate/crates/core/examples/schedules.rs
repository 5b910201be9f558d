//! Schedule shapes and an oracle round trip through the forward and reverse processes.

use stain_diffusion::diffusion::{forward_sample, gaussian_image, reverse_step, DiffusionSample, Noise, PathMask, ResidualImage};
use stain_diffusion::image::Image;
use stain_diffusion::schedules::{make_schedule, NoiseShape, RestorationShape};

fn main() -> stain_diffusion::Result<()> {
    for (noise, rest) in [
        (NoiseShape::Linear, RestorationShape::Linear),
        (NoiseShape::Cosine, RestorationShape::Quadratic),
        (NoiseShape::Linear, RestorationShape::Zero),
    ] {
        let s = make_schedule(10, noise, rest)?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        println!("{noise:?}/{rest:?}");
        println!("  alpha_bar {}", fmt(&s.alpha_bar));
        println!("  beta_bar  {}", fmt(&s.beta_bar));
        println!("  sum gamma {:.6}  sum eta {:.6}", s.gammas().iter().sum::<f64>(), s.etas().iter().sum::<f64>());
    }

    // with the true residual and noise, T reverse steps land back on x0
    let s = make_schedule(50, NoiseShape::Linear, RestorationShape::Linear)?;
    let x0 = gaussian_image((3, 16, 16), 1).mapv(|v| (v * 0.3).clamp(-1.0, 1.0));
    let r = gaussian_image((3, 16, 16), 2).mapv(|v| v * 0.2);
    let eps = gaussian_image((3, 16, 16), 3);
    let x_t = forward_sample(&x0, &ResidualImage(r.clone()), &s, s.timesteps, Noise::Explicit(&eps))?;
    let cond: Image = &x0 + &r;
    let mut sample = DiffusionSample::new(s.timesteps, x_t, cond)?;
    while sample.t > 0 {
        sample = reverse_step(&sample, &r, &eps, &s, PathMask::BOTH)?;
    }
    let err = sample.x_t.iter().zip(&x0).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    println!("oracle round trip over T = {}: max error {err:.2e}", s.timesteps);
    Ok(())
}
