//! Semantic fidelity score from classifier predictions on real and generated images.

use stain_diffusion::sfs::{compute_sfs, sfs_from_parts};

fn main() -> stain_diffusion::Result<()> {
    // ten HER2-negative, ten HER2-positive patches
    let truth: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    let mut real = truth.clone();
    real[3] = 1;
    real[15] = 0;
    let mut generated = real.clone();
    generated[12] = 0;
    generated[17] = 0;

    let identity = compute_sfs(&real, &real, &truth, 2)?;
    println!("real vs real: acc {:.2}, SFS {:.3} (= (acc + 1) / 2)", identity.acc_real, identity.sfs);
    let r = compute_sfs(&real, &generated, &truth, 2)?;
    println!("recall real {:?}, generated {:?}", r.recall_real, r.recall_gen);
    println!("avg degradation {:.3}, acc {:.2}, SFS {:.3}", r.avg_deg, r.acc_gen, r.sfs);
    println!("acc 0.87 with no degradation -> SFS {}", sfs_from_parts(0.87, 0.0).0);
    Ok(())
}
