//! Generate a small synthetic H&E/IHC dataset and write it to disk.
//!
//! cargo run --example synth_data -- [out_dir]

use stain_diffusion::dataio::{dab_intensity, synth_dataset, synth_split, write_dataset};

fn main() -> stain_diffusion::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/synth".into());
    let patches = synth_dataset(40, 64, [0.25; 4], 7)?;
    let split = synth_split(&patches, 0.25, 7)?;
    write_dataset(out.as_ref(), &patches, &split)?;

    let mut brown = [(0.0, 0usize); 4];
    for p in &patches {
        let b = &mut brown[p.her2 as usize];
        b.0 += dab_intensity(&p.ihc);
        b.1 += 1;
    }
    println!("wrote {} pairs to {out} (train {}, val {}, test {})", patches.len(), split.train.len(), split.val.len(), split.test.len());
    for (score, (sum, n)) in brown.iter().enumerate() {
        if *n > 0 {
            println!("HER2 {score}: {n:>3} patches, mean DAB intensity {:.3}", sum / *n as f64);
        }
    }
    Ok(())
}
