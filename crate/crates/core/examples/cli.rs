//! The command-line front end driven in-process: synthesise data, train briefly,
//! sample, and evaluate.
//!
//! cargo run --release --example cli -- [work_dir]

use stain_diffusion::cli::run_from;

fn main() -> stain_diffusion::Result<()> {
    let work = std::env::args().nth(1).unwrap_or_else(|| "out/cli".into());
    let at = |d: &str| format!("{work}/{d}");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth-data".into(), "--n".into(), "40".into(), "--size".into(), "32".into(), "--out".into(), at("data")],
        vec!["train".into(), "--data".into(), at("data"), "--epochs".into(), "2".into(), "--base-width".into(), "8".into(), "--out".into(), at("train")],
        vec!["classifier".into(), "--data".into(), at("data"), "--epochs".into(), "6".into(), "--out".into(), at("classifier")],
        vec![
            "evaluate".into(), "--real".into(), at("data"), "--checkpoint".into(), at("train/denoiser.json"),
            "--masks".into(), "both,noise".into(), "--classifier".into(), at("classifier"), "--out".into(), at("eval"),
        ],
    ];
    for args in steps {
        println!("stain-diffusion {}", args.join(" "));
        run_from(std::iter::once("stain-diffusion".to_string()).chain(args))?;
    }
    println!("\n{}", std::fs::read_to_string(at("eval/metrics.md")).unwrap_or_default());
    Ok(())
}
