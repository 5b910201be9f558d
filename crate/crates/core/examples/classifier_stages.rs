//! Train the HER2 classifier with underfit / properly-fit / overfit snapshots and
//! compare accuracy and SFS across stages on a degraded copy of the test set.

use stain_diffusion::classifier::{train_classifier, ClassifierConfig};
use stain_diffusion::dataio::{synth_dataset, synth_split, Dataset, SplitName};
use stain_diffusion::image::Image;
use stain_diffusion::sfs::{stage_robustness, Stage};

fn main() -> stain_diffusion::Result<()> {
    let patches = synth_dataset(160, 32, [0.25; 4], 3)?;
    let split = synth_split(&patches, 0.25, 3)?;
    let ds = Dataset { patches, split };
    let (train, test) = (ds.select(SplitName::Train), ds.select(SplitName::Test));
    let run = train_classifier(&train, &test, &ClassifierConfig::default())?;
    print!("{}", run.curve_csv());

    // stand-in for generated images: real IHC washed toward grey
    let washed: Vec<Image> = test.iter().map(|p| p.ihc.mapv(|v| v * 0.6)).collect();
    let real: Vec<&Image> = test.iter().map(|p| &p.ihc).collect();
    let gen: Vec<&Image> = washed.iter().collect();
    let truth: Vec<usize> = test.iter().map(|p| p.binary_label()).collect();
    let reports = Stage::ALL
        .iter()
        .map(|&s| run.stage(s).model.sfs(&real, &gen, &truth).map(|mut r| {
            r.classifier_stage = Some(run.stage(s).info.clone());
            r
        }))
        .collect::<stain_diffusion::Result<Vec<_>>>()?;
    println!("\n{}", stage_robustness(&reports)?.to_markdown());
    Ok(())
}
