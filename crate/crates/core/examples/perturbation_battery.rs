//! Spatial perturbation battery on real IHC: pixel metrics collapse while
//! classifier-based metrics hold.

use stain_diffusion::classifier::{train_classifier, ClassifierConfig};
use stain_diffusion::dataio::{synth_dataset, synth_split, Dataset, SplitName};
use stain_diffusion::perturb::{run_battery, standard_battery};
use stain_diffusion::sfs::Stage;

fn main() -> stain_diffusion::Result<()> {
    let patches = synth_dataset(160, 32, [0.25; 4], 5)?;
    let split = synth_split(&patches, 0.25, 5)?;
    let ds = Dataset { patches, split };
    let (train, test) = (ds.select(SplitName::Train), ds.select(SplitName::Test));
    let run = train_classifier(&train, &test, &ClassifierConfig::default())?;
    let clf = &run.stage(Stage::ProperlyFit).model;
    let report = run_battery(&test, clf, &standard_battery(0))?;
    println!("{}", report.to_markdown());
    Ok(())
}
