//! Paired H&E/IHC datasets: the on-disk directory layout and a synthetic
//! paired-stain generator.
//!
//! Directory layout (written by [`write_dataset`], read by [`load_bci`]):
//!
//! ```text
//! root/
//!   HE/<id>.png
//!   IHC/<id>.png
//!   labels.csv        # id,her2[,split]   her2 in {0, 1+, 2+, 3+}
//! ```
//!
//! The native BCI release layout (`HE/{train,test}/<stem>_<label>.png`, label
//! token as the last `_`-separated field of the file stem) is also accepted
//! when no `labels.csv` is present.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::image::{denormalize, normalize};
use crate::error::{ensure, Error, Result};
use crate::image::{read_png, write_png, ByteImage, Image};

/// Fraction of the provided training split held out for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// One aligned record.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedPatch {
    pub id: String,
    /// Model-range H&E image.
    pub he: Image,
    /// Model-range IHC image.
    pub ihc: Image,
    /// HER2 score 0..=3 (0, 1+, 2+, 3+).
    pub her2: u8,
}

impl PairedPatch {
    /// 1 for HER2-positive (2+ and 3+), 0 otherwise.
    pub fn binary_label(&self) -> usize {
        binary_label(self.her2)
    }

    /// Class index under either the binary or the four-level scheme.
    pub fn class(&self, binarize: bool) -> usize {
        if binarize {
            self.binary_label()
        } else {
            self.her2 as usize
        }
    }
}

pub fn binary_label(her2: u8) -> usize {
    usize::from(her2 >= 2)
}

pub fn parse_her2(token: &str) -> Result<u8> {
    match token.trim() {
        "0" | "0+" => Ok(0),
        "1" | "1+" => Ok(1),
        "2" | "2+" => Ok(2),
        "3" | "3+" => Ok(3),
        other => Err(Error::Parse(format!("unknown HER2 label token `{other}`"))),
    }
}

pub fn her2_token(her2: u8) -> &'static str {
    ["0", "1+", "2+", "3+"][her2.min(3) as usize]
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            _ => Err(format!("unknown split `{s}` (train|val|test|all)")),
        }
    }
}

impl DatasetSplit {
    /// Split the given train/test assignment, carving a deterministic
    /// validation subset out of the training ids.
    pub fn with_validation(mut train: Vec<String>, mut test: Vec<String>, val_fraction: f64) -> Self {
        train.sort();
        test.sort();
        let n_val = (train.len() as f64 * val_fraction).round() as usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed_0001));
        let val_idx: BTreeSet<usize> = order.into_iter().take(n_val).collect();
        let (mut tr, mut val) = (Vec::new(), Vec::new());
        for (i, id) in train.into_iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(id);
            } else {
                tr.push(id);
            }
        }
        Self { train: tr, val, test }
    }

    pub fn ids(&self, which: SplitName) -> Vec<String> {
        match which {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => {
                let mut all: Vec<String> = self.train.iter().chain(&self.val).chain(&self.test).cloned().collect();
                all.sort();
                all
            }
        }
    }

    pub fn split_of(&self, id: &str) -> Option<&'static str> {
        if self.train.iter().any(|x| x == id) {
            Some("train")
        } else if self.val.iter().any(|x| x == id) {
            Some("val")
        } else if self.test.iter().any(|x| x == id) {
            Some("test")
        } else {
            None
        }
    }
}

/// Patches plus their split, with lookup by id.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub patches: Vec<PairedPatch>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn select(&self, which: SplitName) -> Vec<&PairedPatch> {
        let ids: BTreeSet<String> = self.split.ids(which).into_iter().collect();
        self.patches.iter().filter(|p| ids.contains(&p.id)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PairedPatch> {
        self.patches.iter().find(|p| p.id == id)
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

fn match_pairs(he: &BTreeMap<String, PathBuf>, ihc: &BTreeMap<String, PathBuf>) -> Result<()> {
    if let Some(id) = he.keys().find(|k| !ihc.contains_key(*k)) {
        return Err(Error::MissingPair(format!("H&E patch `{id}` has no IHC mate")));
    }
    if let Some(id) = ihc.keys().find(|k| !he.contains_key(*k)) {
        return Err(Error::MissingPair(format!("IHC patch `{id}` has no H&E mate")));
    }
    Ok(())
}

fn load_pair(id: &str, he: &Path, ihc: &Path, her2: u8) -> Result<PairedPatch> {
    let (he_img, ihc_img) = (read_png(he)?, read_png(ihc)?);
    ensure!(
        he_img.dim() == ihc_img.dim(),
        InvalidArgument,
        "patch `{id}`: H&E {:?} and IHC {:?} differ in size",
        he_img.dim(),
        ihc_img.dim()
    );
    Ok(PairedPatch { id: id.to_string(), he: normalize(&he_img), ihc: normalize(&ihc_img), her2 })
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    her2: String,
    #[serde(default)]
    split: Option<String>,
}

/// Load a paired dataset directory. Records are ordered by id.
pub fn load_bci(root: &Path) -> Result<(Vec<PairedPatch>, DatasetSplit)> {
    let labels = root.join("labels.csv");
    if labels.exists() {
        load_flat(root, &labels)
    } else {
        load_native(root)
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let (patches, split) = load_bci(root)?;
    Ok(Dataset { patches, split })
}

fn load_flat(root: &Path, labels: &Path) -> Result<(Vec<PairedPatch>, DatasetSplit)> {
    let he = png_stems(&root.join("HE"))?;
    let ihc = png_stems(&root.join("IHC"))?;
    match_pairs(&he, &ihc)?;
    let mut reader = csv::Reader::from_path(labels).map_err(|e| Error::Parse(format!("{}: {e}", labels.display())))?;
    let mut rows = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::Parse(format!("{}: {e}", labels.display())))?;
        let her2 = parse_her2(&row.her2)?;
        rows.insert(row.id.clone(), (her2, row.split));
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut patches = Vec::with_capacity(he.len());
    for (id, he_path) in &he {
        let (her2, split) = rows
            .get(id)
            .ok_or_else(|| Error::Parse(format!("no label for patch `{id}` in labels.csv")))?;
        patches.push(load_pair(id, he_path, &ihc[id], *her2)?);
        match split.as_deref().unwrap_or("train") {
            "train" => train.push(id.clone()),
            "val" => val.push(id.clone()),
            "test" => test.push(id.clone()),
            other => return Err(Error::Parse(format!("unknown split `{other}` for `{id}`"))),
        }
    }
    let split = if val.is_empty() {
        DatasetSplit::with_validation(train, test, DEFAULT_VAL_FRACTION)
    } else {
        DatasetSplit { train, val, test }
    };
    Ok((patches, split))
}

fn load_native(root: &Path) -> Result<(Vec<PairedPatch>, DatasetSplit)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut patches = Vec::new();
    for split in ["train", "test"] {
        let he_dir = root.join("HE").join(split);
        if !he_dir.is_dir() {
            continue;
        }
        let he = png_stems(&he_dir)?;
        let ihc = png_stems(&root.join("IHC").join(split))?;
        match_pairs(&he, &ihc)?;
        for (id, he_path) in &he {
            let token = id
                .rsplit('_')
                .next()
                .ok_or_else(|| Error::Parse(format!("cannot find a label in file name `{id}`")))?;
            patches.push(load_pair(id, he_path, &ihc[id], parse_her2(token)?)?);
            if split == "train" { &mut train } else { &mut test }.push(id.clone());
        }
    }
    ensure!(
        !patches.is_empty(),
        InvalidArgument,
        "{}: expected labels.csv with HE/ and IHC/, or HE/{{train,test}} and IHC/{{train,test}}",
        root.display()
    );
    patches.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((patches, DatasetSplit::with_validation(train, test, DEFAULT_VAL_FRACTION)))
}

/// Read every `<id>.png` in `dir`, normalised, keyed by id.
pub fn load_image_dir(dir: &Path) -> Result<BTreeMap<String, Image>> {
    png_stems(dir)?.into_iter().map(|(id, path)| Ok((id, normalize(&read_png(&path)?)))).collect()
}

/// Write model-range images as `<dir>/<id>.png`.
pub fn write_image_dir<'a>(dir: &Path, images: impl IntoIterator<Item = (&'a str, &'a Image)>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, img) in images {
        write_png(&dir.join(format!("{id}.png")), &denormalize(img))?;
    }
    Ok(())
}

/// Write patches in the flat layout. Splits are recorded per id.
pub fn write_dataset(root: &Path, patches: &[PairedPatch], split: &DatasetSplit) -> Result<()> {
    for sub in ["HE", "IHC"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    let labels = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels).map_err(|e| Error::Parse(format!("{}: {e}", labels.display())))?;
    let csv_err = |e: csv::Error| Error::Parse(format!("{}: {e}", labels.display()));
    w.write_record(["id", "her2", "split"]).map_err(csv_err)?;
    for p in patches {
        write_png(&root.join("HE").join(format!("{}.png", p.id)), &denormalize(&p.he))?;
        write_png(&root.join("IHC").join(format!("{}.png", p.id)), &denormalize(&p.ihc))?;
        let split_name = split.split_of(&p.id).unwrap_or("train");
        w.write_record([p.id.as_str(), her2_token(p.her2), split_name]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(())
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    /// Probabilities of HER2 0, 1+, 2+, 3+.
    pub class_balance: [f64; 4],
    pub seed: u64,
    /// Maximum random shift (px) of the IHC rendering relative to H&E.
    pub misalign_px: usize,
    /// Standard deviation of the per-patch expression level around the class score.
    pub expression_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 200, size: 64, class_balance: [0.25; 4], seed: 7, misalign_px: 0, expression_jitter: 0.3 }
    }
}

// Stain palette, unit-range RGB.
const HE_BACKGROUND: [f64; 3] = [0.94, 0.87, 0.92];
const EOSIN: [f64; 3] = [0.88, 0.55, 0.72];
const HEMATOXYLIN: [f64; 3] = [0.32, 0.19, 0.52];
const IHC_BACKGROUND: [f64; 3] = [0.93, 0.93, 0.95];
const COUNTERSTAIN: [f64; 3] = [0.72, 0.77, 0.88];
const DAB: [f64; 3] = [0.55, 0.33, 0.14];
const IHC_NUCLEUS: [f64; 3] = [0.36, 0.39, 0.63];
const PIXEL_NOISE: f64 = 0.03;
/// Relative darkening of the H&E stains per unit of expression.
const HE_CUE: f64 = 0.08;

/// Shared tissue geometry of one record.
struct Tissue {
    blobs: Vec<(f64, f64, f64)>,
    nuclei: Vec<(f64, f64, f64)>,
}

impl Tissue {
    fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let n_blobs = rng.random_range(2..=5);
        let blobs: Vec<_> = (0..n_blobs)
            .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.09..0.2) * s))
            .collect();
        let mut t = Self { blobs, nuclei: Vec::new() };
        t.scatter_nuclei(size, rng);
        t
    }

    fn single_blob<R: Rng>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let c = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
        let mut t = Self { blobs: vec![(c.0, c.1, 0.16 * s)], nuclei: Vec::new() };
        t.scatter_nuclei(size, rng);
        t
    }

    fn scatter_nuclei<R: Rng>(&mut self, size: usize, rng: &mut R) {
        let s = size as f64;
        let count = (s * s / 30.0) as usize;
        for _ in 0..count {
            let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            if self.field(x, y) > 0.45 {
                self.nuclei.push((x, y, rng.random_range(0.8..1.6)));
            }
        }
    }

    fn field(&self, x: f64, y: f64) -> f64 {
        self.blobs
            .iter()
            .map(|&(cx, cy, r)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum()
    }

    /// Tissue mask in [0, 1].
    fn mask(&self, x: f64, y: f64) -> f64 {
        smoothstep(0.35, 0.65, self.field(x, y))
    }

    fn nucleus(&self, x: f64, y: f64) -> f64 {
        self.nuclei
            .iter()
            .map(|&(cx, cy, r)| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                (-d2 / (2.0 * r * r)).exp()
            })
            .fold(0.0, f64::max)
    }
}

fn smoothstep(lo: f64, hi: f64, v: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// DAB strength for an expression level.
fn dab_strength(expression: f64) -> f64 {
    (0.05 + 0.27 * expression).clamp(0.0, 0.95)
}

fn render<R: Rng>(
    tissue: &Tissue,
    size: usize,
    expression: f64,
    shift: (f64, f64),
    rng: &mut R,
) -> (ByteImage, ByteImage) {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("finite");
    let mut he = Array3::zeros((3, size, size));
    let mut ihc = Array3::zeros((3, size, size));
    let eosin = EOSIN.map(|c| c * (1.0 - HE_CUE * expression));
    let hema = HEMATOXYLIN.map(|c| c * (1.0 - HE_CUE * expression));
    let tissue_ihc = lerp3(COUNTERSTAIN, DAB, dab_strength(expression));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let m = tissue.mask(fx, fy);
            let nuc = tissue.nucleus(fx, fy);
            let he_px = lerp3(lerp3(HE_BACKGROUND, eosin, m), hema, 0.85 * nuc);
            let (sx, sy) = (fx - shift.0, fy - shift.1);
            let m2 = tissue.mask(sx, sy);
            let nuc2 = tissue.nucleus(sx, sy);
            let ihc_px = lerp3(lerp3(IHC_BACKGROUND, tissue_ihc, m2), IHC_NUCLEUS, 0.6 * nuc2);
            for c in 0..3 {
                he[[c, y, x]] = quantize(he_px[c] + noise.sample(rng));
                ihc[[c, y, x]] = quantize(ihc_px[c] + noise.sample(rng));
            }
        }
    }
    (he, ihc)
}

fn validate_balance(p: &[f64; 4]) -> Result<()> {
    ensure!(
        p.iter().all(|v| v.is_finite() && *v >= 0.0),
        InvalidArgument,
        "class probabilities must be finite and non-negative: {p:?}"
    );
    let sum: f64 = p.iter().sum();
    ensure!((sum - 1.0).abs() <= 1e-9, InvalidArgument, "class probabilities sum to {sum}, expected 1");
    Ok(())
}

fn draw_class<R: Rng>(p: &[f64; 4], rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc && pk > 0.0 {
            return k as u8;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0) as u8
}

pub fn synth_dataset(n: usize, size: usize, class_balance: [f64; 4], seed: u64) -> Result<Vec<PairedPatch>> {
    synth_dataset_with(&SynthConfig { n, size, class_balance, seed, ..SynthConfig::default() })
}

/// Generate `cfg.n` pixel-aligned (unless `misalign_px > 0`) records.
pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Vec<PairedPatch>> {
    ensure!(cfg.n >= 1, InvalidArgument, "n must be >= 1");
    ensure!(cfg.size >= 4, InvalidArgument, "size must be >= 4, got {}", cfg.size);
    validate_balance(&cfg.class_balance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.expression_jitter.max(0.0)).expect("finite");
    let width = (cfg.n - 1).to_string().len().max(5);
    (0..cfg.n)
        .map(|i| {
            let her2 = draw_class(&cfg.class_balance, &mut rng);
            let expression = (her2 as f64 + jitter.sample(&mut rng)).clamp(-0.3, 3.3);
            let tissue = Tissue::random(cfg.size, &mut rng);
            let shift = if cfg.misalign_px > 0 {
                let m = cfg.misalign_px as i64;
                (rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64)
            } else {
                (0.0, 0.0)
            };
            let (he, ihc) = render(&tissue, cfg.size, expression, shift, &mut rng);
            Ok(PairedPatch { id: format!("syn_{i:0width$}"), he: normalize(&he), ihc: normalize(&ihc), her2 })
        })
        .collect()
}

/// One record with a single tissue blob, plus the blob's binary footprint.
pub fn synth_single_blob(size: usize, her2: u8, seed: u64) -> Result<(PairedPatch, Array2<bool>)> {
    ensure!(her2 <= 3, InvalidArgument, "her2 must be 0..=3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tissue = Tissue::single_blob(size, &mut rng);
    let (he, ihc) = render(&tissue, size, her2 as f64, (0.0, 0.0), &mut rng);
    let footprint = Array2::from_shape_fn((size, size), |(y, x)| tissue.mask(x as f64, y as f64) > 0.5);
    let patch = PairedPatch { id: format!("blob_{seed}"), he: normalize(&he), ihc: normalize(&ihc), her2 };
    Ok((patch, footprint))
}

/// Deterministic train/test assignment for synthetic records, with the
/// validation subset carved from train.
pub fn synth_split(patches: &[PairedPatch], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    ensure!(
        (0.0..1.0).contains(&test_fraction),
        InvalidArgument,
        "test fraction must be in [0, 1), got {test_fraction}"
    );
    let mut ids: Vec<String> = patches.iter().map(|p| p.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e57));
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let test = ids.split_off(ids.len() - n_test);
    Ok(DatasetSplit::with_validation(ids, test, DEFAULT_VAL_FRACTION))
}

/// Mean DAB-brown intensity: average of `R - B` in unit range over the image.
pub fn dab_intensity(img: &Image) -> f64 {
    let (_, h, w) = img.dim();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            s += ((img[[0, y, x]] - img[[2, y, x]]) * 0.5) as f64;
        }
    }
    s / (h * w) as f64
}
