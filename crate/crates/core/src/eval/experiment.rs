//! End-to-end runs: train or bank per category, calibrate a threshold on
//! held-out normals plus simulated anomalies, score the test split, and
//! write the report artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{load_input_image, load_mvtec_layout, load_test_item, LabeledDataset};
use super::metrics::{accuracy_of, pixel_auc, roc_auc};
use super::sweep::{default_grid, threshold_sweep, CategoryScores, Optimum};
use super::synthetic::{self, TextureSuiteConfig, DEFECT_KINDS};
use crate::decoder::{localize, train_on_features, DecoderParams, TrainConfig, TrainItem, TrainOutcome};
use crate::error::{Error, Result, StageExt};
use crate::features::{Backend, FeatureBackendConfig, FeatureSource, PatchFeatureStack, INPUT_SIZE};
use crate::fewshot::{build_memory_bank, localize_fewshot, MemoryBank};
use crate::image::RgbImage;
use crate::judge::{calibrate_threshold, image_score, render_verdict, CalibratedThreshold, VerdictLine};
use crate::math::Grid2D;
use crate::prompts::{toy_text_features, TextFeaturePair};
use crate::simulation::{simulate_anomaly, SimulationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory; nothing is read from disk.
    Synthetic(TextureSuiteConfig),
    /// A directory in the MVTec-AD layout.
    Mvtec { root: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(TextureSuiteConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Decoder trained on simulated anomalies.
    #[default]
    Unsupervised,
    /// Memory bank of `shots` normal images; no training.
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub mode: Mode,
    pub shots: usize,
    /// Seeds anomaly simulation and the toy text embeddings.
    pub seed: u64,
    pub features: FeatureBackendConfig,
    pub text_dim: usize,
    pub train: TrainConfig,
    pub simulation: SimulationConfig,
    /// Training normals withheld from fitting and used for calibration.
    pub calibration_holdout: usize,
    pub coreset_fraction: f64,
    pub sweep_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            mode: Mode::Unsupervised,
            shots: 1,
            seed: 0,
            features: FeatureBackendConfig::default(),
            text_dim: 128,
            train: TrainConfig {
                epochs: 20,
                lr: 1.0,
                ..TrainConfig::default()
            },
            simulation: SimulationConfig::default(),
            calibration_holdout: 8,
            coreset_fraction: 1.0,
            sweep_points: super::sweep::DEFAULT_GRID_POINTS,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.features.validate()?;
        self.train.validate()?;
        if self.text_dim < 2 {
            return Err(Error::Config(format!("text_dim must be >= 2, got {}", self.text_dim)));
        }
        if self.calibration_holdout == 0 {
            return Err(Error::Config("calibration_holdout must be at least 1".into()));
        }
        if self.mode == Mode::FewShot && self.shots == 0 {
            return Err(Error::Config("few-shot mode needs shots >= 1".into()));
        }
        if !(self.coreset_fraction > 0.0 && self.coreset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "coreset_fraction must be in (0, 1], got {}",
                self.coreset_fraction
            )));
        }
        if self.sweep_points == 0 {
            return Err(Error::Config("sweep_points must be at least 1".into()));
        }
        if self.mode == Mode::Unsupervised && self.features.backend == Backend::File {
            return Err(Error::Config(
                "unsupervised mode needs the toy backend: simulated anomalies have no precomputed features".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 of the compact JSON encoding, lowercase hex.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Independent seed for one simulated sample.
pub fn derive_seed(seed: u64, category: &str, purpose: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(category.as_bytes());
    h.update([0]);
    h.update(purpose.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A loaded test image.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTest {
    pub id: String,
    pub image: RgbImage,
    pub mask: Grid2D,
    pub is_anomalous: bool,
}

/// Uniform access to either dataset kind; images load on demand.
#[derive(Debug, Clone)]
pub enum ExperimentData {
    Synthetic(TextureSuiteConfig),
    Mvtec(LabeledDataset),
}

impl ExperimentData {
    pub fn open(dataset: &DatasetSpec) -> Result<Self> {
        match dataset {
            DatasetSpec::Synthetic(cfg) => {
                cfg.validate()?;
                Ok(ExperimentData::Synthetic(cfg.clone()))
            }
            DatasetSpec::Mvtec { root } => Ok(ExperimentData::Mvtec(load_mvtec_layout(root)?)),
        }
    }

    pub fn categories(&self) -> Vec<String> {
        match self {
            ExperimentData::Synthetic(c) => c.categories.clone(),
            ExperimentData::Mvtec(d) => d.categories.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn train_count(&self, ci: usize) -> usize {
        match self {
            ExperimentData::Synthetic(c) => c.train_normals,
            ExperimentData::Mvtec(d) => d.categories[ci].train.len(),
        }
    }

    pub fn test_count(&self, ci: usize) -> usize {
        match self {
            ExperimentData::Synthetic(c) => c.test_normals + c.test_anomalies,
            ExperimentData::Mvtec(d) => d.categories[ci].test.len(),
        }
    }

    /// `(id, image)` of training normal `i`; ids look like `<category>/train/<stem>`.
    pub fn train_image(&self, ci: usize, i: usize) -> Result<(String, RgbImage)> {
        match self {
            ExperimentData::Synthetic(c) => {
                let cat = &c.categories[ci];
                Ok((format!("{cat}/train/{i:03}"), synthetic::train_image(cat, c, i)?))
            }
            ExperimentData::Mvtec(d) => {
                let cat = &d.categories[ci];
                let p = &cat.train[i];
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((format!("{}/train/{stem}", cat.name), load_input_image(p)?))
            }
        }
    }

    /// Test image `j`; ids look like `<category>/<defect_type>/<stem>`.
    pub fn test_item(&self, ci: usize, j: usize) -> Result<LoadedTest> {
        match self {
            ExperimentData::Synthetic(c) => {
                let cat = &c.categories[ci];
                let t = synthetic::test_image(cat, c, j)?;
                let (kind, n) = if j < c.test_normals {
                    ("good", j)
                } else {
                    let i = j - c.test_normals;
                    (DEFECT_KINDS[i % DEFECT_KINDS.len()], i / DEFECT_KINDS.len())
                };
                Ok(LoadedTest {
                    id: format!("{cat}/{kind}/{n:03}"),
                    is_anomalous: t.kind.is_some(),
                    image: t.image,
                    mask: t.mask,
                })
            }
            ExperimentData::Mvtec(d) => {
                let item = &d.categories[ci].test[j];
                let (image, mask) = load_test_item(item)?;
                Ok(LoadedTest {
                    id: item.id.clone(),
                    image,
                    mask,
                    is_anomalous: item.is_anomalous,
                })
            }
        }
    }
}

/// File-backend key for an image id.
pub fn feature_stem(id: &str) -> String {
    id.replace('/', "_")
}

/// Either trained decoder or memory bank for one category.
#[derive(Debug, Clone)]
pub enum CategoryModel {
    Decoder { params: DecoderParams, text: TextFeaturePair },
    FewShot(MemoryBank),
}

impl CategoryModel {
    pub fn localize(&self, stack: &PatchFeatureStack) -> Result<Grid2D> {
        match self {
            CategoryModel::Decoder { params, text } => localize(stack, text, params),
            CategoryModel::FewShot(bank) => localize_fewshot(stack, bank),
        }
    }
}

/// Split of one category's training normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSplit {
    pub fit: usize,
    pub holdout: usize,
}

pub fn train_split(data: &ExperimentData, ci: usize, cfg: &ExperimentConfig) -> Result<TrainSplit> {
    let n = data.train_count(ci);
    let holdout = cfg.calibration_holdout;
    if n <= holdout {
        return Err(Error::Config(format!(
            "category {} has {n} training images; calibration_holdout {holdout} leaves none to fit",
            data.categories()[ci]
        )));
    }
    Ok(TrainSplit { fit: n - holdout, holdout })
}

/// Donor for simulating an anomaly on training image `i` of category `ci`:
/// even indices borrow from the next category when there is one, odd ones
/// from the next image of the same range.
fn donor(data: &ExperimentData, ci: usize, i: usize, range: std::ops::Range<usize>) -> Result<RgbImage> {
    let n_cats = data.categories().len();
    if i % 2 == 0 && n_cats > 1 {
        let other = (ci + 1) % n_cats;
        let j = i % data.train_count(other);
        return Ok(data.train_image(other, j)?.1);
    }
    let len = range.end - range.start;
    let j = range.start + (i - range.start + 1) % len;
    Ok(data.train_image(ci, j)?.1)
}

fn simulated(
    data: &ExperimentData,
    ci: usize,
    i: usize,
    range: std::ops::Range<usize>,
    purpose: &str,
    cfg: &ExperimentConfig,
) -> Result<(RgbImage, Grid2D)> {
    let cat = &data.categories()[ci];
    let (_, base) = data.train_image(ci, i)?;
    let d = donor(data, ci, i, range)?;
    let s = simulate_anomaly(&base, &d, derive_seed(cfg.seed, cat, purpose, i), cat, &cfg.simulation)?;
    Ok((s.image, s.mask))
}

pub fn text_features(category: &str, cfg: &ExperimentConfig) -> Result<TextFeaturePair> {
    toy_text_features(category, cfg.text_dim, cfg.seed)
}

/// Trains the decoder of category `ci` on its fit split: every normal
/// image plus one simulated anomaly built from it.
pub fn train_category(
    data: &ExperimentData,
    ci: usize,
    source: &FeatureSource,
    cfg: &ExperimentConfig,
) -> Result<(TrainOutcome, TextFeaturePair)> {
    let split = train_split(data, ci, cfg)?;
    let cat = &data.categories()[ci];
    let mut items = Vec::with_capacity(2 * split.fit);
    for i in 0..split.fit {
        let (id, img) = data.train_image(ci, i).stage("load")?;
        items.push(TrainItem {
            features: source.features(&img, &feature_stem(&id)).stage("features")?,
            mask: Grid2D::zeros(INPUT_SIZE, INPUT_SIZE),
        });
        let (sim, mask) = simulated(data, ci, i, 0..split.fit, "train", cfg).stage("simulate")?;
        items.push(TrainItem {
            features: source.features(&sim, "").stage("features")?,
            mask,
        });
    }
    let text = text_features(cat, cfg).stage("text")?;
    let dims = items[0].features.stage_dims();
    let init = DecoderParams::init(dims, cfg.text_dim, cfg.train.temperature, cfg.train.seed).stage("train")?;
    let out = train_on_features(&items, &text, init, &cfg.train).stage("train")?;
    log::info!("{cat}: trained on {} items, final loss {:.4}", items.len(), out.final_loss());
    Ok((out, text))
}

/// Memory bank from the first `shots` training normals of category `ci`.
pub fn bank_category(
    data: &ExperimentData,
    ci: usize,
    source: &FeatureSource,
    cfg: &ExperimentConfig,
) -> Result<MemoryBank> {
    let split = train_split(data, ci, cfg)?;
    if cfg.shots > split.fit {
        return Err(Error::Config(format!(
            "shots {} exceeds the {} training images left after the calibration holdout",
            cfg.shots, split.fit
        )));
    }
    let mut stacks = Vec::with_capacity(cfg.shots);
    let mut ids = Vec::with_capacity(cfg.shots);
    for i in 0..cfg.shots {
        let (id, img) = data.train_image(ci, i).stage("load")?;
        stacks.push(source.features(&img, &feature_stem(&id)).stage("features")?);
        ids.push(id);
    }
    let bank = build_memory_bank(&stacks, cfg.coreset_fraction).stage("bank")?;
    Ok(bank.with_sources(ids))
}

/// Threshold from scores of the held-out normals and one simulated anomaly
/// per held-out normal.
pub fn calibrate_category(
    data: &ExperimentData,
    ci: usize,
    model: &CategoryModel,
    source: &FeatureSource,
    cfg: &ExperimentConfig,
) -> Result<CalibratedThreshold> {
    let split = train_split(data, ci, cfg)?;
    let range = split.fit..split.fit + split.holdout;
    let mut normal = Vec::with_capacity(split.holdout);
    let mut anomalous = Vec::with_capacity(split.holdout);
    for i in range.clone() {
        let (id, img) = data.train_image(ci, i).stage("load")?;
        let f = source.features(&img, &feature_stem(&id)).stage("features")?;
        normal.push(image_score(&model.localize(&f).stage("calibrate")?));
        let (sim, _) = simulated(data, ci, i, range.clone(), "calibrate", cfg).stage("simulate")?;
        let f = match source {
            FeatureSource::Toy(enc) => enc.extract(&sim),
            // Simulated images have no stored features; the file backend
            // calibrates on normals alone.
            FeatureSource::Files(_) => continue,
        }
        .stage("features")?;
        anomalous.push(image_score(&model.localize(&f).stage("calibrate")?));
    }
    if anomalous.is_empty() {
        let top = normal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Ok(CalibratedThreshold::fixed(top));
    }
    calibrate_threshold(&normal, &anomalous).stage("calibrate")
}

/// Maps, scores, and verdicts for one category's test split.
#[derive(Debug, Clone)]
pub struct CategoryResult {
    pub name: String,
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
    pub predictions: Vec<bool>,
    pub maps: Vec<Grid2D>,
    pub masks: Vec<Grid2D>,
    pub verdicts: Vec<VerdictLine>,
}

pub fn evaluate_category(
    data: &ExperimentData,
    ci: usize,
    model: &CategoryModel,
    threshold: &CalibratedThreshold,
    source: &FeatureSource,
) -> Result<CategoryResult> {
    let n = data.test_count(ci);
    let mut r = CategoryResult {
        name: data.categories()[ci].clone(),
        ids: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        predictions: Vec::with_capacity(n),
        maps: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        verdicts: Vec::with_capacity(n),
    };
    for j in 0..n {
        let t = data.test_item(ci, j).stage("load")?;
        let f = source.features(&t.image, &feature_stem(&t.id)).stage("features")?;
        let map = model.localize(&f).stage("evaluate")?;
        let v = render_verdict(&map, threshold);
        r.verdicts.push(VerdictLine::new(&t.id, &v));
        r.scores.push(v.image_score);
        r.predictions.push(v.is_anomalous);
        r.labels.push(t.is_anomalous);
        r.ids.push(t.id);
        r.maps.push(map);
        r.masks.push(t.mask);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub image_auc: f64,
    pub pixel_auc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub n_test: usize,
    pub n_anomalous: usize,
    pub metrics: Summary,
    pub threshold: CalibratedThreshold,
    pub final_train_loss: Option<f64>,
    pub bank_sizes: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub per_category_optimum: BTreeMap<String, Optimum>,
    pub unified_optimum: Optimum,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub mode: Mode,
    pub categories: Vec<CategoryReport>,
    /// Unweighted mean of per-category metrics.
    pub mean: Summary,
    /// Metrics over all test images of all categories together.
    pub pooled: Summary,
    /// Present with two or more categories.
    pub sweep: Option<SweepSummary>,
}

impl EvalReport {
    pub fn per_category_csv(&self) -> String {
        let mut s = String::from(
            "category,n_test,n_anomalous,image_auc,pixel_auc,accuracy,threshold,calibration_balanced_accuracy\n",
        );
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.9},{:.6}",
                c.name,
                c.n_test,
                c.n_anomalous,
                c.metrics.image_auc,
                c.metrics.pixel_auc,
                c.metrics.accuracy,
                c.threshold.value,
                c.threshold.balanced_accuracy
            );
        }
        s
    }
}

fn gather<T: Clone>(results: &[&CategoryResult], f: impl Fn(&CategoryResult) -> &[T]) -> Vec<T> {
    results.iter().flat_map(|r| f(r).iter().cloned()).collect()
}

fn summarize(results: &[&CategoryResult]) -> Result<Summary> {
    let labels = gather(results, |r| &r.labels);
    let maps = gather(results, |r| &r.maps);
    let masks = gather(results, |r| &r.masks);
    Ok(Summary {
        image_auc: roc_auc(&gather(results, |r| &r.scores), &labels)?,
        pixel_auc: pixel_auc(&maps, &masks)?,
        accuracy: accuracy_of(&gather(results, |r| &r.predictions), &labels)?,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs the configured experiment and writes under `out_dir`:
/// `config.json`, `report.json`, `per_category.csv`, `verdicts.jsonl`,
/// `sweep.csv` (two or more categories), and per category either
/// `checkpoints/<category>.dec1` plus `loss/<category>.csv` or
/// `banks/<category>.mbk1` with its `.sources.json` image ids.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate().stage("config")?;
    let data = ExperimentData::open(&cfg.dataset).stage("load")?;
    let source = FeatureSource::from_config(&cfg.features).stage("features")?;
    mkdir(out_dir)?;
    let mut reports = Vec::new();
    let mut results = Vec::new();
    for (ci, cat) in data.categories().iter().enumerate() {
        let (model, loss, sizes) = match cfg.mode {
            Mode::Unsupervised => {
                let (out, text) = train_category(&data, ci, &source, cfg)?;
                let dir = out_dir.join("checkpoints");
                mkdir(&dir)?;
                out.params.save(&dir.join(format!("{cat}.dec1")))?;
                let ldir = out_dir.join("loss");
                mkdir(&ldir)?;
                write(&ldir.join(format!("{cat}.csv")), out.trace_csv())?;
                let loss = out.final_loss();
                (CategoryModel::Decoder { params: out.params, text }, Some(loss), None)
            }
            Mode::FewShot => {
                let bank = bank_category(&data, ci, &source, cfg)?;
                let dir = out_dir.join("banks");
                mkdir(&dir)?;
                bank.save(&dir.join(format!("{cat}.mbk1")))?;
                write(
                    &dir.join(format!("{cat}.sources.json")),
                    serde_json::to_string_pretty(&bank.sources)? + "\n",
                )?;
                let sizes = bank.sizes();
                (CategoryModel::FewShot(bank), None, Some(sizes))
            }
        };
        let threshold = calibrate_category(&data, ci, &model, &source, cfg)?;
        let result = evaluate_category(&data, ci, &model, &threshold, &source)?;
        let metrics = summarize(&[&result]).stage("evaluate")?;
        log::info!(
            "{cat}: image-AUC {:.4} pixel-AUC {:.4} accuracy {:.4}",
            metrics.image_auc,
            metrics.pixel_auc,
            metrics.accuracy
        );
        reports.push(CategoryReport {
            name: cat.clone(),
            n_test: result.labels.len(),
            n_anomalous: result.labels.iter().filter(|&&l| l).count(),
            metrics,
            threshold,
            final_train_loss: loss,
            bank_sizes: sizes,
        });
        results.push(result);
    }
    let n = reports.len() as f64;
    let mean = Summary {
        image_auc: reports.iter().map(|r| r.metrics.image_auc).sum::<f64>() / n,
        pixel_auc: reports.iter().map(|r| r.metrics.pixel_auc).sum::<f64>() / n,
        accuracy: reports.iter().map(|r| r.metrics.accuracy).sum::<f64>() / n,
    };
    let pooled = summarize(&results.iter().collect::<Vec<_>>()).stage("evaluate")?;
    let sweep = if results.len() >= 2 {
        let per: BTreeMap<String, CategoryScores> = results
            .iter()
            .map(|r| {
                let (mut normal, mut anomalous) = (Vec::new(), Vec::new());
                for (&s, &l) in r.scores.iter().zip(&r.labels) {
                    if l { anomalous.push(s) } else { normal.push(s) }
                }
                (r.name.clone(), CategoryScores { normal, anomalous })
            })
            .collect();
        let grid = default_grid(&per, cfg.sweep_points).stage("sweep")?;
        let table = threshold_sweep(&per, &grid).stage("sweep")?;
        write(&out_dir.join("sweep.csv"), table.to_csv())?;
        Some(SweepSummary {
            per_category_optimum: table.categories.iter().cloned().zip(table.per_category_optimum.iter().copied()).collect(),
            unified_optimum: table.unified_optimum,
            gap: table.gap,
        })
    } else {
        None
    };
    let mut lines = String::new();
    for r in &results {
        for v in &r.verdicts {
            lines.push_str(&v.to_json_line()?);
        }
    }
    write(&out_dir.join("verdicts.jsonl"), lines)?;
    let report = EvalReport {
        config_hash: cfg.hash(),
        mode: cfg.mode,
        categories: reports,
        mean,
        pooled,
        sweep,
    };
    write(&out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    write(&out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&out_dir.join("per_category.csv"), report.per_category_csv())?;
    Ok(report)
}
