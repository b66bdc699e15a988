use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use iad_core::decoder::DecoderParams;
use iad_core::eval::experiment::{
    bank_category, calibrate_category, feature_stem, text_features, train_category, CategoryModel,
    ExperimentData, SweepSummary,
};
use iad_core::eval::synthetic::{self, write_suite, TextureSuiteConfig};
use iad_core::eval::{
    config_hash, default_grid, load_input_image, run_experiment, threshold_sweep, CategoryScores, ExperimentConfig,
    DEFAULT_GRID_POINTS,
};
use iad_core::features::FeatureSource;
use iad_core::fewshot::MemoryBank;
use iad_core::image::RgbImage;
use iad_core::judge::{grid_cells, render_verdict, yes_text, CalibratedThreshold, VerdictLine, NO_ANOMALY_TEXT};
use iad_core::prompt_learner::DEFAULT_QUESTION;
use iad_core::prompts::description_for;
use iad_core::simulation::{simulate_anomaly, write_sample, SimulationConfig};

use crate::config::{key_listing, load};
use crate::{Common, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
}

/// `run.json`: the command, its resolved config, and the config hash.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord<T> {
    command: String,
    config_hash: String,
    config: T,
}

fn write_run<T: Serialize>(out: &Path, command: &str, cfg: &T) -> Result<()> {
    let rec = RunRecord {
        command: command.to_string(),
        config_hash: config_hash(cfg),
        config: cfg,
    };
    write(&out.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            v.push(p);
        }
    }
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Directory of normal PNGs to simulate from.
    pub input_dir: Option<PathBuf>,
    /// Category of `input_dir` images (defaults to the directory name).
    pub category: Option<String>,
    /// Generate the texture suite under `<out>/dataset` and simulate from
    /// its training images instead of `input_dir`.
    pub suite: Option<TextureSuiteConfig>,
    pub samples_per_image: usize,
    pub seed: u64,
    pub simulation: SimulationConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            category: None,
            suite: None,
            samples_per_image: 1,
            seed: 0,
            simulation: SimulationConfig::default(),
        }
    }
}

pub fn simulate_help() -> String {
    key_listing::<SimulateDefaults>(
        "\nSet exactly one of input_dir or suite (e.g. --set suite={}).\n\
         Sample k of category c uses seed + k and the next image as donor.\n\
         Writes samples/<category>/<seed>_{img,mask}.png, <seed>_meta.json, qa.jsonl, run.json\n\
         and, with suite, the MVTec-layout dataset under dataset/.\n",
    )
}

/// `SimulateConfig` with the suite expanded so the key listing shows its fields.
#[derive(Serialize)]
struct SimulateDefaults(serde_json::Value);

impl Default for SimulateDefaults {
    fn default() -> Self {
        let mut v = serde_json::to_value(SimulateConfig::default()).expect("serializes");
        v["suite"] = serde_json::to_value(TextureSuiteConfig::default()).expect("serializes");
        SimulateDefaults(v)
    }
}

#[derive(Debug, Serialize)]
struct QaRecord {
    image: String,
    mask: String,
    category: String,
    question: String,
    answer: String,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn simulate(c: &Common) -> Result<()> {
    let cfg: SimulateConfig = load(c.config.as_deref(), &c.overrides())?;
    if cfg.samples_per_image == 0 {
        return Err(usage("samples_per_image must be at least 1"));
    }
    let sources: Vec<(String, Vec<RgbImage>)> = match (&cfg.input_dir, &cfg.suite) {
        (Some(_), Some(_)) => return Err(usage("set only one of input_dir and suite")),
        (None, None) => return Err(usage("set input_dir (normal images) or suite (texture suite)")),
        (Some(dir), None) => {
            if !dir.is_dir() {
                return Err(usage(format!("input_dir {} is not a directory", dir.display())));
            }
            let pngs = sorted_pngs(dir)?;
            if pngs.is_empty() {
                bail!("no PNG images in {}", dir.display());
            }
            let cat = match &cfg.category {
                Some(c) => c.clone(),
                None => dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| usage("cannot name the category; set category"))?,
            };
            let imgs = pngs.iter().map(|p| load_input_image(p)).collect::<iad_core::Result<Vec<_>>>()?;
            vec![(cat, imgs)]
        }
        (None, Some(suite)) => {
            suite.validate().map_err(|e| usage(e.to_string()))?;
            if cfg.category.is_some() {
                return Err(usage("category applies to input_dir only"));
            }
            mkdir(&c.out)?;
            write_suite(&c.out.join("dataset"), suite)?;
            suite
                .categories
                .iter()
                .map(|cat| {
                    let imgs = (0..suite.train_normals)
                        .map(|i| synthetic::train_image(cat, suite, i))
                        .collect::<iad_core::Result<Vec<_>>>()?;
                    Ok((cat.clone(), imgs))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let root = c.out.join("samples");
    mkdir(&root)?;
    let mut qa = String::new();
    let mut total = 0;
    for (cat, imgs) in &sources {
        let question = format!("{} {DEFAULT_QUESTION}", description_for(cat).description);
        for (i, img) in imgs.iter().enumerate() {
            for j in 0..cfg.samples_per_image {
                let k = i * cfg.samples_per_image + j;
                let seed = cfg.seed.wrapping_add(k as u64);
                let donor = &imgs[(i + 1 + j) % imgs.len()];
                let sample = simulate_anomaly(img, donor, seed, cat, &cfg.simulation)?;
                let paths = write_sample(&root, &sample, seed)?;
                let cells: Vec<String> = grid_cells(&sample.mask).into_iter().map(str::to_string).collect();
                let answer = if cells.is_empty() { NO_ANOMALY_TEXT.to_string() } else { yes_text(&cells) };
                let rec = QaRecord {
                    image: rel(&c.out, &paths.image),
                    mask: rel(&c.out, &paths.mask),
                    category: cat.clone(),
                    question: question.clone(),
                    answer,
                };
                qa.push_str(&serde_json::to_string(&rec)?);
                qa.push('\n');
                total += 1;
            }
        }
    }
    write(&c.out.join("qa.jsonl"), qa)?;
    write_run(&c.out, "simulate", &cfg)?;
    println!("wrote {total} samples to {}", root.display());
    Ok(())
}

// ------------------------------------------------------------ train / bank

pub fn experiment_help(cmd: &str) -> String {
    let what = match cmd {
        "train" => {
            "\nIgnores mode/shots/coreset_fraction/sweep_points. Writes checkpoints/<category>.dec1,\n\
             loss/<category>.csv, thresholds/<category>.json, run.json.\n"
        }
        "bank" => {
            "\nUses the first `shots` training images; ignores mode/train/sweep_points. Writes\n\
             banks/<category>.mbk1, banks/<category>.sources.json, thresholds/<category>.json, run.json.\n"
        }
        _ => {
            "\nWrites config.json, report.json, per_category.csv, verdicts.jsonl, sweep.csv (2+ categories),\n\
             run.json, and the per-category checkpoints or banks.\n"
        }
    };
    key_listing::<ExperimentConfig>(&format!(
        "  (dataset may instead be {{\"mvtec\": {{\"root\": DIR}}}}; mode is unsupervised or few_shot)\n{what}"
    ))
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = load(c.config.as_deref(), &c.overrides())?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if let iad_core::eval::DatasetSpec::Mvtec { root } = &cfg.dataset {
        if !root.is_dir() {
            return Err(usage(format!("dataset root {} is not a directory", root.display())));
        }
    }
    Ok(cfg)
}

fn save_threshold(out: &Path, cat: &str, t: &CalibratedThreshold) -> Result<()> {
    let dir = out.join("thresholds");
    mkdir(&dir)?;
    write(&dir.join(format!("{cat}.json")), serde_json::to_string_pretty(t)? + "\n")
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let data = ExperimentData::open(&cfg.dataset)?;
    let source = FeatureSource::from_config(&cfg.features)?;
    mkdir(&c.out)?;
    for (ci, cat) in data.categories().iter().enumerate() {
        let (outcome, text) = train_category(&data, ci, &source, &cfg)?;
        let dir = c.out.join("checkpoints");
        mkdir(&dir)?;
        outcome.params.save(&dir.join(format!("{cat}.dec1")))?;
        let ldir = c.out.join("loss");
        mkdir(&ldir)?;
        write(&ldir.join(format!("{cat}.csv")), outcome.trace_csv())?;
        let model = CategoryModel::Decoder {
            params: outcome.params.clone(),
            text,
        };
        let t = calibrate_category(&data, ci, &model, &source, &cfg)?;
        save_threshold(&c.out, cat, &t)?;
        println!("{cat}: final loss {:.6}, threshold {:.6}", outcome.final_loss(), t.value);
    }
    write_run(&c.out, "train", &cfg)
}

pub fn bank(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let data = ExperimentData::open(&cfg.dataset)?;
    let source = FeatureSource::from_config(&cfg.features)?;
    mkdir(&c.out)?;
    for (ci, cat) in data.categories().iter().enumerate() {
        let bank = bank_category(&data, ci, &source, &cfg)?;
        let dir = c.out.join("banks");
        mkdir(&dir)?;
        bank.save(&dir.join(format!("{cat}.mbk1")))?;
        write(
            &dir.join(format!("{cat}.sources.json")),
            serde_json::to_string_pretty(&bank.sources)? + "\n",
        )?;
        let sizes = bank.sizes();
        let model = CategoryModel::FewShot(bank);
        let t = calibrate_category(&data, ci, &model, &source, &cfg)?;
        save_threshold(&c.out, cat, &t)?;
        println!("{cat}: bank sizes {sizes:?}, threshold {:.6}", t.value);
    }
    write_run(&c.out, "bank", &cfg)
}

// ------------------------------------------------------------------- infer

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Output directory of a previous `train` or `bank` run.
    pub model_dir: Option<PathBuf>,
    /// A PNG file, a directory of PNGs, or a directory of such directories
    /// (e.g. an MVTec `test/` folder).
    pub images: Option<PathBuf>,
    /// Category whose model to use; optional when the model has only one.
    pub category: Option<String>,
}

pub fn infer_help() -> String {
    key_listing::<InferConfig>(
        "\nWrites maps/<group>/<stem>.png (heatmap on a fixed 0..1 viridis ramp, min/max in tEXt chunks),\n\
         maps/<group>/<stem>.f32 (raw row-major little-endian f32, 224x224), verdicts.jsonl, run.json.\n\
         Image ids are <category>/<group>/<stem>, where group is the image's parent directory.\n",
    )
}

/// `(group, path)` pairs in a fixed order.
fn collect_images(images: &Path) -> Result<Vec<(String, PathBuf)>> {
    let group_of = |dir: &Path| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into());
    if images.is_file() {
        let parent = images.parent().unwrap_or(Path::new("."));
        return Ok(vec![(group_of(parent), images.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = sorted_pngs(images)?.into_iter().map(|p| (group_of(images), p)).collect();
    let mut subdirs = Vec::new();
    for e in fs::read_dir(images).with_context(|| format!("reading {}", images.display()))? {
        let p = e?.path();
        if p.is_dir() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    for d in subdirs {
        out.extend(sorted_pngs(&d)?.into_iter().map(|p| (group_of(&d), p)));
    }
    if out.is_empty() {
        bail!("no PNG images under {}", images.display());
    }
    Ok(out)
}

fn model_categories(model_dir: &Path, sub: &str, ext: &str) -> Result<Vec<String>> {
    let dir = model_dir.join(sub);
    let mut v = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == ext) {
                v.push(stem(&p));
            }
        }
    }
    v.sort();
    Ok(v)
}

pub fn infer(c: &Common) -> Result<()> {
    let cfg: InferConfig = load(c.config.as_deref(), &c.overrides())?;
    let model_dir = cfg.model_dir.clone().ok_or_else(|| usage("set model_dir (output of `train` or `bank`)"))?;
    let images = cfg.images.clone().ok_or_else(|| usage("set images (a PNG file or directory)"))?;
    if !images.exists() {
        return Err(usage(format!("images path {} does not exist", images.display())));
    }
    let run_path = model_dir.join("run.json");
    if !run_path.is_file() {
        bail!(
            "no model at {}: {} is missing; run `train` first (or `bank` for few-shot)",
            model_dir.display(),
            run_path.display()
        );
    }
    let text = fs::read_to_string(&run_path).with_context(|| format!("reading {}", run_path.display()))?;
    let run: RunRecord<ExperimentConfig> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", run_path.display()))?;
    let (sub, ext, producer) = match run.command.as_str() {
        "train" => ("checkpoints", "dec1", "train"),
        "bank" => ("banks", "mbk1", "bank"),
        other => bail!("{} was written by `{other}`, not `train` or `bank`", run_path.display()),
    };
    let category = match &cfg.category {
        Some(cat) => cat.clone(),
        None => {
            let cats = model_categories(&model_dir, sub, ext)?;
            match cats.as_slice() {
                [one] => one.clone(),
                [] => bail!("no {ext} files in {}; run `{producer}` first", model_dir.join(sub).display()),
                _ => return Err(usage(format!("model has categories {cats:?}; set category"))),
            }
        }
    };
    let artifact = model_dir.join(sub).join(format!("{category}.{ext}"));
    if !artifact.is_file() {
        bail!("missing {}; run `{producer}` first", artifact.display());
    }
    let tpath = model_dir.join("thresholds").join(format!("{category}.json"));
    if !tpath.is_file() {
        bail!("missing {}; run `{producer}` first", tpath.display());
    }
    let threshold: CalibratedThreshold = serde_json::from_str(&fs::read_to_string(&tpath)?)
        .with_context(|| format!("parsing {}", tpath.display()))?;
    let model = if producer == "train" {
        CategoryModel::Decoder {
            params: DecoderParams::load(&artifact)?,
            text: text_features(&category, &run.config)?,
        }
    } else {
        CategoryModel::FewShot(MemoryBank::load(&artifact)?)
    };
    let source = FeatureSource::from_config(&run.config.features)?;
    let list = collect_images(&images)?;
    mkdir(&c.out)?;
    let mut lines = String::new();
    for (group, path) in &list {
        let id = format!("{category}/{group}/{}", stem(path));
        let img = load_input_image(path)?;
        let f = source.features(&img, &feature_stem(&id))?;
        let map = model.localize(&f)?;
        let dir = c.out.join("maps").join(group);
        mkdir(&dir)?;
        crate::heatmap::write_heatmap(&map, &dir.join(format!("{}.png", stem(path))))?;
        crate::heatmap::write_raw(&map, &dir.join(format!("{}.f32", stem(path))))?;
        let v = render_verdict(&map, &threshold);
        lines.push_str(&VerdictLine::new(&id, &v).to_json_line()?);
    }
    write(&c.out.join("verdicts.jsonl"), lines)?;
    write_run(&c.out, "infer", &cfg)?;
    println!("judged {} images", list.len());
    Ok(())
}

// -------------------------------------------------------------------- eval

pub fn eval(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let report = run_experiment(&cfg, &c.out)?;
    write_run(&c.out, "eval", &cfg)?;
    for r in &report.categories {
        println!(
            "{}: image-AUC {:.4} pixel-AUC {:.4} accuracy {:.4}",
            r.name, r.metrics.image_auc, r.metrics.pixel_auc, r.metrics.accuracy
        );
    }
    println!(
        "mean: image-AUC {:.4} pixel-AUC {:.4} accuracy {:.4}",
        report.mean.image_auc, report.mean.pixel_auc, report.mean.accuracy
    );
    Ok(())
}

// ------------------------------------------------------------------- sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// verdicts.jsonl from `infer` or `eval`; ids must look like
    /// `<category>/<defect_type>/<stem>`, with `good` marking normals.
    pub verdicts: Option<PathBuf>,
    pub grid_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            verdicts: None,
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

pub fn sweep_help() -> String {
    key_listing::<SweepConfig>(
        "\nWrites sweep.csv (threshold, per-category accuracy, unified mean), sweep.json, run.json.\n",
    )
}

pub fn sweep(c: &Common) -> Result<()> {
    let cfg: SweepConfig = load(c.config.as_deref(), &c.overrides())?;
    let path = cfg.verdicts.clone().ok_or_else(|| usage("set verdicts (a verdicts.jsonl file)"))?;
    if !path.is_file() {
        return Err(usage(format!("verdicts file {} does not exist", path.display())));
    }
    if cfg.grid_points == 0 {
        return Err(usage("grid_points must be at least 1"));
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut per: BTreeMap<String, CategoryScores> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: VerdictLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}: not a verdict line", path.display(), n + 1))?;
        let parts: Vec<&str> = v.image_id.split('/').collect();
        if parts.len() != 3 {
            bail!(
                "{}:{}: id {:?} is not <category>/<defect_type>/<stem>",
                path.display(),
                n + 1,
                v.image_id
            );
        }
        let e = per.entry(parts[0].to_string()).or_default();
        if parts[1] == "good" {
            e.normal.push(v.score);
        } else {
            e.anomalous.push(v.score);
        }
    }
    let grid = default_grid(&per, cfg.grid_points)?;
    let table = threshold_sweep(&per, &grid)?;
    mkdir(&c.out)?;
    write(&c.out.join("sweep.csv"), table.to_csv())?;
    let summary = SweepSummary {
        per_category_optimum: table.categories.iter().cloned().zip(table.per_category_optimum.iter().copied()).collect(),
        unified_optimum: table.unified_optimum,
        gap: table.gap,
    };
    write(&c.out.join("sweep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_run(&c.out, "sweep", &cfg)?;
    for (cat, o) in &summary.per_category_optimum {
        println!("{cat}: best accuracy {:.4} at threshold {:.6}", o.accuracy, o.threshold);
    }
    println!(
        "unified: best accuracy {:.4} at threshold {:.6}; gap {:.4}",
        summary.unified_optimum.accuracy, summary.unified_optimum.threshold, summary.gap
    );
    Ok(())
}
