use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use histoswin::checkpoint;
use histoswin::contour::{features_report_inputs, FeatureInput};
use histoswin::data::{
    channel_means, index_dataset, load_image, load_samples, resize_bilinear, split_dataset, synth_dataset, write_dataset,
    AugmentConfig, DatasetSplit, Sample, MEAN,
};
use histoswin::explain::{
    attribution_csv, lime_explain, model_proba, occlusion_map, render_heatmap, sha256_file, EmbeddingShap,
    ExplainManifest, ShapMode,
};
use histoswin::train::{self, multi_run, train_and_evaluate, RunResult};
use histoswin::{Error, HybridModel, HybridModelConfig, Result, Tensor};
use serde::Serialize;

use crate::config::{require_exists, RunConfig};
use crate::{CommonArgs, DataArgs, EvaluateArgs, ExplainArgs, FeaturesArgs, Method, Subset, SynthArgs, TrainArgs};

const LOCK_NAME: &str = ".histoswin.lock";

/// Exclusive ownership of an output directory for the life of a command.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_NAME);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another process ({} exists)", dir.display(), path.display()))
            } else {
                io_err(&path, e)
            }
        })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(OutputLock(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("json: {e}")))?;
    text.push('\n');
    write_file(path, text)
}

/// Loads `--config`, checks that it exists first, then applies the shared
/// overrides.
fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    if let Some(p) = &common.config {
        require_exists([p.as_path()])?;
    }
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(root) = &data.data {
        cfg.data.root = Some(root.clone());
        cfg.data.synth = None;
    }
    if let Some(split) = &data.split {
        cfg.data.split = Some(split.clone());
    }
}

fn data_paths(cfg: &RunConfig) -> Vec<&Path> {
    cfg.data.root.iter().chain(&cfg.data.split).map(PathBuf::as_path).collect()
}

struct Dataset {
    class_names: Vec<String>,
    samples: Vec<Sample>,
    split: DatasetSplit,
}

impl Dataset {
    fn part(&self, ids: &[String]) -> Result<Vec<Sample>> {
        Ok(DatasetSplit::select(ids, &self.samples)?.into_iter().cloned().collect())
    }
}

/// The configured corpus at `size×size`, with the split named in the config,
/// the one stored next to the images, or a fresh seeded split.
fn load_dataset(cfg: &RunConfig, size: usize) -> Result<Dataset> {
    let (class_names, samples, stored_split) = match (&cfg.data.root, &cfg.data.synth) {
        (Some(root), _) => {
            let index = index_dataset(root)?;
            let samples = load_samples(&index, size)?;
            let stored = Some(root.join("split.json")).filter(|p| p.is_file());
            (index.class_names, samples, stored)
        }
        (None, Some(spec)) => {
            let mut samples = synth_dataset(spec.kind, spec.n, spec.size, cfg.seed()?)?;
            if spec.size != size {
                for s in &mut samples {
                    s.image = resize_bilinear(&s.image, size, size)?;
                }
            }
            let names = spec.kind.class_names().iter().map(|n| n.to_string()).collect();
            (names, samples, None)
        }
        (None, None) => {
            return Err(Error::Config(
                "no dataset: pass --data or set data.root or data.synth in the config".into(),
            ))
        }
    };
    let split = match cfg.data.split.as_deref().or(stored_split.as_deref()) {
        Some(path) => DatasetSplit::load(path)?,
        None => {
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            split_dataset(&ids, &labels, cfg.seed()?)?
        }
    };
    Ok(Dataset {
        class_names,
        samples,
        split,
    })
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    let mut spec = cfg.data.synth.clone().unwrap_or_default();
    if let Some(kind) = args.kind {
        spec.kind = kind.into();
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(size) = args.size {
        spec.size = size;
    }
    cfg.data.synth = Some(spec.clone());
    let seed = cfg.seed()?;
    let out = cfg.output()?.to_path_buf();
    let samples = synth_dataset(spec.kind, spec.n, spec.size, seed)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = split_dataset(&ids, &labels, seed)?;
    let _lock = OutputLock::acquire(&out)?;
    write_dataset(&samples, &out)?;
    split.save(&out.join("split.json"))?;
    println!(
        "wrote {} images to {} (train {}, val {}, test {})",
        samples.len(),
        out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    #[serde(flatten)]
    result: RunResult,
    best_epoch: Option<usize>,
    final_train_loss: Option<f64>,
    best_epoch_train_loss: Option<f64>,
    test_loss: f64,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    apply_data(&mut cfg, &args.data);
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lr = args.lr.unwrap_or(t.lr);
    t.dropout = args.dropout.unwrap_or(t.dropout);
    t.runs = args.runs.unwrap_or(t.runs);
    if args.no_augment {
        cfg.augment = AugmentConfig::disabled();
    }
    require_exists(data_paths(&cfg))?;
    let seed = cfg.seed()?;
    let out = cfg.output()?.to_path_buf();
    let train_cfg = cfg.train_config()?;
    train_cfg.validate()?;
    if cfg.train.runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }

    let data = load_dataset(&cfg, cfg.model.input_size)?;
    cfg.model.num_classes = data.class_names.len();
    cfg.model.validate()?;
    let (train, val, test) = (data.part(&data.split.train)?, data.part(&data.split.val)?, data.part(&data.split.test)?);

    let _lock = OutputLock::acquire(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    data.split.save(&out.join("split.json"))?;
    let runs = cfg.train.runs;
    let summary = multi_run(runs, seed, |i, run_seed| {
        let dir = if runs == 1 { out.clone() } else { out.join(format!("run_{}", i + 1)) };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let exp = train_and_evaluate(
            &cfg.model,
            &train_cfg,
            &train,
            &val,
            &test,
            run_seed,
            Some(&dir.join("best.ckpt")),
        )?;
        let report = exp.test.with_class_names(&data.class_names);
        write_file(&dir.join("train.csv"), exp.outcome.record.to_csv()?)?;
        write_file(&dir.join("metrics.json"), report.to_json())?;
        write_file(&dir.join("metrics.csv"), report.to_csv()?)?;
        let record = &exp.outcome.record;
        write_json(
            &dir.join("run.json"),
            &RunSummary {
                result: exp.result.clone(),
                best_epoch: record.best_epoch,
                final_train_loss: record.final_train_loss(),
                best_epoch_train_loss: record.best_epoch_train_loss(),
                test_loss: report.mean_loss,
            },
        )?;
        println!(
            "run {} (seed {run_seed}): train {:.4} val {:.4} test {:.4}, best epoch {}",
            i + 1,
            exp.result.train_acc,
            exp.result.val_acc,
            exp.result.test_acc,
            record.best_epoch.map_or("initial".to_string(), |e| e.to_string())
        );
        Ok(exp.result)
    })?;
    if runs > 1 {
        write_file(&out.join("summary.csv"), summary.to_csv()?)?;
        write_json(&out.join("summary.json"), &summary)?;
        println!(
            "mean over {runs} runs: train {:.4} ± {:.4}, val {:.4} ± {:.4}, test {:.4} ± {:.4}",
            summary.mean[0], summary.std[0], summary.mean[1], summary.std[1], summary.mean[2], summary.std[2]
        );
    }
    Ok(())
}

/// Loads a checkpoint; with a config file, its architecture must match the
/// configured one. The class count always comes from the data, so it is
/// checked against the dataset instead.
fn load_model(path: &Path, cfg: &RunConfig, have_config: bool) -> Result<HybridModel<f32>> {
    let model = checkpoint::load(path)?;
    if have_config {
        let expected = HybridModelConfig {
            num_classes: model.config().num_classes,
            ..cfg.model.clone()
        };
        checkpoint::check_config(&model, &expected)?;
    }
    Ok(model)
}

fn check_classes(model: &HybridModel<f32>, class_names: &[String]) -> Result<()> {
    let k = model.config().num_classes;
    if k != class_names.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {k} classes, dataset has {}",
            class_names.len()
        )));
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    apply_data(&mut cfg, &args.data);
    require_exists(std::iter::once(args.checkpoint.as_path()).chain(data_paths(&cfg)))?;
    let out = cfg.output()?.to_path_buf();
    let model = load_model(&args.checkpoint, &cfg, args.common.config.is_some())?;
    let data = load_dataset(&cfg, model.config().input_size)?;
    check_classes(&model, &data.class_names)?;
    let ids: Vec<String> = match args.subset.unwrap_or(Subset::Test) {
        Subset::Train => data.split.train.clone(),
        Subset::Val => data.split.val.clone(),
        Subset::Test => data.split.test.clone(),
        Subset::All => data.samples.iter().map(|s| s.id.clone()).collect(),
    };
    let samples = data.part(&ids)?;
    let report = train::evaluate(&model, &samples)?.with_class_names(&data.class_names);
    let _lock = OutputLock::acquire(&out)?;
    write_file(&out.join("metrics.json"), report.to_json())?;
    write_file(&out.join("metrics.csv"), report.to_csv()?)?;
    println!(
        "{} samples: accuracy {:.4}, macro F1 {:.4}",
        samples.len(),
        report.accuracy,
        report.macro_f1
    );
    Ok(())
}

fn grid_csv(header: [&str; 3], rows: usize, cols: usize, values: &[f64]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in 0..rows {
        for c in 0..cols {
            s.push_str(&format!("{r},{c},{}\n", values[r * cols + c]));
        }
    }
    s
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    apply_data(&mut cfg, &args.data);
    let o = &mut cfg.explain.occlusion;
    o.patch = args.patch.unwrap_or(o.patch);
    o.stride = args.stride.unwrap_or(o.stride);
    let l = &mut cfg.explain.lime;
    l.grid = args.grid.unwrap_or(l.grid);
    l.num_samples = args.samples.unwrap_or(l.num_samples);
    l.kernel_width = args.kernel_width.unwrap_or(l.kernel_width);
    l.ridge = args.ridge.unwrap_or(l.ridge);
    let s = &mut cfg.explain.shap;
    s.components = args.components.unwrap_or(s.components);
    s.background = args.background.unwrap_or(s.background);
    if let Some(budget) = args.shap_budget {
        s.mode = ShapMode::Sampled(budget);
    }
    let mut required = vec![args.checkpoint.as_path(), args.image.as_path()];
    required.extend(data_paths(&cfg));
    require_exists(required)?;
    let seed = cfg.seed()?;
    let out = cfg.output()?.to_path_buf();
    if args.method == Method::Shap && !cfg.has_data() {
        return Err(Error::Config("shap needs the training data (--data) to fit its PCA".into()));
    }

    let model = load_model(&args.checkpoint, &cfg, args.common.config.is_some())?;
    let size = model.config().input_size;
    let mut img = load_image(&args.image)?;
    if img.shape()[1..] != [size, size] {
        img = resize_bilinear(&img, size, size)?;
    }
    let proba = model_proba(&model);
    let target = match args.target {
        Some(t) => t,
        None => model.forward(&histoswin::data::normalize(&img))?.label,
    };
    let input_id = args
        .image
        .file_stem()
        .map_or_else(|| args.image.display().to_string(), |s| s.to_string_lossy().to_string());

    let _lock = OutputLock::acquire(&out)?;
    let (method, hyperparameters, artifacts) = match args.method {
        Method::Occlusion => {
            let fallback = if cfg.has_data() {
                let data = load_dataset(&cfg, size)?;
                channel_means(&data.part(&data.split.train)?)?
            } else {
                MEAN
            };
            let occ = cfg.occlusion(fallback);
            cfg.explain.occlusion.baseline = Some(occ.baseline);
            let map = occlusion_map(&proba, &img, target, &occ)?;
            render_heatmap(&map.drops, map.rows, map.cols, &img, &out.join("occlusion.pgm"), &out.join("occlusion_overlay.ppm"))?;
            write_file(&out.join("occlusion.csv"), grid_csv(["row", "col", "drop"], map.rows, map.cols, &map.drops))?;
            write_json(&out.join("occlusion.json"), &map)?;
            (
                "occlusion",
                serde_json::to_value(&cfg.explain.occlusion),
                vec!["occlusion.pgm", "occlusion_overlay.ppm", "occlusion.csv", "occlusion.json"],
            )
        }
        Method::Lime => {
            let lime = cfg.lime()?;
            if lime.grid == 0 || size % lime.grid != 0 {
                return Err(Error::Config(format!("lime grid {} must divide the {size}-px input", lime.grid)));
            }
            let exp = lime_explain(&proba, &img, target, &lime)?;
            render_heatmap(&exp.weights, exp.grid, exp.grid, &img, &out.join("lime.pgm"), &out.join("lime_overlay.ppm"))?;
            write_file(&out.join("lime.csv"), grid_csv(["row", "col", "weight"], exp.grid, exp.grid, &exp.weights))?;
            write_json(&out.join("lime.json"), &exp)?;
            (
                "lime",
                serde_json::to_value(&cfg.explain.lime),
                vec!["lime.pgm", "lime_overlay.ppm", "lime.csv", "lime.json"],
            )
        }
        Method::Shap => {
            let shap = cfg.shap()?;
            let data = load_dataset(&cfg, size)?;
            let fit = data.part(&data.split.train)?;
            let images: Vec<&Tensor<f32>> = fit.iter().map(|s| &s.image).collect();
            let explainer = EmbeddingShap::fit(&model, &images, &shap)?;
            let a = explainer.explain(&img, target, shap.mode, seed)?;
            write_file(&out.join("shap.csv"), attribution_csv(&a)?)?;
            write_json(&out.join("shap.json"), &a)?;
            ("shap", serde_json::to_value(&cfg.explain.shap), vec!["shap.csv", "shap.json"])
        }
    };
    let manifest = ExplainManifest {
        input_id,
        method: method.to_string(),
        checkpoint_sha256: sha256_file(&args.checkpoint)?,
        seed,
        target,
        hyperparameters: hyperparameters.map_err(|e| Error::Data(format!("json: {e}")))?,
        artifacts: artifacts.into_iter().map(String::from).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("{method} explanation of {} for class {target} in {}", manifest.input_id, out.display());
    Ok(())
}

pub fn features(args: FeaturesArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    let root = cfg
        .data
        .root
        .clone()
        .ok_or_else(|| Error::Config("features needs a dataset directory (--data)".into()))?;
    require_exists([root.as_path()])?;
    let out = cfg.output()?.to_path_buf();
    let index = index_dataset(&root)?;
    let inputs: Vec<FeatureInput> = index
        .entries
        .iter()
        .map(|e| FeatureInput {
            id: e.id.clone(),
            label: e.label,
            image: load_image(&e.path).map_err(|err| err.to_string()),
        })
        .collect();
    let report = features_report_inputs(&inputs, &index.class_names)?;
    let failed = report.rows.iter().filter(|r| r.features.is_err()).count();
    let _lock = OutputLock::acquire(&out)?;
    write_file(&out.join("features.csv"), report.to_csv()?)?;
    println!("{} images profiled, {failed} flagged", report.rows.len());
    Ok(())
}
