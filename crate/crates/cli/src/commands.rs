use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use edgecnn::data::{self, LabeledDataset, Nuisance, SynthConfig};
use edgecnn::evalbench::{self, ReportRow};
use edgecnn::model::{self, Artifact, Checkpoint, Classifier};
use edgecnn::quantize::{self, ConvTarget};
use edgecnn::train::{self, TrainConfig, CONFUSABLE_WEIGHT};
use edgecnn::{Error, Result};

use crate::manifest::{io_err, manifest_path, write_atomic, RunManifest};
use crate::{BenchArgs, EvalArgs, PrepareArgs, PruneArgs, QuantizeArgs, ReportArgs, SynthArgs, TrainArgs};

pub fn prepare(a: PrepareArgs) -> Result<()> {
    if !a.source.is_dir() {
        return Err(io_err(
            &a.source,
            std::io::Error::new(std::io::ErrorKind::NotFound, "source directory not found"),
        ));
    }
    let roots = data::build_size_variants(&a.source, &a.out, &a.sizes)?;
    for r in &roots {
        info!("wrote {}", r.display());
    }
    let m = RunManifest::new("prepare", serde_json::json!({ "sizes": a.sizes }), None).input(&a.source);
    m.write(&a.out.join("prepare.manifest.json"))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.per_class, a.size, a.seed);
    cfg.classes = a.classes;
    if a.no_nuisance {
        cfg.nuisance = Nuisance::none();
    }
    let ds = data::synthesize(&cfg)?;
    ds.write_class_folders(&a.out)?;
    info!("wrote {} images to {}", ds.len(), a.out.display());
    RunManifest::new("synth", &cfg, Some(a.seed)).write(&a.out.join("synth.manifest.json"))
}

/// Settings accepted in a `--config` TOML file; all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    patience: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    hflip_prob: Option<f64>,
    split: Option<f64>,
    confusable_weight: Option<f64>,
    class_weights: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    input_size: usize,
    class_names: &'a [String],
    train: &'a TrainConfig,
    train_examples: usize,
    val_examples: usize,
    resumed_from: Option<&'a Path>,
}

fn resolve_train_config(a: &TrainArgs, class_names: &[String]) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<TrainFile>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let mut cfg = TrainConfig::default();
    cfg.seed = a.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.max_epochs = a.epochs.or(file.epochs).unwrap_or(cfg.max_epochs);
    cfg.batch_size = a.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.patience = a.patience.or(file.patience).unwrap_or(cfg.patience);
    cfg.adam.learning_rate = a.lr.or(file.lr).unwrap_or(cfg.adam.learning_rate);
    cfg.adam.beta1 = file.beta1.unwrap_or(cfg.adam.beta1);
    cfg.adam.beta2 = file.beta2.unwrap_or(cfg.adam.beta2);
    cfg.adam.epsilon = file.epsilon.unwrap_or(cfg.adam.epsilon);
    cfg.hflip_prob = a.hflip_prob.or(file.hflip_prob).unwrap_or(cfg.hflip_prob);
    cfg.split_fraction = a.split.or(file.split).unwrap_or(cfg.split_fraction);
    let explicit = a.class_weights.clone().or(file.class_weights);
    let confusable = a.confusable_weight.or(file.confusable_weight).unwrap_or(CONFUSABLE_WEIGHT);
    cfg.class_weights = Some(match explicit {
        Some(w) => w,
        None => train::gesture_class_weights(class_names, confusable),
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a class-folder set, resizing to `size` when the images differ.
fn load_dataset(path: &Path, size: usize) -> Result<LabeledDataset> {
    let ds = data::scan_class_folders(path)?;
    if ds.extent() == Some((size, size)) {
        return Ok(ds);
    }
    warn!("{}: resizing images to {size}x{size}", path.display());
    Ok(ds.resized(size))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data, a.input_size)?;
    let cfg = resolve_train_config(&a, ds.class_names())?;
    let (train_set, val_set) = train::split_dataset(&ds, cfg.split_fraction, cfg.seed)?;
    info!(
        "{} classes, {} training / {} validation images",
        ds.num_classes(),
        train_set.len(),
        val_set.len()
    );
    let start = match &a.resume {
        Some(p) => model::load_checkpoint(p)?,
        None => Checkpoint::fresh(model::build(a.input_size, ds.num_classes(), cfg.seed)?),
    };
    if start.graph.config().input_size != a.input_size {
        return Err(Error::Config(format!(
            "checkpoint expects {0}x{0} input, --input-size is {1}",
            start.graph.config().input_size,
            a.input_size
        )));
    }
    let (best, history) = train::fit(start, &train_set, &val_set, &cfg)?;
    info!(
        "best epoch {} of {}: val_loss {:.4}",
        history.best_epoch,
        history.epochs.len(),
        best.best_val_loss
    );
    let bytes = model::save_checkpoint(&best, &a.out)?;
    info!("wrote {} ({bytes} bytes)", a.out.display());
    let history_path = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    write_atomic(&history_path, history.to_csv().as_bytes())?;

    let mut m = RunManifest::new(
        "train",
        TrainManifestConfig {
            input_size: a.input_size,
            class_names: ds.class_names(),
            train: &cfg,
            train_examples: train_set.len(),
            val_examples: val_set.len(),
            resumed_from: a.resume.as_deref(),
        },
        Some(cfg.seed),
    )
    .input(&a.data);
    m.output(&a.out)?;
    m.output(&history_path)?;
    m.write(&manifest_path(&a.out))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let ckpt = model::load_checkpoint(&a.model)?;
    let size = ckpt.graph.config().input_size;
    let calib = match &a.calib {
        Some(p) => Some(load_dataset(p, size)?),
        None if a.mode == model::Precision::I8 => {
            return Err(Error::Config(
                "i8 quantization needs a representative set: pass --calib <dir>".into(),
            ))
        }
        None => None,
    };
    let deployed = quantize::quantize_model(&ckpt, a.mode, calib.as_ref())?;
    let bytes = model::save_deployed(&deployed, &a.out)?;
    info!("wrote {} {} ({bytes} bytes)", a.mode, a.out.display());
    let mut m = RunManifest::new(
        "quantize",
        serde_json::json!({ "mode": a.mode, "calib_examples": calib.as_ref().map(|c| c.len()) }),
        None,
    )
    .input(&a.model);
    if let Some(p) = &a.calib {
        m = m.input(p);
    }
    m.output(&a.out)?;
    m.write(&manifest_path(&a.out))
}

fn parse_layer_fraction(s: &str) -> Result<(ConvTarget, f64)> {
    let (layer, frac) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--layer expects <layer>=<fraction>, got '{s}'")))?;
    let frac: f64 = frac
        .parse()
        .map_err(|_| Error::Config(format!("bad prune fraction '{frac}'")))?;
    Ok((layer.parse()?, frac))
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let ckpt = model::load_checkpoint(&a.model)?;
    let targets = a
        .layers
        .iter()
        .map(|s| parse_layer_fraction(s))
        .collect::<Result<Vec<_>>>()?;
    let calib = match &a.calib {
        Some(p) => Some(load_dataset(p, ckpt.graph.config().input_size)?),
        None => None,
    };
    let (pruned, spec) = quantize::prune_channels(&ckpt, &targets, a.ranking, calib.as_ref())?;
    info!(
        "removed {} conv1 / {} conv2 channels: {} -> {} parameters",
        spec.conv1.len(),
        spec.conv2.len(),
        ckpt.param_count(),
        pruned.param_count()
    );
    model::save_checkpoint(&pruned, &a.out)?;
    let mut m = RunManifest::new("prune", &spec, None).input(&a.model);
    m.output(&a.out)?;
    m.write(&manifest_path(&a.out))
}

fn load_classifier(path: &Path) -> Result<(Box<dyn Classifier>, bool)> {
    Ok(match model::load_artifact(path)? {
        Artifact::Checkpoint(c) => (c as Box<dyn Classifier>, false),
        Artifact::Deployed(d) => (d, true),
    })
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, optimized) = load_classifier(&a.model)?;
    let config = *model.graph_config();
    let ds = load_dataset(&a.data, config.input_size)?;
    let result = evalbench::evaluate(model.as_ref(), &ds)?;
    let size = evalbench::measure_size(&a.model)?;
    println!("accuracy {:.5}  loss {:.6}  n {}  size {size}", result.accuracy, result.loss, result.n);
    println!("confusion (rows: true class, columns: predicted)");
    for (name, row) in ds.class_names().iter().zip(&result.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("{name:>10} {}", cells.join(""));
    }
    for (t, p, n) in result.misclassifications().into_iter().take(5) {
        println!("{n} x {} predicted as {}", ds.class_names()[t], ds.class_names()[p]);
    }
    let latency = if a.bench {
        Some(evalbench::bench_latency(model.as_ref(), size, a.iterations, a.warmup, 0)?.summary)
    } else {
        None
    };
    if let Some(out) = &a.out {
        let row = ReportRow {
            image_size: config.input_size,
            optimized,
            loss: result.loss,
            accuracy: result.accuracy,
            model_size: size,
            latency,
        };
        let json = serde_json::to_string_pretty(&serde_json::json!({ "row": row, "eval": result }))
            .expect("eval output serializes");
        write_atomic(out, json.as_bytes())?;
        let mut m = RunManifest::new("eval", serde_json::json!({ "bench": a.bench }), None)
            .input(&a.model)
            .input(&a.data);
        m.output(out)?;
        m.write(&manifest_path(out))?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (model, _) = load_classifier(&a.model)?;
    let size = evalbench::measure_size(&a.model)?;
    let r = evalbench::bench_latency(model.as_ref(), size, a.iterations, a.warmup, a.seed)?;
    println!(
        "size {size} bytes  mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms  ({} runs)",
        r.summary.mean_ms,
        r.summary.p50_ms,
        r.summary.p95_ms,
        r.samples_ms.len()
    );
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&r).expect("bench result serializes");
        write_atomic(out, json.as_bytes())?;
    }
    Ok(())
}

fn collect_rows(dir: &Path, rows: &mut Vec<ReportRow>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_rows(&p, rows)?;
        } else if p.to_string_lossy().ends_with(".row.json") {
            #[derive(Deserialize)]
            struct RowFile {
                row: ReportRow,
            }
            let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            let f: RowFile = serde_json::from_str(&text)
                .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            rows.push(f.row);
        }
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    collect_rows(&a.runs, &mut rows)?;
    if rows.is_empty() {
        return Err(Error::Input(format!("no *.row.json files under {}", a.runs.display())));
    }
    rows.sort_by_key(|r| (r.image_size, r.optimized));
    let written = evalbench::report(&rows, &a.out)?;
    print!("{}", evalbench::rows_to_csv(&rows)?);
    info!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}
