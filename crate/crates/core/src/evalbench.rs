//! Accuracy, loss and confusion on a labelled set; artifact sizes;
//! inference latency; and the size/accuracy report tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::model::Classifier;
use crate::tensor::Tensor;
use crate::train::{argmax, image_batch, LOG_CLAMP};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Unweighted mean cross-entropy.
    pub loss: f64,
    pub n: usize,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalResult {
    /// Off-diagonal cells as `(true, predicted, count)`, largest first.
    pub fn misclassifications(&self) -> Vec<(usize, usize, u64)> {
        let mut out: Vec<_> = self
            .confusion
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(p, &n)| (t, p, n)))
            .filter(|&(t, p, n)| t != p && n > 0)
            .collect();
        out.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        out
    }
}

const EVAL_BATCH: usize = 32;

pub fn evaluate(model: &dyn Classifier, ds: &LabeledDataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let s = model.graph_config().input_size;
    if ds.extent() != Some((s, s)) {
        return Err(Error::input(format!("evaluation images must all be {s}x{s}")));
    }
    let c = model.graph_config().num_classes;
    if ds.num_classes() != c {
        return Err(Error::input(format!(
            "dataset has {} classes, model has {c}",
            ds.num_classes()
        )));
    }
    let mut confusion = vec![vec![0u64; c]; c];
    let mut loss = 0.0f64;
    for chunk in ds.items().chunks(EVAL_BATCH) {
        let x = image_batch(chunk.iter().map(|(img, _)| img))?;
        let probs = model.predict_batch(&x)?;
        for (row, (_, y)) in probs.data().chunks_exact(c).zip(chunk) {
            loss -= (row[*y] as f64).max(LOG_CLAMP).ln();
            confusion[*y][argmax(row)] += 1;
        }
    }
    let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
    Ok(EvalResult {
        accuracy: correct as f64 / ds.len() as f64,
        loss: loss / ds.len() as f64,
        n: ds.len(),
        confusion,
    })
}

/// Exact on-disk length of an artifact.
pub fn measure_size(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    fs::metadata(path).map(|m| m.len()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencySummary {
    /// Mean and nearest-rank percentiles of `samples`.
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Some(LatencySummary {
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub size_bytes: u64,
    pub warmup: usize,
    /// Wall time of each timed single-image inference, milliseconds.
    pub samples_ms: Vec<f64>,
    pub summary: LatencySummary,
}

pub const MIN_ITERATIONS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Times single-image inference on a fixed random input drawn from `seed`.
/// `size_bytes` is carried through for reporting.
pub fn bench_latency(
    model: &dyn Classifier,
    size_bytes: u64,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchResult> {
    if iterations < MIN_ITERATIONS || warmup < MIN_WARMUP {
        return Err(Error::config(format!(
            "latency benchmark needs at least {MIN_ITERATIONS} iterations after {MIN_WARMUP} warm-up calls"
        )));
    }
    let s = model.graph_config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new_inclusive(0.0f32, 1.0).expect("valid range");
    let data = (0..s * s * 3).map(|_| u.sample(&mut rng)).collect();
    let image = Tensor::from_vec([s, s, 3], data)?;
    for _ in 0..warmup {
        model.infer(&image)?;
    }
    let mut samples_ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        let out = model.infer(&image)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let summary = LatencySummary::of(&samples_ms).expect("at least one sample");
    Ok(BenchResult {
        size_bytes,
        warmup,
        samples_ms,
        summary,
    })
}

/// One line of the size/accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_size: usize,
    pub optimized: bool,
    pub loss: f64,
    pub accuracy: f64,
    pub model_size: u64,
    #[serde(default)]
    pub latency: Option<LatencySummary>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "Image Size",
    "Optimized",
    "Loss",
    "Accuracy",
    "Model Size",
    "Latency Mean (ms)",
    "Latency p50 (ms)",
    "Latency p95 (ms)",
];

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let lat = |f: fn(&LatencySummary) -> f64| r.latency.as_ref().map(|l| f(l).to_string()).unwrap_or_default();
        w.write_record([
            format!("{0} x {0}", r.image_size),
            if r.optimized { "Yes" } else { "No" }.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.model_size.to_string(),
            lat(|l| l.mean_ms),
            lat(|l| l.p50_ms),
            lat(|l| l.p95_ms),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn rows_to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("report rows serialize")
}

pub fn rows_from_json(json: &str) -> Result<Vec<ReportRow>> {
    serde_json::from_str(json).map_err(|e| Error::input(format!("report JSON: {e}")))
}

/// Plot series: metric name and value accessor.
type Metric = (&'static str, fn(&ReportRow) -> Option<f64>);

const PLOT_METRICS: [Metric; 4] = [
    ("loss", |r| Some(r.loss)),
    ("accuracy", |r| Some(r.accuracy)),
    ("model_size", |r| Some(r.model_size as f64)),
    ("latency_mean_ms", |r| r.latency.map(|l| l.mean_ms)),
];

/// Writes `report.csv`, `report.json` and, per metric and optimization
/// state, a two-column `image_size<TAB>value` file such as
/// `accuracy_optimized.tsv`. Returns the written paths.
pub fn report(rows: &[ReportRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::input("report needs at least one row"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put("report.csv".into(), rows_to_csv(rows)?)?;
    put("report.json".into(), rows_to_json(rows))?;
    for (metric, value) in PLOT_METRICS {
        for (optimized, series) in [(false, "not_optimized"), (true, "optimized")] {
            let mut points: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.optimized == optimized)
                .filter_map(|r| value(r).map(|v| (r.image_size, v)))
                .collect();
            if points.is_empty() {
                continue;
            }
            points.sort_by_key(|p| p.0);
            let mut body = format!("image_size\t{metric}\n");
            for (x, y) in points {
                body.push_str(&format!("{x}\t{y}\n"));
            }
            put(format!("{metric}_{series}.tsv"), body)?;
        }
    }
    Ok(written)
}
