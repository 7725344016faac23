//! Experiment grids: manifests, parallel execution, report rows,
//! per-cell aggregation, model selection and plot data.
//!
//! A manifest is flat `key = value` text. The same format serves as the
//! CLI config file, so a written manifest can be fed straight back in.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::datagen::{generate, GenConfig};
use crate::error::{Error, Result};
use crate::graph::{Part, ReviewGraph};
use crate::io::read_graph;
use crate::metrics::MetricsReport;
use crate::train::{
    evaluate_part, score, train, AprimeSource, DetectorVariant, Problem, TrainedModels, TrainingConfig,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SELECTION_FILE: &str = "selection.csv";

/// Report columns, in order.
pub const REPORT_COLUMNS: [&str; 17] = [
    "run_id",
    "dataset",
    "p",
    "detector_variant",
    "aprime_source",
    "seed",
    "k",
    "rho",
    "alpha",
    "lambda",
    "ndcg_all",
    "ndcg_protected",
    "ndcg_favored",
    "delta_ndcg",
    "afrr_mixed",
    "afrr_pure",
    "auc_aprime",
];

const METRIC_COLUMNS: [&str; 7] = [
    "ndcg_all",
    "ndcg_protected",
    "ndcg_favored",
    "delta_ndcg",
    "afrr_mixed",
    "afrr_pure",
    "auc_aprime",
];

/// Order of increasing `A'` quality.
pub const NOISE_ORDER: [AprimeSource; 5] = [
    AprimeSource::Wo,
    AprimeSource::Random,
    AprimeSource::Pretrained,
    AprimeSource::Joint,
    AprimeSource::Gt,
];

/// Parses flat `key = value` text. Blank lines and `#` comments are
/// skipped; later keys override earlier ones.
pub fn parse_key_values(text: &str, file: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: file.to_string(),
            line: k + 1,
            message: format!("expected key = value, found {line:?}"),
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad value {s:?} for {key}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Where the review graph comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generated { preset: String, config: GenConfig },
    Directory(PathBuf),
}

impl DataSource {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(DataSource::Generated {
            preset: name.to_string(),
            config: GenConfig::preset(name)?,
        })
    }

    /// Label used in the `dataset` column.
    pub fn name(&self) -> String {
        match self {
            DataSource::Generated { preset, .. } => preset.clone(),
            DataSource::Directory(dir) => dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
        }
    }

    pub fn load(&self) -> Result<ReviewGraph> {
        match self {
            DataSource::Generated { config, .. } => Ok(generate(config)?.graph),
            DataSource::Directory(dir) => read_graph(dir),
        }
    }
}

/// Grid axes; cells are their cartesian product in the listed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub p: Vec<u32>,
    pub detectors: Vec<DetectorVariant>,
    pub sources: Vec<AprimeSource>,
    pub k: Vec<usize>,
    pub rho: Vec<f64>,
}

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub p: u32,
    pub detector: DetectorVariant,
    pub source: AprimeSource,
    pub k: usize,
    pub rho: f64,
}

impl Grid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &p in &self.p {
            for &detector in &self.detectors {
                for &source in &self.sources {
                    for &k in &self.k {
                        for &rho in &self.rho {
                            out.push(Cell { p, detector, source, k, rho });
                        }
                    }
                }
            }
        }
        out
    }

    fn sweeps(&self) -> bool {
        self.p.len() > 1 || self.k.len() > 1 || self.rho.len() > 1
    }
}

/// Full description of an experiment; results are a function of it alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub grid: Grid,
    /// Settings shared by every cell; its grid-controlled fields are
    /// overwritten per cell.
    pub training: TrainingConfig,
    pub out: PathBuf,
    /// Parallel runs; does not affect results.
    pub jobs: usize,
}

impl RunManifest {
    /// Builds a manifest from flat settings; absent keys take defaults.
    ///
    /// Seeds come from `seed_list`, or else `seeds` consecutive values
    /// starting at `seed`. `prune = on,off` expands `rho` with 0.
    pub fn from_settings(settings: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = settings.clone();
        let data = match s.remove("data").as_deref() {
            None => DataSource::preset("default")?,
            Some(v) => match v.split_once(':') {
                Some(("gen", preset)) => DataSource::preset(preset.trim())?,
                Some(("dir", path)) => DataSource::Directory(PathBuf::from(path.trim())),
                _ => return Err(Error::Config(format!("data must be gen:PRESET or dir:PATH, got {v:?}"))),
            },
        };
        let data = match data {
            DataSource::Generated { preset, mut config } => {
                let gen_keys: Vec<String> = s.keys().filter(|k| k.starts_with("gen.")).cloned().collect();
                for key in gen_keys {
                    let value = s.remove(&key).expect("key listed");
                    config.set(&key["gen.".len()..], &value)?;
                }
                DataSource::Generated { preset, config }
            }
            dir => dir,
        };
        let seeds = match (s.remove("seed_list"), s.remove("seeds"), s.remove("seed")) {
            (Some(list), _, _) => parse_list("seed_list", &list)?,
            (None, count, first) => {
                let count: u64 = count.map_or(Ok(1), |c| parse_one("seeds", &c))?;
                let first: u64 = first.map_or(Ok(0), |f| parse_one("seed", &f))?;
                if count == 0 {
                    return Err(Error::Config("seeds must be positive".into()));
                }
                (first..first + count).collect()
            }
        };
        let defaults = TrainingConfig::default();
        let mut take = |key: &str, default: String| s.remove(key).unwrap_or(default);
        let p = parse_list("p", &take("p", defaults.percentile.to_string()))?;
        let detectors = parse_list("detector", &take("detector", defaults.variant.to_string()))?;
        let sources = parse_list("aprime", &take("aprime", defaults.aprime.to_string()))?;
        let k = parse_list("k", &take("k", defaults.copies.to_string()))?;
        let base_rho: Vec<f64> = parse_list("rho", &take("rho", defaults.rho.to_string()))?;
        let mut rho = Vec::new();
        for mode in take("prune", "on".into()).split(',').map(str::trim) {
            let values: Vec<f64> = match mode {
                "on" => base_rho.clone(),
                "off" => vec![0.0],
                other => return Err(Error::Config(format!("prune must be on or off, got {other:?}"))),
            };
            for v in values {
                if !rho.contains(&v) {
                    rho.push(v);
                }
            }
        }
        let mixup_count = match take("mixup_count", "auto".into()).as_str() {
            "auto" => None,
            v => Some(parse_one("mixup_count", v)?),
        };
        let training = TrainingConfig {
            epochs: parse_one("epochs", &take("epochs", defaults.epochs.to_string()))?,
            lambda: parse_one("lambda", &take("lambda", defaults.lambda.to_string()))?,
            lr_detector: parse_one("lr_detector", &take("lr_detector", defaults.lr_detector.to_string()))?,
            lr_inferencer: parse_one("lr_inferencer", &take("lr_inferencer", defaults.lr_inferencer.to_string()))?,
            weight_decay: parse_one("weight_decay", &take("weight_decay", defaults.weight_decay.to_string()))?,
            alpha: parse_one("alpha", &take("alpha", defaults.alpha.to_string()))?,
            hidden: parse_list("hidden", &take("hidden", join(&defaults.hidden)))?,
            optimizer: parse_one("optimizer", &take("optimizer", defaults.optimizer.to_string()))?,
            couple: parse_one("couple", &take("couple", defaults.couple.to_string()))?,
            mixup_count,
            ..defaults
        };
        let out = PathBuf::from(take("out", "results".into()));
        let jobs: usize = parse_one("jobs", &take("jobs", "1".into()))?;
        if let Some(key) = s.keys().next() {
            return Err(Error::Config(format!("unknown setting {key:?}")));
        }
        let manifest = RunManifest {
            data,
            seeds,
            grid: Grid { p, detectors, sources, k, rho },
            training,
            out,
            jobs: jobs.max(1),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_settings(&parse_key_values(text, MANIFEST_FILE)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_settings(&parse_key_values(&text, &path.display().to_string())?)
    }

    fn validate(&self) -> Result<()> {
        for cell in self.grid.cells() {
            self.cell_config(&cell, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// Resolved settings; `from_text` of this reproduces the manifest.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        match &self.data {
            DataSource::Generated { preset, config } => {
                line("data", format!("gen:{preset}"));
                for (k, v) in config.to_pairs() {
                    line(&format!("gen.{k}"), v);
                }
            }
            DataSource::Directory(dir) => line("data", format!("dir:{}", dir.display())),
        }
        let t = &self.training;
        line("seed_list", join(&self.seeds));
        line("p", join(&self.grid.p));
        line("detector", join(&self.grid.detectors));
        line("aprime", join(&self.grid.sources));
        line("k", join(&self.grid.k));
        line("rho", join(&self.grid.rho));
        line("alpha", t.alpha.to_string());
        line("lambda", t.lambda.to_string());
        line("epochs", t.epochs.to_string());
        line("lr_detector", t.lr_detector.to_string());
        line("lr_inferencer", t.lr_inferencer.to_string());
        line("weight_decay", t.weight_decay.to_string());
        line("hidden", join(&t.hidden));
        line("optimizer", t.optimizer.to_string());
        line("couple", t.couple.to_string());
        line("mixup_count", t.mixup_count.map_or("auto".to_string(), |c| c.to_string()));
        line("out", self.out.display().to_string());
        line("jobs", self.jobs.to_string());
        out
    }

    pub fn cell_config(&self, cell: &Cell, seed: u64) -> TrainingConfig {
        TrainingConfig {
            percentile: cell.p,
            variant: cell.detector,
            aprime: cell.source,
            copies: cell.k,
            rho: cell.rho,
            seed,
            ..self.training.clone()
        }
    }
}

/// One report row: a cell, a seed, and test metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub dataset: String,
    pub cell: Cell,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
    pub test: MetricsReport,
    /// Validation metrics, when the validation split supports them.
    pub valid: Option<MetricsReport>,
}

fn cell_id(dataset: &str, c: &Cell) -> String {
    format!("{dataset}-p{}-{}-{}-k{}-rho{}", c.p, c.detector, c.source, c.k, c.rho)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn metric_values(m: &MetricsReport) -> [Option<f64>; 7] {
    [
        Some(m.ndcg_all),
        Some(m.ndcg_protected),
        Some(m.ndcg_favored),
        Some(m.delta_ndcg),
        m.afrr_mixed,
        m.afrr_pure,
        m.auc_aprime,
    ]
}

impl ReportRow {
    pub fn fields(&self) -> Vec<String> {
        let c = &self.cell;
        let mut out = vec![
            self.run_id.clone(),
            self.dataset.clone(),
            c.p.to_string(),
            c.detector.to_string(),
            c.source.to_string(),
            self.seed.to_string(),
            c.k.to_string(),
            c.rho.to_string(),
            self.alpha.to_string(),
            self.lambda.to_string(),
        ];
        out.extend(metric_values(&self.test).iter().map(|&v| fmt_opt(v)));
        out
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `results.csv` contents.
pub fn results_csv(rows: &[ReportRow]) -> Result<String> {
    csv_text(&REPORT_COLUMNS, rows.iter().map(ReportRow::fields))
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Per-cell summary over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub cell_id: String,
    pub dataset: String,
    pub cell: Cell,
    pub runs: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// `(mean, std)` per metric column; absent when no run had a value.
    pub stats: [Option<(f64, f64)>; 7],
}

impl AggregateRow {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let i = METRIC_COLUMNS.iter().position(|&m| m == metric)?;
        self.stats[i].map(|s| s.0)
    }
}

/// Groups rows by cell, keeping first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&ReportRow>> = HashMap::new();
    for r in rows {
        let id = cell_id(&r.dataset, &r.cell);
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let members = &groups[&id];
            let first = members[0];
            let stats = std::array::from_fn(|i| {
                let values: Vec<f64> = members.iter().filter_map(|r| metric_values(&r.test)[i]).collect();
                mean_std(&values)
            });
            AggregateRow {
                cell_id: id.clone(),
                dataset: first.dataset.clone(),
                cell: first.cell,
                runs: members.len(),
                alpha: first.alpha,
                lambda: first.lambda,
                stats,
            }
        })
        .collect()
}

/// `aggregate.csv` contents: each metric as `_mean` and `_std` columns.
pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut header: Vec<String> = [
        "run_id",
        "dataset",
        "p",
        "detector_variant",
        "aprime_source",
        "runs",
        "k",
        "rho",
        "alpha",
        "lambda",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for m in METRIC_COLUMNS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_text(
        &header,
        rows.iter().map(|a| {
            let c = &a.cell;
            let mut out = vec![
                a.cell_id.clone(),
                a.dataset.clone(),
                c.p.to_string(),
                c.detector.to_string(),
                c.source.to_string(),
                a.runs.to_string(),
                c.k.to_string(),
                c.rho.to_string(),
                a.alpha.to_string(),
                a.lambda.to_string(),
            ];
            for s in a.stats {
                out.push(fmt_opt(s.map(|s| s.0)));
                out.push(fmt_opt(s.map(|s| s.1)));
            }
            out
        }),
    )
}

/// Chosen sweep cell per (dataset, detector, source): lowest mean
/// validation gap, ties broken by higher validation NDCG.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub dataset: String,
    pub detector: DetectorVariant,
    pub source: AprimeSource,
    pub p: u32,
    pub k: usize,
    pub rho: f64,
    pub valid_delta_ndcg: f64,
    pub valid_ndcg_all: f64,
    pub test_delta_ndcg: f64,
}

pub fn select_cells(rows: &[ReportRow]) -> Vec<Selection> {
    let mut out: Vec<Selection> = Vec::new();
    for agg in aggregate(rows) {
        let members: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.dataset == agg.dataset && r.cell == agg.cell)
            .collect();
        let valid: Vec<&MetricsReport> = members.iter().filter_map(|r| r.valid.as_ref()).collect();
        if valid.is_empty() {
            continue;
        }
        let n = valid.len() as f64;
        let candidate = Selection {
            dataset: agg.dataset.clone(),
            detector: agg.cell.detector,
            source: agg.cell.source,
            p: agg.cell.p,
            k: agg.cell.k,
            rho: agg.cell.rho,
            valid_delta_ndcg: valid.iter().map(|v| v.delta_ndcg).sum::<f64>() / n,
            valid_ndcg_all: valid.iter().map(|v| v.ndcg_all).sum::<f64>() / n,
            test_delta_ndcg: agg.mean("delta_ndcg").unwrap_or(f64::NAN),
        };
        match out
            .iter_mut()
            .find(|s| s.dataset == candidate.dataset && s.detector == candidate.detector && s.source == candidate.source)
        {
            None => out.push(candidate),
            Some(best) => {
                let better = candidate
                    .valid_delta_ndcg
                    .total_cmp(&best.valid_delta_ndcg)
                    .then(best.valid_ndcg_all.total_cmp(&candidate.valid_ndcg_all))
                    .is_lt();
                if better {
                    *best = candidate;
                }
            }
        }
    }
    out
}

pub fn selection_csv(rows: &[Selection]) -> Result<String> {
    csv_text(
        &[
            "dataset",
            "detector_variant",
            "aprime_source",
            "p",
            "k",
            "rho",
            "valid_delta_ndcg",
            "valid_ndcg_all",
            "test_delta_ndcg",
        ],
        rows.iter().map(|s| {
            vec![
                s.dataset.clone(),
                s.detector.to_string(),
                s.source.to_string(),
                s.p.to_string(),
                s.k.to_string(),
                s.rho.to_string(),
                s.valid_delta_ndcg.to_string(),
                s.valid_ndcg_all.to_string(),
                s.test_delta_ndcg.to_string(),
            ]
        }),
    )
}

/// Trains and evaluates one (cell, seed).
pub fn run_one(g: &ReviewGraph, cfg: &TrainingConfig) -> Result<(MetricsReport, Option<MetricsReport>, Problem, TrainedModels)> {
    let problem = Problem::new(g, cfg)?;
    let models = train(&problem, cfg)?;
    let eval = score(&problem, cfg, &models)?;
    let test = evaluate_part(&problem, &eval, Part::Test)?;
    let valid = evaluate_part(&problem, &eval, Part::Valid).ok();
    Ok((test, valid, problem, models))
}

fn write_artifacts(dir: &Path, problem: &Problem, models: &TrainedModels) -> Result<()> {
    fs::create_dir_all(dir)?;
    models.detector.save(&dir.join("detector.ckpt"))?;
    if let Some(theta) = &models.inferencer {
        theta.save(&dir.join("inferencer.ckpt"))?;
    }
    let mut replicas = String::from("replica_user\toriginal_user\n");
    for (r, o) in problem.view().replica_users() {
        writeln!(replicas, "{}\t{}", r.0, o.0).unwrap();
    }
    fs::write(dir.join("replicas.tsv"), replicas)?;
    let mut history = String::from("epoch\tdetector\tdetection\tfairness\tinferencer\n");
    for (e, h) in models.history.iter().enumerate() {
        writeln!(
            history,
            "{e}\t{}\t{}\t{}\t{}",
            h.detector,
            h.detection,
            h.fairness,
            fmt_opt(h.inferencer)
        )
        .unwrap();
    }
    fs::write(dir.join("history.tsv"), history)?;
    Ok(())
}

/// Runs every (cell, seed) of `manifest` on at most `manifest.jobs`
/// threads. Rows come back in grid order, seeds innermost.
pub fn execute(manifest: &RunManifest, artifacts: Option<&Path>) -> Result<Vec<ReportRow>> {
    let g = manifest.data.load()?;
    let dataset = manifest.data.name();
    let tasks: Vec<(Cell, u64)> = manifest
        .grid
        .cells()
        .into_iter()
        .flat_map(|c| manifest.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<ReportRow>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(cell, seed)| {
                let cfg = manifest.cell_config(&cell, seed);
                let run_id = format!("{}-s{seed}", cell_id(&dataset, &cell));
                let (test, valid, problem, models) = run_one(&g, &cfg)?;
                if let Some(root) = artifacts {
                    write_artifacts(&root.join("runs").join(&run_id), &problem, &models)?;
                }
                Ok(ReportRow {
                    run_id,
                    dataset: dataset.clone(),
                    cell,
                    seed,
                    alpha: cfg.alpha,
                    lambda: cfg.lambda,
                    test,
                    valid,
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Executes `manifest` and writes manifest, results, aggregates and, for
/// sweeps, the selected cells into `manifest.out`.
pub fn run_and_write(manifest: &RunManifest) -> Result<(Vec<ReportRow>, Vec<AggregateRow>)> {
    let out = &manifest.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    let rows = execute(manifest, Some(out))?;
    let agg = aggregate(&rows);
    fs::write(out.join(RESULTS_FILE), results_csv(&rows)?)?;
    fs::write(out.join(AGGREGATE_FILE), aggregate_csv(&agg)?)?;
    if manifest.grid.sweeps() {
        fs::write(out.join(SELECTION_FILE), selection_csv(&select_cells(&rows))?)?;
    }
    Ok((rows, agg))
}

/// Plot-data analyses over a results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    /// Joint minus Pre-trained AUC against Pre-trained minus Joint gap,
    /// per paired run.
    AucVsDelta,
    /// Mean gap per `A'` source.
    NoiseCurve,
    /// Mean AUC and gap per replication count and pruning setting.
    Sensitivity,
}

impl FromStr for Analysis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc_vs_delta" => Ok(Analysis::AucVsDelta),
            "noise_curve" => Ok(Analysis::NoiseCurve),
            "sensitivity" => Ok(Analysis::Sensitivity),
            _ => Err(Error::Config(format!(
                "unknown analysis {s:?}; expected auc_vs_delta, noise_curve or sensitivity"
            ))),
        }
    }
}

impl Analysis {
    fn required(self) -> &'static [&'static str] {
        match self {
            Analysis::AucVsDelta => &[
                "dataset",
                "p",
                "detector_variant",
                "aprime_source",
                "seed",
                "k",
                "rho",
                "delta_ndcg",
                "auc_aprime",
            ],
            Analysis::NoiseCurve => &["dataset", "detector_variant", "aprime_source", "delta_ndcg"],
            Analysis::Sensitivity => &["dataset", "aprime_source", "k", "rho", "delta_ndcg", "auc_aprime"],
        }
    }

    fn header(self) -> &'static [&'static str] {
        match self {
            Analysis::AucVsDelta => &[
                "dataset",
                "p",
                "detector_variant",
                "k",
                "rho",
                "seed",
                "auc_joint",
                "auc_pretrained",
                "auc_gap",
                "delta_joint",
                "delta_pretrained",
                "delta_gap",
            ],
            Analysis::NoiseCurve => &[
                "dataset",
                "detector_variant",
                "aprime_source",
                "runs",
                "mean_delta_ndcg",
                "std_delta_ndcg",
            ],
            Analysis::Sensitivity => &[
                "dataset",
                "aprime_source",
                "k",
                "rho",
                "prune",
                "runs",
                "mean_auc_aprime",
                "mean_delta_ndcg",
            ],
        }
    }
}

fn number(field: &str) -> Option<f64> {
    field.trim().parse().ok().filter(|v: &f64| v.is_finite())
}

/// Tidy CSV for one analysis of a results table.
pub fn emit_plotdata(csv_input: &str, analysis: Analysis) -> Result<String> {
    let mut reader = csv::Reader::from_reader(csv_input.as_bytes());
    let headers = reader.headers()?.clone();
    let missing: Vec<String> = analysis
        .required()
        .iter()
        .filter(|&&c| !headers.iter().any(|h| h == c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() && !(headers.is_empty() && csv_input.trim().is_empty()) {
        return Err(Error::MissingColumns(missing));
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut records = Vec::new();
    for r in reader.records() {
        records.push(r?);
    }
    let get = |r: &csv::StringRecord, name: &str| col(name).and_then(|i| r.get(i)).unwrap_or("").to_string();
    let rows: Vec<Vec<String>> = match analysis {
        Analysis::AucVsDelta => {
            let key = |r: &csv::StringRecord| {
                ["dataset", "p", "detector_variant", "k", "rho", "seed"].map(|c| get(r, c))
            };
            let mut pre: HashMap<[String; 6], &csv::StringRecord> = HashMap::new();
            for r in &records {
                if get(r, "aprime_source") == AprimeSource::Pretrained.name() {
                    pre.insert(key(r), r);
                }
            }
            records
                .iter()
                .filter(|r| get(r, "aprime_source") == AprimeSource::Joint.name())
                .filter_map(|j| {
                    let k = key(j);
                    let p = pre.get(&k)?;
                    let (aj, ap) = (number(&get(j, "auc_aprime")), number(&get(p, "auc_aprime")));
                    let (dj, dp) = (number(&get(j, "delta_ndcg")), number(&get(p, "delta_ndcg")));
                    let gap = |a: Option<f64>, b: Option<f64>| fmt_opt(a.zip(b).map(|(a, b)| a - b));
                    let mut row = k.to_vec();
                    row.extend([
                        fmt_opt(aj),
                        fmt_opt(ap),
                        gap(aj, ap),
                        fmt_opt(dj),
                        fmt_opt(dp),
                        gap(dp, dj),
                    ]);
                    Some(row)
                })
                .collect()
        }
        Analysis::NoiseCurve => {
            let mut order: Vec<[String; 3]> = Vec::new();
            let mut values: HashMap<[String; 3], Vec<f64>> = HashMap::new();
            for r in &records {
                let k = [get(r, "dataset"), get(r, "detector_variant"), get(r, "aprime_source")];
                if !values.contains_key(&k) {
                    order.push(k.clone());
                }
                values.entry(k).or_default().extend(number(&get(r, "delta_ndcg")));
            }
            let rank = |s: &str| {
                NOISE_ORDER
                    .iter()
                    .position(|a| a.name() == s)
                    .unwrap_or(NOISE_ORDER.len())
            };
            order.sort_by(|a, b| (&a[0], &a[1], rank(&a[2])).cmp(&(&b[0], &b[1], rank(&b[2]))));
            order
                .into_iter()
                .map(|k| {
                    let v = &values[&k];
                    let stats = mean_std(v);
                    let mut row = k.to_vec();
                    row.extend([
                        v.len().to_string(),
                        fmt_opt(stats.map(|s| s.0)),
                        fmt_opt(stats.map(|s| s.1)),
                    ]);
                    row
                })
                .collect()
        }
        Analysis::Sensitivity => {
            let mut order: Vec<[String; 4]> = Vec::new();
            let mut values: HashMap<[String; 4], (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
            for r in &records {
                let k = [get(r, "dataset"), get(r, "aprime_source"), get(r, "k"), get(r, "rho")];
                if !values.contains_key(&k) {
                    order.push(k.clone());
                }
                let e = values.entry(k).or_default();
                e.0.extend(number(&get(r, "auc_aprime")));
                e.1.extend(number(&get(r, "delta_ndcg")));
                e.2 += 1;
            }
            order
                .into_iter()
                .map(|k| {
                    let (auc, delta, n) = &values[&k];
                    let prune = if number(&k[3]).unwrap_or(0.0) > 0.0 { "on" } else { "off" };
                    let mut row = k.to_vec();
                    row.extend([
                        prune.to_string(),
                        n.to_string(),
                        fmt_opt(mean_std(auc).map(|s| s.0)),
                        fmt_opt(mean_std(delta).map(|s| s.0)),
                    ]);
                    row
                })
                .collect()
        }
    };
    csv_text(analysis.header(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn key_value_parsing() {
        let m = parse_key_values("# c\n a = 1 \n\nb=x,y\na=2\n", "cfg").unwrap();
        assert_eq!(m["a"], "2");
        assert_eq!(m["b"], "x,y");
        assert!(matches!(
            parse_key_values("a = 1\nnonsense\n", "cfg"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest::from_settings(&settings(&[
            ("data", "gen:small"),
            ("gen.sigma", "0.25"),
            ("seeds", "3"),
            ("seed", "5"),
            ("aprime", "wo,joint"),
            ("k", "0,50"),
            ("prune", "on,off"),
            ("epochs", "7"),
        ]))
        .unwrap();
        assert_eq!(m.seeds, vec![5, 6, 7]);
        assert_eq!(m.grid.rho, vec![0.5, 0.0]);
        assert_eq!(m.grid.cells().len(), 2 * 2 * 2);
        match &m.data {
            DataSource::Generated { config, .. } => assert_eq!(config.sigma, 0.25),
            other => panic!("{other:?}"),
        }
        let back = RunManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), m.to_text());
    }

    #[test]
    fn bad_settings_are_rejected() {
        assert!(RunManifest::from_settings(&settings(&[("colour", "red")])).is_err());
        assert!(RunManifest::from_settings(&settings(&[("aprime", "oracle")])).is_err());
        assert!(RunManifest::from_settings(&settings(&[("rho", "1.5")])).is_err());
        assert!(RunManifest::from_settings(&settings(&[("prune", "maybe")])).is_err());
        assert!(RunManifest::from_settings(&settings(&[("data", "ftp:x")])).is_err());
    }

    #[test]
    fn std_of_one_value_is_zero() {
        assert_eq!(mean_std(&[0.3]), Some((0.3, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[]), None);
    }

    fn row(source: AprimeSource, seed: u64, delta: f64, auc: Option<f64>, k: usize, rho: f64) -> ReportRow {
        let cell = Cell {
            p: 20,
            detector: DetectorVariant::GnnS1Tr,
            source,
            k,
            rho,
        };
        let m = MetricsReport {
            ndcg_all: 0.9,
            ndcg_protected: 0.95,
            ndcg_favored: 0.95 - delta,
            delta_ndcg: delta,
            afrr_mixed: None,
            afrr_pure: Some(0.1),
            auc_aprime: auc,
        };
        ReportRow {
            run_id: format!("{}-s{seed}", cell_id("toy", &cell)),
            dataset: "toy".into(),
            cell,
            seed,
            alpha: 0.8,
            lambda: 5.0,
            test: m.clone(),
            valid: Some(m),
        }
    }

    #[test]
    fn results_and_aggregates_have_fixed_layout() {
        let rows = vec![
            row(AprimeSource::Joint, 0, 0.1, Some(0.7), 50, 0.5),
            row(AprimeSource::Joint, 1, 0.3, Some(0.9), 50, 0.5),
        ];
        let text = results_csv(&rows).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "toy-p20-gnn-s1tr-joint-k50-rho0.5-s0,toy,20,gnn-s1tr,joint,0,50,0.5,0.8,5,0.9,0.95,0.85,0.1,,0.1,0.7"
        );
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].runs, 2);
        assert!((agg[0].mean("delta_ndcg").unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(agg[0].stats[4], None);
        let text = aggregate_csv(&agg).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn selection_prefers_lower_validation_gap() {
        let rows = vec![
            row(AprimeSource::Joint, 0, 0.3, None, 0, 0.5),
            row(AprimeSource::Joint, 0, 0.1, None, 50, 0.5),
            row(AprimeSource::Joint, 0, 0.2, None, 100, 0.5),
        ];
        let sel = select_cells(&rows);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].k, 50);
    }

    #[test]
    fn plotdata_pairs_joint_with_pretrained() {
        let rows = vec![
            row(AprimeSource::Joint, 0, 0.10, Some(0.8), 50, 0.5),
            row(AprimeSource::Pretrained, 0, 0.15, Some(0.7), 50, 0.5),
            row(AprimeSource::Joint, 1, 0.20, Some(0.6), 50, 0.5),
        ];
        let out = emit_plotdata(&results_csv(&rows).unwrap(), Analysis::AucVsDelta).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        let f: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&f[..6], ["toy", "20", "gnn-s1tr", "50", "0.5", "0"]);
        assert!((f[8].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
        assert!((f[11].parse::<f64>().unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn noise_curve_orders_sources_by_quality() {
        let rows = vec![
            row(AprimeSource::Gt, 0, 0.1, None, 50, 0.5),
            row(AprimeSource::Wo, 0, 0.3, None, 50, 0.5),
            row(AprimeSource::Joint, 0, 0.2, None, 50, 0.5),
            row(AprimeSource::Joint, 1, 0.4, None, 50, 0.5),
        ];
        let out = emit_plotdata(&results_csv(&rows).unwrap(), Analysis::NoiseCurve).unwrap();
        let sources: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(sources, ["wo", "joint", "gt"]);
        assert!(out.lines().nth(2).unwrap().contains(",2,0.30000000000000004,"));
    }

    #[test]
    fn sensitivity_marks_pruning() {
        let rows = vec![
            row(AprimeSource::Joint, 0, 0.1, Some(0.6), 50, 0.5),
            row(AprimeSource::Joint, 0, 0.1, Some(0.8), 50, 0.0),
        ];
        let out = emit_plotdata(&results_csv(&rows).unwrap(), Analysis::Sensitivity).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[1], "toy,joint,50,0.5,on,1,0.6,0.1");
        assert_eq!(lines[2], "toy,joint,50,0,off,1,0.8,0.1");
    }

    #[test]
    fn plotdata_edge_cases() {
        let out = emit_plotdata("", Analysis::NoiseCurve).unwrap();
        assert_eq!(out.trim_end(), Analysis::NoiseCurve.header().join(","));
        let header_only = format!("{}\n", REPORT_COLUMNS.join(","));
        let out = emit_plotdata(&header_only, Analysis::AucVsDelta).unwrap();
        assert_eq!(out.lines().count(), 1);
        let err = emit_plotdata("dataset,seed\ntoy,0\n", Analysis::AucVsDelta).unwrap_err();
        match err {
            Error::MissingColumns(cols) => assert!(cols.contains(&"auc_aprime".to_string())),
            other => panic!("{other:?}"),
        }
    }
}
