//! `fairrank`: runs experiment grids, replays manifests, emits plot data
//! and writes synthetic graphs.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fairrank::datagen::{generate, write_graph, GenConfig};
use fairrank::experiment::{
    emit_plotdata, parse_key_values, run_and_write, AggregateRow, Analysis, RunManifest, AGGREGATE_FILE,
    RESULTS_FILE,
};

const SEED_ENV: &str = "FAIRRANK_SEED";
const SWEEP_KEYS: [&str; 5] = ["p", "k", "rho", "detector", "aprime"];

#[derive(Parser)]
#[command(name = "fairrank", version, about = "Fairness-aware spam detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (grid cell, seed).
    Run(RunArgs),
    /// Re-run the experiment recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's own.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Reshape a results table for plotting.
    Plotdata {
        #[arg(long)]
        input: PathBuf,
        /// auc_vs_delta, noise_curve or sensitivity.
        #[arg(long)]
        analysis: String,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic graph as nodes.tsv, edges.tsv and groups.tsv.
    Generate {
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Generator field override, e.g. `sigma=0.5`.
        #[arg(long = "set", value_name = "FIELD=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Graph directory with nodes.tsv and edges.tsv.
    #[arg(long, conflicts_with = "gen")]
    data: Option<PathBuf>,
    /// Generator preset: default, separable or small.
    #[arg(long)]
    gen: Option<String>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    /// First seed; FAIRRANK_SEED supplies it when unset.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "LIST")]
    p: Option<String>,
    /// gnn, gnn-s1tr, gnn-s0te, gnn-s1te.
    #[arg(long, value_name = "LIST")]
    detector: Option<String>,
    /// wo, random, gt, pretrained, joint.
    #[arg(long, value_name = "LIST")]
    aprime: Option<String>,
    #[arg(long, value_name = "LIST")]
    k: Option<String>,
    #[arg(long, value_name = "LIST")]
    rho: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Grid axis as KEY=LIST, for p, k, rho, detector or aprime.
    #[arg(long, value_name = "KEY=LIST")]
    sweep: Vec<String>,
    /// on, off or on,off; off means rho = 0.
    #[arg(long, value_name = "LIST")]
    prune: Option<String>,
    /// Any other manifest setting as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Config file, then the seed variable, then flags.
fn settings(args: &RunArgs) -> Result<BTreeMap<String, String>> {
    let mut s = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_key_values(&text, &path.display().to_string())?
        }
        None => BTreeMap::new(),
    };
    if !s.contains_key("seed") && !s.contains_key("seed_list") {
        if let Ok(v) = std::env::var(SEED_ENV) {
            s.insert("seed".into(), v);
        }
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            s.insert(k.to_string(), v);
        }
    };
    put("data", args.data.as_ref().map(|d| format!("dir:{}", d.display())));
    put("data", args.gen.as_ref().map(|g| format!("gen:{g}")));
    put("p", args.p.clone());
    put("detector", args.detector.clone());
    put("aprime", args.aprime.clone());
    put("k", args.k.clone());
    put("rho", args.rho.clone());
    put("alpha", args.alpha.map(|x| x.to_string()));
    put("lambda", args.lambda.map(|x| x.to_string()));
    put("epochs", args.epochs.map(|x| x.to_string()));
    put("out", args.out.as_ref().map(|o| o.display().to_string()));
    put("jobs", args.jobs.map(|x| x.to_string()));
    put("prune", args.prune.clone());
    put("seeds", args.seeds.map(|x| x.to_string()));
    put("seed", args.seed.map(|x| x.to_string()));
    if args.seeds.is_some() || args.seed.is_some() {
        s.remove("seed_list");
    }
    for sweep in &args.sweep {
        let (k, v) = split_pair(sweep)?;
        if !SWEEP_KEYS.contains(&k.as_str()) {
            bail!("cannot sweep {k:?}; sweepable: {}", SWEEP_KEYS.join(", "));
        }
        s.insert(k, v);
    }
    for o in &args.overrides {
        let (k, v) = split_pair(o)?;
        s.insert(k, v);
    }
    Ok(s)
}

fn print_summary(manifest: &RunManifest, agg: &[AggregateRow]) {
    println!(
        "{:<48} {:>4} {:>18} {:>10}",
        "cell", "runs", "delta_ndcg", "auc_aprime"
    );
    for a in agg {
        let delta = a.stats[3].map_or("-".to_string(), |(m, s)| format!("{m:.4} ± {s:.4}"));
        let auc = a.mean("auc_aprime").map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{:<48} {:>4} {:>18} {:>10}", a.cell_id, a.runs, delta, auc);
    }
    println!(
        "wrote {} and {} under {}",
        RESULTS_FILE,
        AGGREGATE_FILE,
        manifest.out.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let manifest = RunManifest::from_settings(&settings(&args)?)?;
            let (_, agg) = run_and_write(&manifest)?;
            print_summary(&manifest, &agg);
        }
        Command::Replay { manifest, out, jobs } => {
            let mut m = RunManifest::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            if let Some(o) = out {
                m.out = o;
            }
            if let Some(j) = jobs {
                m.jobs = j.max(1);
            }
            let (_, agg) = run_and_write(&m)?;
            print_summary(&m, &agg);
        }
        Command::Plotdata { input, analysis, output } => {
            let analysis: Analysis = analysis.parse()?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let table = emit_plotdata(&text, analysis)?;
            match output {
                Some(path) => fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{table}"),
            }
        }
        Command::Generate { preset, out, overrides } => {
            let mut cfg = GenConfig::preset(&preset)?;
            for o in &overrides {
                let (k, v) = split_pair(o)?;
                cfg.set(&k, &v)?;
            }
            let s = generate(&cfg)?;
            write_graph(&s.graph, &s.groups, &out)?;
            println!(
                "{} users, {} reviews, {} products written to {}",
                s.graph.users().len(),
                s.graph.reviews().len(),
                s.graph.products().len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
