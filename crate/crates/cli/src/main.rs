use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use slidestream::bench::{emit_report, parse_loads, run_bench, BenchConfig, BenchTarget};
use slidestream::classifiers::{evaluate, metrics_from_confusion, read_labels};
use slidestream::dedup::{read_labeled_pairs, tune_threshold, ThresholdGrid};
use slidestream::model::Task;
use slidestream::pipeline::{run_pipeline, PipelineConfig};
use slidestream::synth::{generate_corpus, FunnelPlan};

#[derive(Parser)]
#[command(name = "slidestream", version, about = "Landslide image stream processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a corpus through the pipeline and print the run report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the corpus path in the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Overrides the output directory in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure latency and throughput of one stage under increasing load.
    Bench {
        #[arg(long, value_parser = BenchTarget::NAMES)]
        target: String,
        /// `2^a..2^b`, `2^k`, or comma-separated counts.
        #[arg(long, default_value = "2^0..2^12")]
        loads: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Items per second; omitted means one burst per load.
        #[arg(long)]
        rate: Option<f64>,
        /// Feature dimension for the duplicate filter.
        #[arg(long)]
        dim: Option<usize>,
        /// Vectors pre-loaded into the duplicate index before each repeat.
        #[arg(long)]
        prefill: Option<usize>,
        /// Simulated per-item cost in milliseconds (classifiers) or geocoder delay.
        #[arg(long)]
        cost_ms: Option<f64>,
        #[arg(long, env = slidestream::bench::TIMEOUT_ENV)]
        timeout_secs: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the duplicate distance threshold maximizing MCC on labelled pairs.
    Tune {
        /// CSV of `distance,is_duplicate`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        t_min: f64,
        #[arg(long, default_value_t = 12.0)]
        t_max: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
    /// Score predicted labels against gold labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        task: TaskArg,
    },
    /// Write a synthetic corpus with planted funnel counts and a ready config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Distinct fetched images; shares must come out whole.
        #[arg(long, default_value_t = 50_000)]
        images: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Junk,
    Landslide,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Junk => Task::Junk,
            TaskArg::Landslide => Task::Landslide,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, corpus, out } => {
            let mut cfg = PipelineConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let report = run_pipeline(&cfg)?;
            println!("{}", report.to_json());
            Ok(if report.failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Bench { target, loads, repeats, seed, workers, rate, dim, prefill, cost_ms, timeout_secs, out } => {
            let mut target = BenchTarget::from_name(&target)?;
            let cost = cost_ms.map(|ms| Duration::from_secs_f64(ms / 1000.0));
            match &mut target {
                BenchTarget::DuplicateFilter { dim: d, prefill: p } => {
                    *d = dim.unwrap_or(*d);
                    *p = prefill.unwrap_or(*p);
                }
                BenchTarget::JunkFilter { cost: c } | BenchTarget::LandslideDetector { cost: c } => {
                    *c = cost.unwrap_or(*c);
                }
                BenchTarget::Geolocation { delay, .. } => *delay = cost.unwrap_or(*delay),
            }
            let mut cfg =
                BenchConfig { repeats, seed, workers, rate, ..BenchConfig::new(target, parse_loads(&loads)?) };
            if let Some(s) = timeout_secs {
                if !(s > 0.0) {
                    bail!("timeout must be positive");
                }
                cfg.timeout = Duration::from_secs_f64(s);
            }
            let points = run_bench(&cfg)?;
            let (csv, json) = emit_report(&points, &out)?;
            for p in &points {
                println!(
                    "{} load={} latency_s={} throughput_ips={} failed={}",
                    p.target,
                    p.load,
                    fmt_opt(p.mean_latency_s),
                    fmt_opt(p.mean_throughput_ips),
                    p.failed_repeats
                );
            }
            eprintln!("wrote {} and {}", csv.display(), json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune { pairs, t_min, t_max, step } => {
            if !(step > 0.0) || t_max < t_min {
                bail!("need step > 0 and t-max >= t-min");
            }
            let pairs = read_labeled_pairs(&pairs)?;
            let result = tune_threshold(&pairs, ThresholdGrid { min: t_min, max: t_max, step });
            println!("threshold,mcc");
            for (t, m) in &result.curve {
                println!("{t},{m}");
            }
            println!("# best threshold={} mcc={}", result.best_threshold, result.best_mcc);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { pred, gold, task } => {
            let task = Task::from(task);
            let preds = read_labels(&pred, task)?;
            let gold = read_labels(&gold, task)?;
            let report = metrics_from_confusion(&evaluate(&preds, &gold)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", report.to_table(task));
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { out, images, seed } => {
            let plan = FunnelPlan::deployment(images, seed)?;
            let g = generate_corpus(&plan, &out)?;
            println!("{}", serde_json::to_string_pretty(&g.expected)?);
            eprintln!("config: {}", g.config_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}
