use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use acts::analysis::{clusters_csv, elbow_csv, elbow_curve, extract_queries, kmeans};
use acts::config::{Manifest, RunConfig};
use acts::dataset::{write_atomic, IncidenceKind};
use acts::evaluator::{attention_csv, attention_weights, forecast, forecasts_csv, read_forecasts_csv, score};
use acts::model::ModelVariant;
use acts::synth::{generate, run_benchmark, SynthSpec};
use acts::trainer::{train_weeks, tune, Checkpoint};
use acts::{Error, Result};

#[derive(Parser)]
#[command(name = "acts", version, about = "Cross-series attention forecasting for regional incidence data")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load incidence (long or wide cumulative CSV) and write canonical long CSV.
    Ingest(Common),
    /// Train one model per week offset and write a checkpoint.
    Train(Common),
    /// Search the hyperparameter grid, then train the best setting.
    Tune(Common),
    /// Forecast the weeks after the issue date from a checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also export attention weights for this region.
        #[arg(long)]
        explain: Option<String>,
    },
    /// Score a forecast CSV against the data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        forecasts: PathBuf,
    },
    /// Compare model variants, on the data or on the synthetic benchmark.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run the synthetic pattern-transfer benchmark instead of --data.
        #[arg(long)]
        synthetic: bool,
        /// Number of synthetic seeds (0..N).
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// TOML file with synthetic generator settings.
        #[arg(long)]
        synth_spec: Option<PathBuf>,
    },
    /// Cluster regions by their query vectors.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
    },
    /// Write a synthetic dataset as long CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        synth_spec: Option<PathBuf>,
    },
}

/// Options shared by every subcommand. Any flag given overrides the
/// config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features_static: Option<PathBuf>,
    #[arg(long)]
    features_dynamic: Option<PathBuf>,
    #[arg(long, value_parser = ["cases", "hosp", "deaths"])]
    task: Option<String>,
    #[arg(long)]
    issue_date: Option<NaiveDate>,
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, or the components to drop: d, n, i, f (comma lists allowed for ablate).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    week_offset: Option<usize>,
    #[arg(long)]
    kernel_width: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone().into(); })*
            };
        }
        set!(data => data, features_static => features_static, features_dynamic => features_dynamic,
             issue_date => issue_date, out => out, jobs => jobs,
             segment_len => train.segment_len, hidden => train.hidden, lr => train.lr,
             iters => train.iters, seed => train.seed, kernel_width => train.kernel_width,
             batch => train.batch, patience => train.patience);
        if let Some(t) = &self.task {
            cfg.task = t.parse::<IncidenceKind>()?;
        }
        if let Some(v) = &self.variant {
            cfg.train.variant = v.parse::<ModelVariant>()?;
        }
        if let Some(k) = self.week_offset {
            cfg.week_offsets = vec![k];
            cfg.train.week_offset = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn variants(&self) -> Result<Vec<ModelVariant>> {
        match &self.variant {
            Some(list) => list.split(',').map(|v| v.trim().parse()).collect(),
            None => Ok(vec![
                ModelVariant::FULL,
                ModelVariant::without_detrend(),
                ModelVariant::without_normalize(),
                ModelVariant::target_only(),
                ModelVariant::without_features(),
            ]),
        }
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Outputs {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(self, mut manifest: Manifest) -> Result<()> {
        manifest.outputs = self.written;
        manifest.write(self.dir)?;
        println!("wrote {} file(s) to {}", manifest.outputs.len() + 1, self.dir.display());
        Ok(())
    }
}

fn load_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(SynthSpec::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(common) => {
            let cfg = common.resolve()?;
            let ds = cfg.load_dataset()?;
            let mut out = Outputs::new(&cfg.out)?;
            out.write("incidence.csv", &ds.to_long_csv())?;
            println!(
                "{} regions x {} days ({} to {}); {} zero-filled, {} clamped",
                ds.n_regions(),
                ds.len(),
                ds.start_date(),
                ds.last_date(),
                ds.report.zero_filled,
                ds.report.clamped
            );
            let mut manifest = Manifest::new("ingest", &cfg, &[])?;
            manifest.dataset_fingerprint = Some(ds.fingerprint());
            out.finish(manifest)
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let ds = cfg.load_dataset()?;
            let view = cfg.history(&ds)?;
            let outcomes = train_weeks(&view, &cfg.train, &cfg.week_offsets)?;
            let checkpoint = Checkpoint::new(&view, &cfg.train, &outcomes);
            let mut out = Outputs::new(&cfg.out)?;
            out.write("checkpoint.json", &checkpoint.to_json()?)?;
            for o in &outcomes {
                let k = o.model.shape.week_offset;
                out.write(&format!("trace_k{k}.csv"), &o.trace_csv())?;
                println!("week {k}: best validation loss {:.6} at iteration {}", o.best_val_loss, o.best_iteration);
            }
            let mut manifest = Manifest::new("train", &cfg, &[])?;
            manifest.dataset_fingerprint = Some(view.fingerprint());
            out.finish(manifest)
        }
        Command::Tune(common) => {
            let cfg = common.resolve()?;
            let ds = cfg.load_dataset()?;
            let view = cfg.history(&ds)?;
            let base = acts::trainer::TrainConfig {
                week_offset: cfg.week_offsets[0],
                ..cfg.train.clone()
            };
            let result = tune(&view, &base, &cfg.grid, cfg.jobs)?;
            let mut table = String::from("hidden,segment_len,lr,iters,kernel_width,val_loss\n");
            for (c, loss) in &result.scores {
                table.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.hidden, c.segment_len, c.lr, c.iters, c.kernel_width, loss
                ));
            }
            let best = result.best_config().clone();
            println!(
                "best: hidden {} segment_len {} lr {} iters {} (validation loss {:.6})",
                best.hidden, best.segment_len, best.lr, best.iters, result.scores[result.best].1
            );
            let outcomes = train_weeks(&view, &best, &cfg.week_offsets)?;
            let checkpoint = Checkpoint::new(&view, &best, &outcomes);
            let mut out = Outputs::new(&cfg.out)?;
            out.write("tune.csv", &table)?;
            let chosen = RunConfig {
                train: best,
                ..cfg.clone()
            };
            out.write("best.toml", &chosen.to_toml()?)?;
            out.write("checkpoint.json", &checkpoint.to_json()?)?;
            let mut manifest = Manifest::new("tune", &cfg, &[])?;
            manifest.dataset_fingerprint = Some(view.fingerprint());
            out.finish(manifest)
        }
        Command::Forecast {
            common,
            checkpoint,
            explain,
        } => {
            let cfg = common.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = cfg.load_dataset()?;
            let view = cfg.history(&ds)?;
            let records = forecast(&ckpt, &view)?;
            let mut out = Outputs::new(&cfg.out)?;
            out.write("forecasts.csv", &forecasts_csv(&records))?;
            if let Some(region) = explain {
                let i = view
                    .region_index(&region)
                    .ok_or_else(|| Error::Usage(format!("unknown region {region:?}")))?;
                for entry in &ckpt.entries {
                    let rows = attention_weights(&entry.model, &view, i)?;
                    let k = entry.model.shape.week_offset;
                    out.write(&format!("attention_{region}_k{k}.csv"), &attention_csv(&rows))?;
                }
            }
            let mut manifest = Manifest::new("forecast", &cfg, &[&checkpoint])?;
            manifest.seed = ckpt.seed;
            manifest.dataset_fingerprint = Some(view.fingerprint());
            out.finish(manifest)
        }
        Command::Evaluate { common, forecasts } => {
            let cfg = common.resolve()?;
            let ds = cfg.load_dataset()?;
            let records = read_forecasts_csv(&forecasts)?;
            let Some(report) = score(&ds, &records)? else {
                return Err(Error::Data("no forecast week has complete ground truth in the data".into()));
            };
            for (k, w) in &report.per_week {
                println!("week {k}: WAPE {w:.4}");
            }
            println!("pooled: WAPE {:.4}", report.pooled);
            let mut out = Outputs::new(&cfg.out)?;
            out.write("metrics.csv", &report.to_csv())?;
            out.finish(Manifest::new("evaluate", &cfg, &[&forecasts])?)
        }
        Command::Ablate {
            common,
            synthetic,
            seeds,
            synth_spec,
        } => {
            let variants = common.variants()?;
            let common = Common {
                variant: None,
                ..common
            };
            let cfg = common.resolve()?;
            let mut out = Outputs::new(&cfg.out)?;
            let mut extra: Vec<&Path> = Vec::new();
            if synthetic {
                let spec = load_spec(synth_spec.as_deref())?;
                let seed_list: Vec<u64> = (0..seeds).collect();
                let report = run_benchmark(&spec, &seed_list, &cfg.train, &variants)?;
                for v in &variants {
                    println!("{}: median WAPE {:.4}", v.tag(), report.median_wape(&v.tag()));
                }
                println!("copy oracle: median WAPE {:.4}", report.median_oracle());
                out.write("benchmark.csv", &report.to_csv())?;
                if let Some(p) = synth_spec.as_deref() {
                    extra.push(p);
                }
            } else {
                let ds = cfg.load_dataset()?;
                let issue = cfg
                    .issue_date
                    .ok_or_else(|| Error::Usage("ablation on data needs --issue-date".into()))?;
                let view = ds.through_date(issue)?;
                let mut table = String::from("variant,week_offset,wape\n");
                for v in &variants {
                    let train_cfg = acts::trainer::TrainConfig {
                        variant: *v,
                        ..cfg.train.clone()
                    };
                    let outcomes = train_weeks(&view, &train_cfg, &cfg.week_offsets)?;
                    let records = forecast(&Checkpoint::new(&view, &train_cfg, &outcomes), &view)?;
                    match score(&ds, &records)? {
                        Some(m) => {
                            for (k, w) in &m.per_week {
                                table.push_str(&format!("{},{k},{w}\n", v.tag()));
                            }
                            table.push_str(&format!("{},all,{}\n", v.tag(), m.pooled));
                            println!("{}: pooled WAPE {:.4}", v.tag(), m.pooled);
                        }
                        None => println!("{}: no ground truth after {issue}", v.tag()),
                    }
                }
                out.write("ablation.csv", &table)?;
            }
            out.finish(Manifest::new("ablate", &cfg, &extra)?)
        }
        Command::Cluster {
            common,
            checkpoint,
            clusters,
            k_max,
        } => {
            let cfg = common.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let k = cfg.week_offsets[0];
            let model = ckpt
                .model_for(k)
                .ok_or_else(|| Error::Usage(format!("checkpoint has no model for week offset {k}")))?;
            let ds = cfg.load_dataset()?;
            let view = cfg.history(&ds)?;
            let queries = extract_queries(model, &view, view.len())?;
            let fit = kmeans(&queries, clusters, cfg.train.seed)?;
            let curve = elbow_curve(&queries, k_max.min(queries.len()), cfg.train.seed)?;
            let names: Vec<String> = view.series.iter().map(|s| s.region.name.clone()).collect();
            println!("K={clusters}: within-cluster SSE {:.6}", fit.sse);
            let mut out = Outputs::new(&cfg.out)?;
            out.write("clusters.csv", &clusters_csv(&names, &fit.labels))?;
            out.write("elbow.csv", &elbow_csv(&curve))?;
            let mut manifest = Manifest::new("cluster", &cfg, &[&checkpoint])?;
            manifest.dataset_fingerprint = Some(view.fingerprint());
            out.finish(manifest)
        }
        Command::Synth { common, synth_spec } => {
            let cfg = common.resolve()?;
            let spec = load_spec(synth_spec.as_deref())?;
            spec.validate(cfg.train.segment_len)?;
            let data = generate(&spec, cfg.train.seed)?;
            let mut out = Outputs::new(&cfg.out)?;
            out.write("synthetic.csv", &data.dataset.to_long_csv())?;
            let meta = serde_json::json!({
                "issue_date": data.dataset.date_of(data.issue_day()).to_string(),
                "donors": data.donors,
                "scales": data.scales,
                "lag": data.lag,
            });
            out.write("synthetic_meta.json", &serde_json::to_string_pretty(&meta).map_err(|e| Error::Serde(e.to_string()))?)?;
            println!("issue date for the benchmark target: {}", data.dataset.date_of(data.issue_day()));
            let mut manifest = Manifest::new("synth", &cfg, &synth_spec.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            manifest.dataset_fingerprint = Some(data.dataset.fingerprint());
            out.finish(manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
