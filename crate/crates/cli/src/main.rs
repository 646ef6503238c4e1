use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cool_core::data::{load_dataset, load_dataset_lenient, write_dataset, Role};
use cool_core::eval::synthetic::{generate, SyntheticConfig};
use cool_core::eval::{
    config_hash, emit_plots, read_attention_exports, run_ablation, run_experiment, sweep_k, Experiment,
    ExperimentReport, SWEEP_KS,
};
use cool_core::knowledge::{crawl, snapshot_export, ClientConfig, KnowledgeCache, KnowledgeClient};
use cool_core::model::CoolModel;
use cool_core::par::Exec;
use cool_core::training::{load_checkpoint, save_checkpoint, write_loss_log};
use cool_core::variant::AblationVariant;

#[derive(Parser)]
#[command(name = "cool", version, about = "Few-shot cross-domain fake news detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Source,
    Target,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Source => Role::Source,
            RoleArg::Target => Role::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL dataset and print its class balance.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "source")]
        role: RoleArg,
        /// Drop malformed lines instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Write the validated records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fetch entity links, neighbors and descriptions for datasets into a cache.
    Crawl {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        cache: PathBuf,
        /// Also export the cache as a snapshot archive.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Train one seed and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the multi-seed protocol, or score a saved checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run ablation variants; results go under `<output_dir>/<tag>`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', conflicts_with = "all")]
        variant: Vec<String>,
        #[arg(long)]
        all: bool,
    },
    /// Run the protocol for several K; results go under `<output_dir>/k<K>`.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Render report bars and attention heatmaps as SVG.
    Plot {
        /// Report files or directories containing `report.jsonl`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Attention exports (`attention_seed<N>.jsonl`).
        #[arg(long)]
        attention: Vec<PathBuf>,
        /// Heatmaps per attention file.
        #[arg(long, default_value_t = 5)]
        max_heatmaps: usize,
    },
    /// Write the synthetic two-domain benchmark and a toy experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_source: usize,
        #[arg(long, default_value_t = 60)]
        n_target: usize,
    },
}

fn print_report(r: &ExperimentReport) {
    print!("{}", r.summary_table());
    println!("written to {}", r.config.output_dir.display());
}

fn load_report(path: &Path) -> Result<ExperimentReport> {
    let file = if path.is_dir() { path.join("report.jsonl") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(ExperimentReport::from_jsonl(&text)?)
}

#[cfg(feature = "online")]
fn online_client(cache: KnowledgeCache, config: ClientConfig) -> KnowledgeClient {
    use cool_core::knowledge::{HttpConfig, HttpSource};
    let http = HttpConfig {
        language: config.language.clone(),
        max_neighbors: config.max_neighbors,
        ..HttpConfig::from_env()
    };
    KnowledgeClient::online(cache, Box::new(HttpSource::new(http)), config)
}

#[cfg(not(feature = "online"))]
fn online_client(_: KnowledgeCache, _: ClientConfig) -> KnowledgeClient {
    unreachable!("checked by the caller")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            role,
            lenient,
            out,
        } => {
            let ds = if lenient {
                let (ds, bad) = load_dataset_lenient(&input, role.into())?;
                for (line, why) in &bad {
                    eprintln!("{}:{line}: {why}", input.display());
                }
                ds
            } else {
                load_dataset(&input, role.into())?
            };
            let (t, f) = ds.class_counts();
            println!("{}: {} records ({t} true, {f} fake)", ds.name, ds.len());
            if let Some(out) = out {
                write_dataset(&out, ds.records())?;
            }
        }
        Command::Crawl {
            datasets,
            cache,
            snapshot,
            threshold,
        } => {
            if !cfg!(feature = "online") {
                bail!("built without the `online` feature; crawling is unavailable");
            }
            let config = ClientConfig {
                threshold,
                ..Default::default()
            };
            let client = online_client(KnowledgeCache::open(&cache)?, config);
            let mut texts = Vec::new();
            for path in &datasets {
                let ds = load_dataset(path, Role::Source)?;
                texts.extend(ds.records().iter().map(|r| r.text.clone()));
            }
            let stats = crawl(&client, texts.iter().map(String::as_str));
            println!(
                "{} texts, {} mentions, {} entities, {} network requests, {} failures",
                stats.texts,
                stats.mentions,
                stats.entities,
                client.network_requests(),
                stats.failures.len()
            );
            for (what, why) in &stats.failures {
                eprintln!("failed {what}: {why}");
            }
            if let Some(snap) = snapshot {
                snapshot_export(client.cache(), &snap)?;
                println!("snapshot written to {}", snap.display());
            }
        }
        Command::Train {
            config,
            seed,
            checkpoint,
        } => {
            let exp = Experiment::from_path(&config)?;
            let seed = seed.unwrap_or(exp.config.seeds[0]);
            let run = exp.run_seed(seed, Exec::Parallel)?;
            save_checkpoint(&checkpoint, &run.model, &config_hash(&exp.config)?, seed)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(checkpoint.join("losses.jsonl"))?);
            write_loss_log(&run.log, &mut w)?;
            println!("{}", serde_json::to_string_pretty(&run.result)?);
            info!("checkpoint written to {}", checkpoint.display());
        }
        Command::Eval { config, checkpoint } => match checkpoint {
            None => print_report(&run_experiment(&config)?),
            Some(dir) => {
                let exp = Experiment::from_path(&config)?;
                let mut model = CoolModel::new(exp.frozen.clone(), exp.config.model.clone(), exp.config.variant, 0)?;
                let manifest = load_checkpoint(&dir, &mut model)?;
                if manifest.variant != exp.config.variant.tag() {
                    bail!("checkpoint variant {} differs from config variant {}", manifest.variant, exp.config.variant);
                }
                let m = exp.evaluate_model(&model, manifest.seed, Exec::Parallel)?;
                println!("{}", serde_json::to_string_pretty(&m)?);
            }
        },
        Command::Ablate { config, variant, all } => {
            let variants: Vec<AblationVariant> = if all {
                AblationVariant::ALL.to_vec()
            } else if variant.is_empty() {
                bail!("pass --variant <tag> or --all");
            } else {
                variant.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
            };
            for v in variants {
                print_report(&run_ablation(&config, v)?);
            }
        }
        Command::SweepK { config, ks } => {
            let ks = ks.unwrap_or_else(|| SWEEP_KS.to_vec());
            for r in sweep_k(&config, &ks)? {
                print_report(&r);
            }
        }
        Command::Plot {
            reports,
            out,
            attention,
            max_heatmaps,
        } => {
            let reports = reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let mut exports = Vec::new();
            for path in &attention {
                let mut e = read_attention_exports(path)?;
                e.retain(|x| !x.entities.is_empty());
                e.truncate(max_heatmaps);
                exports.extend(e);
            }
            for f in emit_plots(&reports, &exports, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Synth {
            out,
            seed,
            n_source,
            n_target,
        } => {
            let cfg = SyntheticConfig {
                n_source,
                n_target,
                seed,
                ..Default::default()
            };
            generate(&cfg)?.write_to(&out)?;
            println!("synthetic benchmark written to {}", out.display());
            println!("run it with: cool eval --config {}", out.join("experiment.toml").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
