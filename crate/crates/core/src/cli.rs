//! Command-line operator surface: preprocessing, synthetic corpora,
//! training (with resume), evaluation, ablation sweeps, and artifact
//! exports.
//!
//! Configuration resolves in layers: a built-in profile supplies every
//! default, an optional TOML file overrides the profile, `POIREC_*`
//! environment variables override the file, and explicit flags override
//! everything. Every subcommand exits 0 on success and 1 with a
//! single-line diagnostic on failure; `--seed` pins all randomness.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Ablation, EstepCadence, Profile, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, MetricSet};
use crate::ingest::{self, FilterParams, ViewKind};
use crate::model::{run_ablations, GraphSnapshot, Model};
use crate::persist;
use crate::synth::{self, SynthParams};

#[derive(Debug, Parser)]
#[command(
    name = "poirec",
    version,
    about = "Next point-of-interest recommender over learned bi-level graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    /// Full-scale defaults (d2 = d3 = 1024, 60 epochs).
    Paper,
    /// Small-corpus defaults (d2 = d3 = 32, 40 epochs).
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoHsl,
    NoPsl,
    NoShar,
    NoSpec,
    NoSharSpec,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoHsl => Ablation::NoHsl,
            AblationArg::NoPsl => Ablation::NoPsl,
            AblationArg::NoShar => Ablation::NoShar,
            AblationArg::NoSpec => Ablation::NoSpec,
            AblationArg::NoSharSpec => Ablation::NoSharSpec,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstepArg {
    Epoch,
    Batch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewArg {
    Spatial,
    Temporal,
}

impl From<ViewArg> for ViewKind {
    fn from(v: ViewArg) -> ViewKind {
        match v {
            ViewArg::Spatial => ViewKind::Spatial,
            ViewArg::Temporal => ViewKind::Temporal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphKind {
    /// The N x N POI adjacency.
    Poi,
    /// The N x K one-hot cluster membership.
    Hier,
    /// The K x K prototype adjacency.
    Proto,
}

/// Configuration layering shared by the compute subcommands.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Built-in defaults to start from.
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// TOML file overriding the profile (flat keys, unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation override.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Clustering cadence override.
    #[arg(long, value_enum)]
    estep: Option<EstepArg>,
    /// Dataset file override.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Artifact directory override.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::profile(match self.profile {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        });
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            config.apply_toml(&text)?;
        }
        config.apply_env(std::env::vars())?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(a) = self.ablation {
            config.ablation = a.into();
        }
        if let Some(e) = self.estep {
            config.estep = match e {
                EstepArg::Epoch => EstepCadence::Epoch,
                EstepArg::Batch => EstepCadence::Batch,
            };
        }
        if let Some(d) = &self.dataset {
            config.dataset = d.display().to_string();
        }
        if let Some(w) = &self.workdir {
            config.workdir = w.display().to_string();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and index a raw check-in log into a dataset file.
    Preprocess {
        /// Tab-separated check-ins: user, poi, latitude, longitude,
        /// RFC 3339 timestamp. A .gz suffix is decompressed.
        #[arg(long)]
        input: PathBuf,
        /// Dataset file to write.
        #[arg(long)]
        output: PathBuf,
        /// Keep users with at least this many check-ins.
        #[arg(long, default_value_t = 20)]
        min_user: usize,
        /// Keep users with at most this many check-ins.
        #[arg(long, default_value_t = 50)]
        max_user: usize,
        /// Keep POIs with at least this many distinct visitors.
        #[arg(long, default_value_t = 10)]
        min_poi_visitors: usize,
        /// Re-apply the filters until nothing changes.
        #[arg(long)]
        fixpoint: bool,
        /// Training fraction of each user's history.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
    },
    /// Generate a synthetic check-in corpus.
    Synth {
        /// File to write.
        #[arg(long)]
        output: PathBuf,
        /// Emit the raw tab-separated log instead of a dataset file.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 40)]
        pois_per_cluster: usize,
        #[arg(long, default_value_t = 300)]
        users: usize,
        /// Venues per cluster that open only late in each history.
        #[arg(long, default_value_t = 3)]
        late_per_cluster: usize,
        /// Visit index from which late venues are visitable.
        #[arg(long, default_value_t = 22)]
        open_day: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training fraction of each user's history (dataset output only).
        #[arg(long, default_value_t = 0.8)]
        split: f64,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epoch budget override (useful with --resume).
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint file to write (default: <workdir>/checkpoint.prck).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score the held-out visits of a checkpointed model.
    Evaluate {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset override (default: the checkpoint's configured path).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report base name (default: derived from config and seed).
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train and evaluate the full model plus all five ablations.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write one view's adjacency as a sorted edge list.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Which feature view's graph to export.
        #[arg(long, value_enum)]
        view: ViewArg,
        /// Which level of the graph to export.
        #[arg(long, value_enum)]
        which: GraphKind,
        /// Edge-list file (default: <workdir>/<view>-<which>.edges).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the enriched POI embeddings as tab-separated text.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output file (default: <workdir>/embeddings.tsv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize one view's cluster memberships.
    InspectClusters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        view: ViewArg,
    },
}

/// Parses arguments and runs one subcommand, returning the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("poirec: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Preprocess {
            input,
            output,
            min_user,
            max_user,
            min_poi_visitors,
            fixpoint,
            split,
        } => {
            let checkins = ingest::read_checkins_path(&input)?;
            let params = FilterParams {
                min_user,
                max_user,
                min_poi_users: min_poi_visitors,
                fixpoint,
            };
            let mut dataset = ingest::filter_dataset(&checkins, &params)?;
            ingest::split_train_test(&mut dataset, split)?;
            persist::save_dataset(&output, &dataset)?;
            print_corpus_summary(&dataset, &output);
            Ok(())
        }
        Command::Synth {
            output,
            raw,
            clusters,
            pois_per_cluster,
            users,
            late_per_cluster,
            open_day,
            seed,
            split,
        } => {
            let params = SynthParams {
                clusters,
                pois_per_cluster,
                users,
                late_per_cluster,
                open_day,
                seed,
                ..SynthParams::default()
            };
            let records = synth::generate(&params);
            if raw {
                let file = std::fs::File::create(&output)?;
                ingest::write_checkins(std::io::BufWriter::new(file), &records)?;
                println!(
                    "wrote {} raw check-ins to {}",
                    records.len(),
                    output.display()
                );
            } else {
                let mut dataset = ingest::filter_dataset(&records, &FilterParams::default())?;
                ingest::split_train_test(&mut dataset, split)?;
                persist::save_dataset(&output, &dataset)?;
                print_corpus_summary(&dataset, &output);
            }
            Ok(())
        }
        Command::Train {
            config,
            resume,
            epochs,
            output,
        } => {
            let (mut model, dataset) = match &resume {
                Some(ckpt_path) => {
                    let mut ckpt = persist::load_checkpoint(ckpt_path)?;
                    if let Some(e) = epochs {
                        ckpt.config.epochs = e;
                    }
                    if let Some(d) = &config.dataset {
                        ckpt.config.dataset = d.display().to_string();
                    }
                    let dataset = persist::load_dataset(Path::new(&ckpt.config.dataset))?;
                    (ckpt.into_model(&dataset)?, dataset)
                }
                None => {
                    let mut cfg = config.resolve()?;
                    if let Some(e) = epochs {
                        cfg.epochs = e;
                    }
                    let dataset = persist::load_dataset(Path::new(&cfg.dataset))?;
                    (Model::new(cfg, &dataset)?, dataset)
                }
            };
            let workdir = PathBuf::from(&model.config.workdir);
            std::fs::create_dir_all(&workdir)?;

            let logs = model.train(&dataset)?;
            for log in &logs {
                println!(
                    "epoch {}\tloss {:.6}\tce {:.6}\tgrad-norm {:.6}",
                    log.epoch, log.loss.total, log.loss.ce, log.grad_norm
                );
            }
            persist::append_epoch_logs(&workdir.join("train.jsonl"), &logs)?;
            let ckpt_path = output.unwrap_or_else(|| workdir.join("checkpoint.prck"));
            persist::save_checkpoint(&ckpt_path, &model)?;
            println!(
                "trained through epoch {} ({} new); checkpoint {}",
                model.epoch,
                logs.len(),
                ckpt_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            run_id,
        } => {
            let (model, data) = load_model(&checkpoint, dataset.as_deref())?;
            let report = model.evaluate(&data)?;
            let id = run_id.unwrap_or_else(|| default_run_id(&model.config));
            let workdir = PathBuf::from(&model.config.workdir);
            let json_path = persist::write_report(&workdir, &id, &model.config, &report)?;
            print_report(&report);
            println!("report {}", json_path.display());
            Ok(())
        }
        Command::Ablate { config } => {
            let cfg = config.resolve()?;
            let dataset = persist::load_dataset(Path::new(&cfg.dataset))?;
            let rows = run_ablations(&dataset, &cfg)?;
            let workdir = PathBuf::from(&cfg.workdir);
            println!("ablation\tacc@1\tacc@5\tacc@10\tacc@20\tmrr");
            for (ablation, report) in &rows {
                let m = &report.metrics;
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    ablation.name(),
                    m.acc_at[&1],
                    m.acc_at[&5],
                    m.acc_at[&10],
                    m.acc_at[&20],
                    m.mrr
                );
                let variant_config = RunConfig {
                    ablation: *ablation,
                    ..cfg.clone()
                };
                let id = default_run_id(&variant_config);
                persist::write_report(&workdir, &id, &variant_config, report)?;
            }
            Ok(())
        }
        Command::ExportGraph {
            checkpoint,
            dataset,
            view,
            which,
            output,
        } => {
            let (model, _) = load_model(&checkpoint, dataset.as_deref())?;
            let snap = view_snapshot(&model, view.into())?;
            let name = format!(
                "{}-{}.edges",
                snap.view.name(),
                match which {
                    GraphKind::Poi => "poi",
                    GraphKind::Hier => "hier",
                    GraphKind::Proto => "proto",
                }
            );
            let missing =
                || Error::Config("the prototype level is disabled in this run".into());
            let matrix = match which {
                GraphKind::Poi => snap.a_poi,
                GraphKind::Hier => snap.a_hier.ok_or_else(missing)?,
                GraphKind::Proto => snap.a_proto.ok_or_else(missing)?,
            };
            let path =
                output.unwrap_or_else(|| PathBuf::from(&model.config.workdir).join(name));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let edges = persist::export_edge_list(&path, &matrix)?;
            println!("wrote {edges} edges to {}", path.display());
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            output,
        } => {
            let (model, _) = load_model(&checkpoint, dataset.as_deref())?;
            let embeddings = model.enriched_embeddings()?;
            let path = output
                .unwrap_or_else(|| PathBuf::from(&model.config.workdir).join("embeddings.tsv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            persist::export_embeddings(&path, &embeddings)?;
            println!(
                "wrote {} x {} embeddings to {}",
                embeddings.nrows(),
                embeddings.ncols(),
                path.display()
            );
            Ok(())
        }
        Command::InspectClusters {
            checkpoint,
            dataset,
            view,
        } => {
            let (model, data) = load_model(&checkpoint, dataset.as_deref())?;
            let snap = view_snapshot(&model, view.into())?;
            if snap.assignments.is_empty() {
                return Err(Error::Config(
                    "the prototype level is disabled in this run".into(),
                ));
            }
            let k = model.config.k;
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (poi, &c) in snap.assignments.iter().enumerate() {
                members[c].push(poi);
            }
            for (c, list) in members.iter().enumerate() {
                let examples: Vec<&str> = list
                    .iter()
                    .take(5)
                    .map(|&p| data.pois[p].id.as_str())
                    .collect();
                println!("{c}\t{}\t{}", list.len(), examples.join(" "));
            }
            Ok(())
        }
    }
}

/// Loads a checkpoint and the dataset it references (or an override).
fn load_model(checkpoint: &Path, dataset: Option<&Path>) -> Result<(Model, ingest::Dataset)> {
    let ckpt = persist::load_checkpoint(checkpoint)?;
    let data_path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&ckpt.config.dataset));
    let data = persist::load_dataset(&data_path)?;
    let model = ckpt.into_model(&data)?;
    Ok((model, data))
}

fn view_snapshot(model: &Model, kind: ViewKind) -> Result<GraphSnapshot> {
    model
        .graph_snapshots()?
        .into_iter()
        .find(|s| s.view == kind)
        .ok_or_else(|| Error::Config(format!("the {} view is disabled in this run", kind.name())))
}

fn default_run_id(config: &RunConfig) -> String {
    let stem = Path::new(&config.dataset)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    format!("{stem}-{}-s{}", config.ablation.name(), config.seed)
}

fn print_corpus_summary(dataset: &ingest::Dataset, path: &Path) {
    let m = dataset.user_count();
    let n = dataset.poi_count();
    let c = dataset.checkin_count();
    let density = c as f64 / (m as f64 * n as f64);
    println!("users {m}");
    println!("pois {n}");
    println!("check-ins {c}");
    println!("density {density:.6}");
    println!("dataset {}", path.display());
}

fn print_metric_block(prefix: &str, m: &MetricSet) {
    for (k, v) in &m.acc_at {
        println!("{prefix}acc@{k}\t{v:.6}");
    }
    println!("{prefix}mrr\t{:.6}", m.mrr);
}

fn print_report(report: &EvalReport) {
    println!("samples\t{}", report.sample_count);
    print_metric_block("", &report.metrics);
    println!("new-samples\t{}", report.n2_sample_count);
    match &report.n2 {
        Some(m) => print_metric_block("new-", m),
        None => println!("new-metrics\tundefined"),
    }
}
