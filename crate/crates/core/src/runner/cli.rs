use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{Ablation, TrainConfig};
use super::experiment::{self, ensure_dir, write_file, Experiment, ExperimentOptions};
use super::optim::OptimizerKind;
use crate::collapse::{self, ClassifierSnapshot, EmbeddingSet};
use crate::datakit::{format_sig, load_csv, Split};
use crate::error::{Error, Result};
use crate::etf;
use crate::netlib::{load_checkpoint, ClassifierMode, NormKind, ProjectorMode};
use crate::objective::ClsKind;
use crate::oodeval;

#[derive(Parser, Debug)]
#[command(name = "ncc", version, about = "Neural-collapse control experiments on small MLPs")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's root seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports and checkpoints
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    ablation: AblationArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long, global = true, value_enum)]
    projector: Option<ProjectorArg>,
    #[arg(long = "l2-norm", global = true, value_enum)]
    l2_norm: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    norm: Option<NormArg>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, global = true, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, global = true, value_enum)]
    classifier: Option<ClassifierArg>,
    /// Entropy-regularization weight
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProjectorArg {
    Plastic,
    FixedEtf,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    GnWs,
    Bn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Ce,
    Mse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    Plastic,
    FixedEtf,
}

impl AblationArgs {
    fn to_ablation(&self) -> Ablation {
        Ablation {
            projector: self.projector.map(|p| match p {
                ProjectorArg::Plastic => ProjectorMode::Plastic,
                ProjectorArg::FixedEtf => ProjectorMode::FixedEtf,
                ProjectorArg::None => ProjectorMode::None,
            }),
            l2_norm: self.l2_norm.map(|s| matches!(s, Switch::On)),
            norm: self.norm.map(|n| match n {
                NormArg::GnWs => NormKind::GnWs,
                NormArg::Bn => NormKind::Bn,
            }),
            loss: self.loss.map(|l| match l {
                LossArg::Ce => ClsKind::CrossEntropy,
                LossArg::Mse => ClsKind::RescaledMse,
            }),
            optimizer: self.optimizer.map(|o| match o {
                OptimizerArg::Adamw => OptimizerKind::Adamw,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            }),
            classifier: self.classifier.map(|c| match c {
                ClassifierArg::Plastic => ClassifierMode::Plastic,
                ClassifierArg::FixedEtf => ClassifierMode::FixedEtf,
            }),
            alpha: self.alpha,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the canonical simplex ETF of order D as headerless CSV
    Etf {
        #[arg(long)]
        dim: usize,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.ncc, losses.csv and run.json
    Train,
    /// NC metrics of an embedding CSV against a checkpoint's classifier
    Metrics {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// The embedding CSV has no header line
        #[arg(long)]
        no_header: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy-score FPR95 for every tap and OOD set
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// OOD linear probes on the encoder and projector outputs
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-layer collapse, probe and detection table
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and write every report
    Report,
    /// Dump activations of one tap as labeled CSV
    Export {
        /// Layer name, or encoder_out / projector_out / logits
        #[arg(long)]
        tap: String,
        /// id_train, id_test, or the name of an OOD set
        #[arg(long, default_value = "id_test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Usage(_) | Error::Config(_) = e {
                eprintln!("\nRun with --help for usage.");
            }
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("this command requires --config <path>".into()))?;
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cli.ablation.to_ablation().apply(&mut cfg)?;
    Ok(cfg)
}

fn experiment(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<Experiment> {
    match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.spec != cfg.model {
                return Err(Error::Config(
                    "checkpoint model spec differs from the configuration".into(),
                ));
            }
            Experiment::with_model(cfg, ck.model)
        }
        None => Experiment::train(cfg),
    }
}

fn write_training_if_any(dir: &Path, exp: &Experiment) -> Result<()> {
    match &exp.record {
        Some(r) => experiment::write_training(dir, &exp.cfg, r),
        None => {
            let meta = experiment::run_metadata(&exp.cfg, None, serde_json::json!({}));
            write_file(
                dir,
                "run.json",
                &(serde_json::to_string_pretty(&meta).expect("json") + "\n"),
            )
        }
    }
}

fn print_correlation(rows: &[oodeval::SweepRow]) {
    if let Ok(c) = oodeval::sweep_correlation(rows) {
        eprintln!(
            "pearson(nc1, fpr95) = {}, pearson(nc1, probe_err) = {}",
            format_sig(c.nc1_vs_fpr95, 4),
            format_sig(c.nc1_vs_probe_err, 4)
        );
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::Etf { dim, out } => {
            let csv = etf::to_csv(etf::simplex_etf(*dim)?.matrix());
            match out {
                Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let exp = experiment::prepare_data(&cfg)?;
            let record = super::train::train(&cfg, &exp.id_train)?;
            experiment::write_training(dir, &cfg, &record)?;
            let last = record.epochs.last();
            eprintln!(
                "trained {} epochs; final loss {}",
                record.epochs.len(),
                last.map_or("n/a".into(), |e| format_sig(e.loss, 6))
            );
            Ok(())
        }
        Command::Metrics {
            embeddings,
            checkpoint,
            no_header,
            out,
        } => {
            let ds = load_csv(embeddings, !no_header)?;
            let model = load_checkpoint(checkpoint)?.model;
            let w = model.params.get("classifier.weight").expect("classifier").clone();
            let b = model
                .params
                .get("classifier.bias")
                .map(|t| t.data().to_vec())
                .unwrap_or(vec![0.0; w.rows()]);
            let snap = ClassifierSnapshot::new(w, b)?;
            let e = EmbeddingSet::new(
                ds.features,
                ds.labels,
                snap.num_classes().max(ds.num_classes),
                "embeddings",
                Split::IdTest,
            )?;
            let r = collapse::nc_report(&e, Some(&snap))?;
            let csv = format!(
                "nc1,nc2,nc3,nc4,rankme,entropy\n{},{},{},{},{},{}\n",
                format_sig(r.nc1, 6),
                format_sig(r.nc2, 6),
                format_sig(r.nc3, 6),
                format_sig(r.nc4, 6),
                format_sig(r.rankme, 6),
                format_sig(r.entropy_est, 6)
            );
            match out {
                Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Detect { checkpoint } => {
            let cfg = load_config(cli)?;
            let exp = experiment(&cfg, checkpoint.as_deref())?;
            ensure_dir(dir)?;
            write_training_if_any(dir, &exp)?;
            write_file(dir, "detection.csv", &experiment::detection_csv(&exp.detection()?))
        }
        Command::Probe { checkpoint } => {
            let cfg = load_config(cli)?;
            let exp = experiment(&cfg, checkpoint.as_deref())?;
            ensure_dir(dir)?;
            write_training_if_any(dir, &exp)?;
            write_file(dir, "probe.csv", &experiment::probe_csv(&exp.probes()?))
        }
        Command::Sweep { checkpoint } => {
            let cfg = load_config(cli)?;
            let exp = experiment(&cfg, checkpoint.as_deref())?;
            ensure_dir(dir)?;
            write_training_if_any(dir, &exp)?;
            let rows = exp.sweep()?;
            write_file(dir, "sweep.csv", &oodeval::sweep_csv(&rows))?;
            print_correlation(&rows);
            Ok(())
        }
        Command::Report => {
            let cfg = load_config(cli)?;
            let (_, report) = experiment::run_experiment(&cfg, Some(dir), ExperimentOptions::default())?;
            eprint!("{}", experiment::summary_csv(&report.summary));
            print_correlation(&report.sweep);
            Ok(())
        }
        Command::Export {
            tap,
            split,
            checkpoint,
            out,
        } => {
            let cfg = load_config(cli)?;
            let data = experiment::prepare_data(&cfg)?;
            let model = match checkpoint {
                Some(p) => load_checkpoint(p)?.model,
                None => super::train::train(&cfg, &data.id_train)?.model,
            };
            let ds = match split.as_str() {
                "id_train" => &data.id_train,
                "id_test" => &data.id_test,
                name => {
                    &data
                        .oods
                        .iter()
                        .find(|o| o.name == name)
                        .ok_or_else(|| Error::Usage(format!("unknown split {name:?}")))?
                        .all
                }
            };
            experiment::export_embeddings(&model, ds, tap, out)
        }
    }
}
