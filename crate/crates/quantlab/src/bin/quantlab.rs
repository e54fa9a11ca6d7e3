//! Command-line entry point. All logic lives in the library; this binary
//! parses flags, applies overrides, dispatches, and maps errors to exit
//! codes: 0 success, 1 usage, 2 validation/leakage failure, 3 numerical.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quantlab::error::Error;
use quantlab::pipeline::{self, ablation_table, significance_table, AblationAxis, RunConfig};

#[derive(Parser)]
#[command(name = "quantlab", version, about = "Text-to-distribution quantile regression lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of retrieved neighbors.
    #[arg(long)]
    k: Option<usize>,
    /// Override the training loss.
    #[arg(long, value_parser = ["l1w", "l2w", "pinball_q", "pinball_med"])]
    loss: Option<String>,
    /// Override the monotonicity method.
    #[arg(long, value_parser = ["baseline", "cumsum", "postprocess"])]
    monotone: Option<String>,
    /// Override the prediction architecture.
    #[arg(long, value_parser = ["qr", "qt"])]
    arch: Option<String>,
    /// Build the retrieval pool from the OOD evaluation set itself.
    #[arg(long)]
    ood_pool: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::from_toml_path(&self.config)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(k) = self.k {
            cfg.retrieval.k = k;
        }
        if let Some(l) = &self.loss {
            cfg.train.loss = l.clone();
        }
        if let Some(m) = &self.monotone {
            cfg.train.monotone = m.clone();
            cfg.eval.monotone = Some(m.clone());
        }
        if let Some(a) = &self.arch {
            cfg.model.arch = a.clone();
        }
        if self.ood_pool {
            cfg.retrieval.ood_pool = true;
            cfg.eval.split = "ood".into();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: dataset, ground truth, split manifest.
    GenData {
        /// Synthetic spec file (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Build the retrieval index over the training split.
    BuildIndex {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model and write checkpoint + training log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint; emits metric reports and per-instance MAPE.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation split: train|val|test|ood.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Sweep one ablation axis and emit a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis: loss | neighbors | monotone.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Monte-Carlo theory battery; nonzero exit on any failed check.
    VerifyTheory {
        #[arg(long, default_value_t = 17041)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Paired t-test between two per-instance average-MAPE files.
    Compare {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        /// Optional output directory for the significance table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Leakage { .. } => 2,
        Error::Divergence { .. }
        | Error::NonFiniteActivation { .. }
        | Error::ExpOverflow(_)
        | Error::ZeroDenominator(_)
        | Error::ZeroVariance => 3,
        _ => 1,
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { spec, out, overwrite } => {
            let summary = pipeline::cmd_gen_data(&spec, &out, overwrite)?;
            println!(
                "generated {} records (ood {}) -> {}\ndataset_hash {}\nsplits {}/{}/{}",
                summary.count,
                summary.ood_count,
                out.display(),
                summary.dataset_hash,
                summary.train,
                summary.val,
                summary.test
            );
            Ok(0)
        }
        Command::BuildIndex { cfg, overwrite } => {
            let cfg = cfg.load()?;
            let n = pipeline::cmd_build_index(&cfg, overwrite)?;
            println!("indexed {n} training instances -> {}", cfg.retrieval.index.display());
            Ok(0)
        }
        Command::Train { cfg, out, overwrite } => {
            let cfg = cfg.load()?;
            let summary = pipeline::cmd_train(&cfg, &out, overwrite)?;
            println!(
                "trained seed {} ({} params) -> {}",
                summary.seed,
                summary.n_params,
                out.display()
            );
            Ok(0)
        }
        Command::Eval { cfg, checkpoint, out, split, overwrite } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            let result = pipeline::cmd_eval(&cfg, &checkpoint, &out, overwrite)?;
            print!("{}", result.report.to_flat_block());
            Ok(0)
        }
        Command::Ablate { cfg, axis, out } => {
            let cfg = cfg.load()?;
            let axis = AblationAxis::parse(&axis)?;
            let rows = pipeline::cmd_ablate(&cfg, axis, &out)?;
            let (aligned, _) = ablation_table(&rows, axis);
            print!("{aligned}");
            Ok(0)
        }
        Command::VerifyTheory { seed, reps, out, overwrite } => {
            let all_pass = pipeline::cmd_verify_theory(seed, reps, &out, overwrite)?;
            let text = std::fs::read_to_string(out.join("theory_report.txt"))?;
            print!("{text}");
            if all_pass {
                Ok(0)
            } else {
                eprintln!("theory battery: some checks failed");
                Ok(2)
            }
        }
        Command::Compare { report_a, report_b, out } => {
            let rep = pipeline::cmd_compare(&report_a, &report_b)?;
            let (aligned, csv) = significance_table(&rep);
            print!("{aligned}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("significance.txt"), aligned)?;
                std::fs::write(dir.join("significance.csv"), csv)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
