use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmtfd::datapipe::{synth_generate, write_records, SynthSpec};
use mmtfd::harness::gradcheck_suite::{run_suite, TOLERANCE};
use mmtfd::harness::pipeline::{embeddings_csv, evaluate, finetune, prepare_data, pretrain, write_curves};
use mmtfd::harness::{Checkpoint, RunConfig};
use mmtfd::{Error, Result};

#[derive(Parser)]
#[command(name = "mmtfd", version, about = "Few-shot fault diagnosis: pretrain, fine-tune and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic rotor records and a manifest.
    GenData {
        /// TOML synthetic spec; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        records: usize,
    },
    /// Self-supervised pretraining; writes `pretrained.ckpt` and loss curves.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on a label budget.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        label_budget: Option<f64>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate under the noise and masking protocol.
        #[arg(long)]
        corrupt: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.run.out_dir)?;
    Ok(&cfg.run.out_dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed, records } => {
            let spec = match spec {
                Some(p) => toml::from_str::<SynthSpec>(&fs::read_to_string(&p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => SynthSpec::default(),
            };
            let recs = synth_generate(&spec, records, seed)?;
            let manifest = write_records(&out, &recs)?;
            println!("wrote {} records, manifest {}", recs.len(), manifest.display());
        }
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = prepare_data(&cfg)?;
            let out = pretrain(&cfg, &data)?;
            let dir = out_dir(&cfg)?;
            let path = dir.join("pretrained.ckpt");
            out.checkpoint.save(&path)?;
            write_curves(dir, &[&out.loss, &out.align, &out.instance])?;
            match out.loss.values.last() {
                Some(l) => println!("pretrained {} iterations, final loss {l:.4}; checkpoint {}", out.loss.values.len(), path.display()),
                None => println!("initialized checkpoint {}", path.display()),
            }
        }
        Command::Finetune { config, checkpoint, label_budget } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(b) = label_budget {
                cfg.finetune.label_budget = b;
                cfg.validate()?;
            }
            let data = prepare_data(&cfg)?;
            let pre = Checkpoint::load(&checkpoint)?;
            let out = finetune(&cfg, &data, &pre)?;
            let dir = out_dir(&cfg)?;
            let path = dir.join("finetuned.ckpt");
            out.checkpoint.save(&path)?;
            write_curves(dir, &[&out.loss, &out.accuracy])?;
            println!("fine-tuned on {} labeled windows; checkpoint {}", out.labeled.len(), path.display());
        }
        Command::Eval { config, checkpoint, corrupt } => {
            let cfg = RunConfig::load(&config)?;
            let data = prepare_data(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let ev = evaluate(&cfg, &data, &ck, corrupt)?;
            let dir = out_dir(&cfg)?;
            ev.report.save(&dir.join("report.toml"))?;
            if cfg.eval.export_embeddings {
                fs::write(dir.join("embeddings.csv"), embeddings_csv(&ev))?;
            }
            println!("clean accuracy {:.4} on {} windows", ev.report.clean.accuracy, ev.report.test_windows);
            if let Some(c) = &ev.report.corrupted {
                println!("corrupted accuracy {:.4}", c.accuracy);
            }
        }
        Command::Gradcheck { seeds } => {
            let results = run_suite(seeds)?;
            let failed: Vec<_> = results.iter().filter(|c| !c.passed()).collect();
            for c in &results {
                println!("{:<24} seed {} rel err {:.2e} {}", c.name, c.seed, c.max_rel_error, if c.passed() { "ok" } else { "FAIL" });
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("{} of {} checks exceed {TOLERANCE:e}", failed.len(), results.len())));
            }
            println!("all {} checks within {TOLERANCE:e}", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
