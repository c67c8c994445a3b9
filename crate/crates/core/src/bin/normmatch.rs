use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use normmatch::checkpoint::{Checkpoint, EpochMetrics};
use normmatch::config::TrainConfig;
use normmatch::dataset::read_pairs;
use normmatch::gradcheck::GradCheckConfig;
use normmatch::harness::{load_datasets, prepare_records};
use normmatch::model::Model;
use normmatch::suite::{gradient_suite, GradModule};
use normmatch::synth::{generate_dataset, SyntheticPairSpec};
use normmatch::train::{evaluate, history_csv, Trainer};
use normmatch::Result;

#[derive(Parser)]
#[command(name = "normmatch", version, about = "Sparse keypoint matching with a normalized transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing checkpoints and metrics to a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class accuracy of a checkpoint on a pair file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Print the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Match every pair in a file and dump the plan, one JSON object per line.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair: PathBuf,
    },
    /// Finite-difference checks on random small instances.
    Gradcheck {
        /// gnn, transformer or losses; all three when omitted.
        #[arg(long)]
        module: Option<GradModule>,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic pair file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            pairs,
            json,
        } => eval(&checkpoint, &pairs, json),
        Command::Match { checkpoint, pair } => match_pairs(&checkpoint, &pair),
        Command::Gradcheck {
            module,
            instances,
            seed,
        } => gradcheck(module, instances, seed),
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Names the missing file, which the bare OS error does not.
fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display())).into())
    }
}

fn write_metrics(out: &Path, history: &[EpochMetrics]) -> Result<()> {
    fs::write(out.join("metrics.csv"), history_csv(history))?;
    let rows: Vec<_> = history
        .iter()
        .map(|e| {
            json!({
                "epoch": e.epoch,
                "lr": e.lr,
                "train_loss": e.train_loss,
                "steps": e.steps,
                "val_accuracy": e.val_accuracy,
            })
        })
        .collect();
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<bool> {
    need(config)?;
    let cfg = TrainConfig::load(config)?;
    fs::create_dir_all(out)?;
    let t0 = Instant::now();
    let (train, val) = load_datasets(&cfg)?;
    eprintln!("{} training pairs, {} validation pairs", train.len(), val.len());
    let model = Model::new(&cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            need(p)?;
            Trainer::from_checkpoint(&model, &Checkpoint::load(p)?)?
        }
        None => Trainer::new(&model)?,
    };
    let result = trainer.train(&train, &val, |t, m| {
        eprintln!(
            "epoch {:>2}  lr {:.1e}  loss {:.4}  val {:.1}%  {:.0}s",
            m.epoch,
            m.lr,
            m.train_loss,
            100.0 * m.val_accuracy,
            t0.elapsed().as_secs_f64()
        );
        let ck = t.checkpoint();
        ck.save(&out.join(format!("epoch_{:02}.nmtc", m.epoch)))?;
        ck.save(&out.join("last.nmtc"))?;
        write_metrics(out, &t.history)
    });
    if let Err(e) = result {
        eprintln!("training stopped; {} holds the last completed epoch", out.join("last.nmtc").display());
        return Err(e);
    }
    let report = evaluate(&model, &trainer.store, &val)?;
    fs::write(out.join("eval.json"), report.to_json())?;
    print!("{}", report.to_table());
    Ok(true)
}

fn load_model(checkpoint: &Path) -> Result<(Model, normmatch::ParameterStore)> {
    need(checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = Model::new(&ck.config)?;
    let store = Trainer::from_checkpoint(&model, &ck)?.store;
    Ok((model, store))
}

fn eval(checkpoint: &Path, pairs: &Path, as_json: bool) -> Result<bool> {
    let (model, store) = load_model(checkpoint)?;
    need(pairs)?;
    let recs = read_pairs(pairs)?;
    let prepared = prepare_records(&model.config, &recs, Some(pairs))?;
    let report = evaluate(&model, &store, &prepared)?;
    if as_json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(true)
}

fn match_pairs(checkpoint: &Path, pair: &Path) -> Result<bool> {
    let (model, store) = load_model(checkpoint)?;
    need(pair)?;
    let recs = read_pairs(pair)?;
    for p in prepare_records(&model.config, &recs, Some(pair))? {
        let inf = model.infer(&store, &p)?;
        let plan: Vec<&[f64]> = inf.plan.values.data().chunks(p.len().max(1)).collect();
        let line = json!({
            "pair_id": p.pair_id,
            "assignment": inf.matching.assignment,
            "marginal_error": inf.plan.max_marginal_error,
            "non_injective": inf.matching.non_injective,
            "scores": inf.scores,
            "plan": plan,
        });
        println!("{line}");
    }
    Ok(true)
}

fn gradcheck(module: Option<GradModule>, instances: usize, seed: u64) -> Result<bool> {
    let modules = match module {
        Some(m) => vec![m],
        None => GradModule::ALL.to_vec(),
    };
    let cfg = GradCheckConfig::default();
    let mut all_ok = true;
    for m in modules {
        let reports = gradient_suite(m, instances, seed, &cfg)?;
        let failed = reports.iter().filter(|r| !r.passed()).count();
        let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
        println!(
            "{:<12} instances {:>3}  failed {:>3}  max_rel_err {:.3e}  {}",
            m.to_string(),
            reports.len(),
            failed,
            worst,
            if failed == 0 { "PASS" } else { "FAIL" }
        );
        for (i, r) in reports.iter().enumerate().filter(|(_, r)| !r.passed()) {
            println!("  seed {}:\n{r}", seed + i as u64);
        }
        all_ok &= failed == 0;
    }
    Ok(all_ok)
}

fn gen_data(spec: &Path, out: &Path, seed: u64) -> Result<bool> {
    need(spec)?;
    let spec = SyntheticPairSpec::parse(&fs::read_to_string(spec)?)?;
    let pairs = generate_dataset(&spec, seed)?;
    normmatch::dataset::write_pairs(out, &pairs)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(true)
}
