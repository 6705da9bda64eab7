//! `mape`: command-line driver for the experiment harness.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mape_core::harness::{
    build_mask, export_plotdata, prepare, replay_phase, run_experiment_with, write_plotdata, ExperimentConfig,
    RunRecord, Scenario, CONFIG_FILE, OUT_DIR_ENV, THETA_STAR_FILE,
};
use mape_core::maskselect::mask_to_text;
use mape_core::tinyformer::io::{load_model, save_model};
use mape_core::unlearn::{MaskSource, Method};

#[derive(Parser)]
#[command(name = "mape", version, about = "Module-aware unlearning experiments on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data and train the original model.
    Train(Common),
    /// Select a module mask and write it as text.
    SelectMask {
        #[command(flatten)]
        common: Common,
        /// Write the mask here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unlearn the forget set once per sparsity.
    Unlearn(Common),
    /// Unlearn over the sparsity grid.
    Sweep(Common),
    /// Remove forget samples one request at a time.
    Successive(Common),
    /// Remove the forget set in one batch, alongside the successive run.
    Batch(Common),
    /// Unlearn, then attack by relearning on retain data.
    Relearn(Common),
    /// Print a run's metrics; `--replay` re-evaluates every saved model.
    Evaluate {
        run_dir: PathBuf,
        #[arg(long)]
        replay: bool,
    },
    /// Merge finished runs into one long-format plot table.
    Export {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sparsity levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    sparsity: Vec<f64>,
    #[arg(long)]
    method: Option<Method>,
    /// none, mlr, mlf, sure, premask, or a mask file path.
    #[arg(long)]
    mask_source: Option<MaskSource>,
    /// Output root for run directories.
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Reuse a trained original model instead of training.
    #[arg(long)]
    theta_star: Option<PathBuf>,
}

impl Common {
    fn config(&self, scenario: Option<Scenario>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = scenario {
            c.scenario = s;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if !self.sparsity.is_empty() {
            c.sparsities = self.sparsity.clone();
        }
        if let Some(m) = self.method {
            c.unlearn.method = m;
        }
        if let Some(src) = &self.mask_source {
            c.unlearn.mask_source = src.clone();
        }
        if let Some(dir) = &self.out_dir {
            c.output_dir = Some(dir.clone());
        }
        c.validate()?;
        Ok(c)
    }

    fn theta_star(&self) -> Result<Option<mape_core::tinyformer::ModelState>> {
        self.theta_star
            .as_ref()
            .map(|p| load_model(p).with_context(|| format!("loading {}", p.display())))
            .transpose()
    }
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = common.config(None)?;
            let prepared = prepare(&config, common.theta_star()?)?;
            let dir = config.run_dir();
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(CONFIG_FILE), prepared.config.to_json())?;
            let path = dir.join(THETA_STAR_FILE);
            save_model(&prepared.theta_star, &path)?;
            println!("{}", path.display());
        }
        Command::SelectMask { common, out } => {
            let config = common.config(None)?;
            let prepared = prepare(&config, common.theta_star()?)?;
            let sparsity = config.sparsities[0];
            let (mask, sense) = build_mask(
                &config.unlearn.mask_source,
                &prepared.theta_star,
                &prepared.forget(),
                &prepared.retain(),
                sparsity,
            )?
            .context("mask source `none` selects no mask")?;
            let text = mask_to_text(&mask, sense);
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Unlearn(c) => scenario(&c, Scenario::Single)?,
        Command::Sweep(c) => scenario(&c, Scenario::Sweep)?,
        Command::Successive(c) => scenario(&c, Scenario::Successive)?,
        Command::Batch(c) => scenario(&c, Scenario::Batch)?,
        Command::Relearn(c) => scenario(&c, Scenario::Relearn)?,
        Command::Evaluate { run_dir, replay } => evaluate(&run_dir, replay)?,
        Command::Export { run_dirs, out } => {
            let records = run_dirs
                .iter()
                .map(|d| RunRecord::load(d).with_context(|| format!("loading {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            let rows = export_plotdata(&records)?;
            match out {
                Some(p) => write_plotdata(&rows, BufWriter::new(File::create(&p)?))?,
                None => write_plotdata(&rows, io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn scenario(common: &Common, scenario: Scenario) -> Result<()> {
    let config = common.config(Some(scenario))?;
    let record = run_experiment_with(&config, common.theta_star()?)?;
    println!("{}", record.run_dir.display());
    Ok(())
}

fn evaluate(run_dir: &Path, replay: bool) -> Result<()> {
    let record = RunRecord::load(run_dir).with_context(|| format!("loading {}", run_dir.display()))?;
    if let Some(e) = &record.error {
        bail!("run failed in phase `{}`: {}", e.phase, e.message);
    }
    if replay {
        for phase in record.phases.iter().filter(|p| p.model_file.is_some()) {
            if replay_phase(&record, phase)? != phase.metrics {
                bail!("replay of {} {} step {} differs from the record", phase.phase, phase.method, phase.step);
            }
        }
    }
    let mut out = io::stdout().lock();
    record.write_metrics_csv(&mut out)?;
    out.flush()?;
    Ok(())
}
