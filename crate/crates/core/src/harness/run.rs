//! End-to-end scenario execution and the persisted run record.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario};
use super::data::{gen_synthetic, DatasetBundle};
use super::fmt_f64;
use crate::error::{Error, Result};
use crate::evalattack::{evaluate, relearn_attack, MetricsReport, RelearnTrajectory};
use crate::fisher::diag_fim_masks;
use crate::maskselect::{
    build_mlf_problem, build_mlr_problem, mask_from_text, mask_to_text, select_mask, successive_premask, sure_select,
    Sense,
};
use crate::successive::{run_batch, run_iterative, run_stored_info, write_trajectory_csv, MaskMode, StepRecord};
use crate::tinyformer::io::{load_model, save_model};
use crate::tinyformer::{train, MaskPair, ModelState, Sample, TrainHParams};
use crate::unlearn::{
    finetune_unlearn, mape_so_update, rt_retrain, sa_unlearn, so_update, MaskSource, Method, UnlearnHParams,
};

pub const SOURCE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const THETA_STAR_FILE: &str = "theta_star.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

/// Metrics of one evaluated model. File paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub method: String,
    pub sparsity: f64,
    /// Request count for successive rows, 0 otherwise.
    pub step: usize,
    /// Ids evaluated as the forget split; retain is train minus these.
    pub forget_ids: Vec<usize>,
    pub metrics: MetricsReport,
    pub model_file: Option<PathBuf>,
    pub mask_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnRecord {
    pub method: String,
    pub sparsity: f64,
    pub threshold: f64,
    pub epochs_to_recover: Option<usize>,
    pub recovery_score: usize,
    pub trajectory_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseError {
    pub phase: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub source_version: String,
    /// The config with every phase seed filled in.
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub phases: Vec<PhaseRecord>,
    pub relearn: Vec<RelearnRecord>,
    pub trajectory_file: Option<PathBuf>,
    pub timings: Vec<Timing>,
    pub error: Option<PhaseError>,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<RunRecord> {
        Ok(serde_json::from_reader(File::open(run_dir.join(RECORD_FILE))?)?)
    }

    /// Rows of the given phase, in recorded order.
    pub fn phase(&self, phase: &str) -> Vec<&PhaseRecord> {
        self.phases.iter().filter(|p| p.phase == phase).collect()
    }

    /// Deterministic metrics table (wall time is left out).
    pub fn write_metrics_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "phase",
            "method",
            "sparsity",
            "step",
            "forget_acc",
            "retain_acc",
            "test_acc",
            "mia",
            "params_changed_fraction",
        ])?;
        for p in &self.phases {
            let m = &p.metrics;
            wr.write_record([
                p.phase.clone(),
                p.method.clone(),
                fmt_f64(p.sparsity),
                p.step.to_string(),
                fmt_f64(m.forget_acc),
                fmt_f64(m.retain_acc),
                fmt_f64(m.test_acc),
                fmt_f64(m.mia_score),
                fmt_f64(m.params_changed_fraction),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Data and original model shared by every scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub data: DatasetBundle,
    pub theta_star: ModelState,
}

impl Prepared {
    pub fn forget(&self) -> Vec<Sample> {
        self.data.forget()
    }

    pub fn retain(&self) -> Vec<Sample> {
        self.data.retain()
    }

    /// Metrics of `state` against the bundle splits, measured from `θ*`.
    pub fn evaluate(&self, state: &ModelState, forget_ids: &[usize], wall: Duration) -> Result<MetricsReport> {
        let (forget, retain) = split_by(&self.data.train, forget_ids)?;
        evaluate(state, &self.theta_star, &forget, &retain, &self.data.test, wall)
    }
}

fn split_by(train: &[Sample], forget_ids: &[usize]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ids: HashSet<usize> = forget_ids.iter().copied().collect();
    let (forget, retain): (Vec<Sample>, Vec<Sample>) = train.iter().cloned().partition(|s| ids.contains(&s.id));
    if forget.len() != ids.len() {
        let known: HashSet<usize> = forget.iter().map(|s| s.id).collect();
        let missing = ids.iter().copied().find(|i| !known.contains(i)).unwrap_or_default();
        return Err(Error::UnknownId(missing));
    }
    Ok((forget, retain))
}

/// Generates the data split for a config's resolved seeds.
pub fn generate_data(config: &ExperimentConfig) -> Result<DatasetBundle> {
    let data = gen_synthetic(&config.task, config.seeds().data)?;
    data.check_hygiene()?;
    Ok(data)
}

/// Trains `θ*` on the full training split.
pub fn train_original(config: &ExperimentConfig, data: &DatasetBundle) -> Result<ModelState> {
    let c = config.resolved();
    Ok(train(&c.model, &data.train, None, &c.train)?.state)
}

/// Data generation plus training; `theta_star` reuses a saved model instead.
pub fn prepare(config: &ExperimentConfig, theta_star: Option<ModelState>) -> Result<Prepared> {
    config.validate()?;
    let config = config.resolved();
    let data = generate_data(&config).map_err(|e| e.in_phase("data"))?;
    let theta_star = match theta_star {
        Some(s) => {
            if s.config != config.model {
                return Err(Error::InvalidConfig("saved model does not match the config".into()).in_phase("train"));
            }
            s
        }
        None => train_original(&config, &data).map_err(|e| e.in_phase("train"))?,
    };
    Ok(Prepared {
        config,
        data,
        theta_star,
    })
}

/// Mask for `source` at `sparsity`, or `None` for unmasked updates.
pub fn build_mask(
    source: &MaskSource,
    state: &ModelState,
    forget: &[Sample],
    retain: &[Sample],
    sparsity: f64,
) -> Result<Option<(MaskPair, Option<Sense>)>> {
    Ok(match source {
        MaskSource::None => None,
        MaskSource::Mlr => Some((select_mask(&build_mlr_problem(state, forget, retain, sparsity)?)?, Some(Sense::Mlr))),
        MaskSource::Mlf => Some((select_mask(&build_mlf_problem(state, forget, retain, sparsity)?)?, Some(Sense::Mlf))),
        MaskSource::Sure => Some((sure_select(state, forget, sparsity)?, None)),
        MaskSource::Premask => {
            let diag = diag_fim_masks(state, retain)?;
            Some((successive_premask(&diag, state.config.layer_layout(), sparsity)?, None))
        }
        MaskSource::File(p) => {
            let (mask, sense) = mask_from_text(&fs::read_to_string(p)?)?;
            mask.check_bound(&state.config)?;
            Some((mask, sense))
        }
    })
}

/// Applies one unlearning method. SO, SA and RT ignore the mask; MAPE-SO requires one.
pub fn apply_method(
    prepared: &Prepared,
    mask: Option<&MaskPair>,
    forget: &[Sample],
    retain: &[Sample],
    hp: &UnlearnHParams,
) -> Result<ModelState> {
    let theta = &prepared.theta_star;
    match hp.method {
        Method::So => so_update(theta, forget, retain, hp),
        Method::MapeSo => {
            let mask = mask.ok_or_else(|| Error::InvalidHParam("MAPE-SO needs a mask source".into()))?;
            mape_so_update(theta, mask, forget, retain, hp)
        }
        Method::Sa => sa_unlearn(theta, retain, hp),
        Method::Rt => {
            let c = &prepared.config;
            let hp = TrainHParams {
                seed: c.seeds().unlearn,
                ..c.train
            };
            rt_retrain(&c.model, retain, &hp)
        }
        _ => finetune_unlearn(theta, mask, forget, retain, hp),
    }
}

fn uses_mask(method: Method) -> bool {
    method == Method::MapeSo || method.is_finetune()
}

fn label(method: &str, sparsity: f64) -> String {
    format!("{}_s{}", method.to_ascii_lowercase(), sparsity)
}

/// Relearn set: `fraction · |train|` samples drawn from retain with the attack seed.
pub fn relearn_set(prepared: &Prepared) -> Vec<Sample> {
    let retain = prepared.retain();
    let n = ((prepared.config.relearn.fraction * prepared.data.train.len() as f64).round() as usize).min(retain.len());
    let mut rng = ChaCha8Rng::seed_from_u64(prepared.config.seeds().attack);
    let mut picked = index::sample(&mut rng, retain.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| retain[i].clone()).collect()
}

/// The relearn attack with the config's settings; threshold from `θ*`'s forget accuracy.
pub fn attack(prepared: &Prepared, state: &ModelState) -> Result<RelearnTrajectory> {
    let r = &prepared.config.relearn;
    let forget = prepared.forget();
    let base = crate::evalattack::accuracy(&prepared.theta_star, &forget)?;
    let hp = TrainHParams {
        epochs: r.epochs,
        batch_size: r.batch_size,
        lr: r.lr,
        momentum: r.momentum,
        linear_decay: false,
        seed: prepared.config.seeds().attack,
    };
    relearn_attack(state, &relearn_set(prepared), &forget, &prepared.data.test, base - r.threshold_margin, &hp)
}

struct Runner<'a> {
    dir: &'a Path,
    prepared: Prepared,
    record: RunRecord,
}

impl Runner<'_> {
    fn timed<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.record.timings.push(Timing {
            phase: phase.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn save_model(&self, state: &ModelState, name: &str) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("model_{name}.bin"));
        save_model(state, &self.dir.join(&rel))?;
        Ok(rel)
    }

    fn save_mask(&self, mask: &MaskPair, sense: Option<Sense>, name: &str) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("mask_{name}.txt"));
        fs::write(self.dir.join(&rel), mask_to_text(mask, sense))?;
        Ok(rel)
    }

    /// Unlearns with `hp` at `sparsity`, saving model and mask, and records metrics.
    fn unlearn_cell(&mut self, phase: &str, hp: &UnlearnHParams, sparsity: f64) -> Result<ModelState> {
        let start = Instant::now();
        let forget = self.prepared.forget();
        let retain = self.prepared.retain();
        let mask = if uses_mask(hp.method) {
            build_mask(&hp.mask_source, &self.prepared.theta_star, &forget, &retain, sparsity)?
        } else {
            None
        };
        let state = apply_method(&self.prepared, mask.as_ref().map(|m| &m.0), &forget, &retain, hp)?;
        let wall = start.elapsed();
        let cell_sparsity = mask.as_ref().map_or(0.0, |m| m.0.sparsity);
        let name = label(hp.method.name(), cell_sparsity);
        let mask_file = match &mask {
            Some((m, sense)) => Some(self.save_mask(m, *sense, &name)?),
            None => None,
        };
        let model_file = Some(self.save_model(&state, &name)?);
        let metrics = self.prepared.evaluate(&state, &self.prepared.data.forget_ids, wall)?;
        self.record.phases.push(PhaseRecord {
            phase: phase.into(),
            method: hp.method.name().into(),
            sparsity: cell_sparsity,
            step: 0,
            forget_ids: self.prepared.data.forget_ids.clone(),
            metrics,
            model_file,
            mask_file,
        });
        Ok(state)
    }

    fn push_steps(&mut self, rows: Vec<(ModelState, StepRecord)>, requests: &[usize]) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(rows.len());
        let last = rows.len();
        for (i, (state, step)) in rows.into_iter().enumerate() {
            let model_file = if i + 1 == last {
                Some(self.save_model(&state, &format!("{}_final", label(&step.method, step.sparsity)))?)
            } else {
                None
            };
            let mut forget_ids = requests[..step.t.min(requests.len())].to_vec();
            forget_ids.sort_unstable();
            self.record.phases.push(PhaseRecord {
                phase: "successive".into(),
                method: step.method.clone(),
                sparsity: step.sparsity,
                step: step.t,
                forget_ids,
                metrics: step.metrics.clone(),
                model_file,
                mask_file: None,
            });
            out.push(step);
        }
        Ok(out)
    }

    fn requests(&self) -> Result<Vec<usize>> {
        let n = self.prepared.config.successive.requests;
        let ids = &self.prepared.data.forget_ids;
        if n == 0 || n > ids.len() {
            return Err(Error::InvalidConfig(format!("{n} requests with {} forget ids", ids.len())));
        }
        Ok(ids[..n].to_vec())
    }

    fn successive(&mut self) -> Result<()> {
        let c = self.prepared.config.clone();
        let requests = self.requests()?;
        let sparsity = c.sparsities[0];
        let hp = c.unlearn.clone();
        let theta = self.prepared.theta_star.clone();
        let (train, test) = (&self.prepared.data.train, &self.prepared.data.test);
        let runs: Vec<Vec<(ModelState, StepRecord)>> = if c.successive.stored_info {
            let diag = diag_fim_masks(&theta, train)?;
            let premask = successive_premask(&diag, theta.config.layer_layout(), sparsity)?;
            vec![
                run_stored_info(&theta, train, test, &requests, None, false, &hp)?.0,
                run_stored_info(&theta, train, test, &requests, Some(&premask), c.successive.refine_premask, &hp)?.0,
            ]
        } else {
            vec![
                run_iterative(&theta, train, test, &requests, MaskMode::Full, &hp)?,
                run_iterative(&theta, train, test, &requests, MaskMode::Mlr { sparsity }, &hp)?,
            ]
        };
        let mut all = Vec::new();
        for rows in runs {
            all.extend(self.push_steps(rows, &requests)?);
        }
        let rel = PathBuf::from(TRAJECTORY_FILE);
        write_trajectory_csv(&all, BufWriter::new(File::create(self.dir.join(&rel))?))?;
        self.record.trajectory_file = Some(rel);
        Ok(())
    }

    fn batch(&mut self) -> Result<()> {
        let c = self.prepared.config.clone();
        let requests = self.requests()?;
        let theta = self.prepared.theta_star.clone();
        let (train, test) = (&self.prepared.data.train, &self.prepared.data.test);
        let rows = vec![
            run_batch(&theta, train, test, &requests, MaskMode::Full, &c.unlearn)?,
            run_batch(&theta, train, test, &requests, MaskMode::Mlr { sparsity: c.sparsities[0] }, &c.unlearn)?,
        ];
        let steps = self.push_steps_batch(rows, &requests)?;
        let rel = PathBuf::from(TRAJECTORY_FILE);
        write_trajectory_csv(&steps, BufWriter::new(File::create(self.dir.join(&rel))?))?;
        self.record.trajectory_file = Some(rel);
        Ok(())
    }

    fn push_steps_batch(&mut self, rows: Vec<(ModelState, StepRecord)>, requests: &[usize]) -> Result<Vec<StepRecord>> {
        let mut steps = Vec::new();
        for row in rows {
            steps.extend(self.push_steps(vec![row], requests)?);
        }
        for p in self.record.phases.iter_mut().filter(|p| p.phase == "successive") {
            p.phase = "batch".into();
        }
        Ok(steps)
    }

    fn relearn(&mut self) -> Result<()> {
        let c = self.prepared.config.clone();
        let sparsity = c.sparsities[0];
        let masked_hp = c.unlearn.clone();
        let full_hp = UnlearnHParams {
            mask_source: MaskSource::None,
            ..c.unlearn.clone()
        };
        let masked = self.unlearn_cell("unlearn", &masked_hp, sparsity)?;
        let full = self.unlearn_cell("unlearn", &full_hp, sparsity)?;
        let cells = [
            (masked, self.record.phases[self.record.phases.len() - 2].sparsity),
            (full, 0.0),
        ];
        for (state, s) in cells {
            let traj = self.timed("attack", |r| attack(&r.prepared, &state))?;
            let rel = PathBuf::from(format!("relearn_{}.csv", label(c.unlearn.method.name(), s)));
            traj.write_csv(BufWriter::new(File::create(self.dir.join(&rel))?))?;
            self.record.relearn.push(RelearnRecord {
                method: c.unlearn.method.name().into(),
                sparsity: s,
                threshold: traj.threshold,
                epochs_to_recover: traj.epochs_to_recover,
                recovery_score: traj.recovery_score(),
                trajectory_file: rel,
            });
        }
        Ok(())
    }

    fn scenario(&mut self) -> Result<()> {
        let c = self.prepared.config.clone();
        match c.scenario {
            Scenario::Single => self.unlearn_cell("unlearn", &c.unlearn, c.sparsities[0]).map(|_| ()),
            Scenario::Sweep => c
                .sparsities
                .iter()
                .try_for_each(|&s| self.unlearn_cell("unlearn", &c.unlearn, s).map(|_| ())),
            Scenario::Successive => self.successive(),
            Scenario::Batch => self.batch(),
            Scenario::Relearn => self.relearn(),
        }
    }

    fn finish(&self) -> Result<()> {
        fs::write(self.dir.join(RECORD_FILE), serde_json::to_string_pretty(&self.record)?)?;
        self.record
            .write_metrics_csv(BufWriter::new(File::create(self.dir.join(METRICS_FILE))?))
    }
}

/// Runs a scenario end to end into `config.run_dir()`, overwriting earlier
/// output. A failing phase is written to the record before the error returns.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    run_experiment_with(config, None)
}

/// As [`run_experiment`], reusing a trained `θ*` when given.
pub fn run_experiment_with(config: &ExperimentConfig, theta_star: Option<ModelState>) -> Result<RunRecord> {
    config.validate()?;
    let dir = config.run_dir();
    fs::create_dir_all(&dir)?;
    let resolved = config.resolved();
    fs::write(dir.join(CONFIG_FILE), resolved.to_json())?;
    let mut record = RunRecord {
        config_hash: config.hash(),
        source_version: SOURCE_VERSION.into(),
        config: resolved,
        run_dir: dir.clone(),
        phases: Vec::new(),
        relearn: Vec::new(),
        trajectory_file: None,
        timings: Vec::new(),
        error: None,
    };
    let start = Instant::now();
    let prepared = match prepare(config, theta_star) {
        Ok(p) => p,
        Err(e) => {
            let phase = match &e {
                Error::Phase { phase, .. } => *phase,
                _ => "prepare",
            };
            record.error = Some(PhaseError {
                phase: phase.into(),
                message: e.to_string(),
            });
            fs::write(dir.join(RECORD_FILE), serde_json::to_string_pretty(&record)?)?;
            return Err(e);
        }
    };
    record.timings.push(Timing {
        phase: "prepare".into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    let mut runner = Runner {
        dir: &dir,
        prepared,
        record,
    };
    save_model(&runner.prepared.theta_star, &dir.join(THETA_STAR_FILE))?;
    let theta = runner.prepared.theta_star.clone();
    let base = runner.prepared.evaluate(&theta, &runner.prepared.data.forget_ids.clone(), Duration::ZERO)?;
    runner.record.phases.push(PhaseRecord {
        phase: "original".into(),
        method: "ORIGINAL".into(),
        sparsity: 0.0,
        step: 0,
        forget_ids: runner.prepared.data.forget_ids.clone(),
        metrics: base,
        model_file: Some(THETA_STAR_FILE.into()),
        mask_file: None,
    });
    let outcome = runner.timed("scenario", |r| r.scenario());
    if let Err(e) = outcome {
        runner.record.error = Some(PhaseError {
            phase: "scenario".into(),
            message: e.to_string(),
        });
        runner.finish()?;
        return Err(e.in_phase("scenario"));
    }
    runner.finish()?;
    Ok(runner.record)
}

/// Re-evaluates a recorded model file; metrics match the record except wall time.
pub fn replay_phase(record: &RunRecord, phase: &PhaseRecord) -> Result<MetricsReport> {
    let file = phase
        .model_file
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("phase has no model file".into()))?;
    let data = generate_data(&record.config)?;
    let theta_star = load_model(&record.run_dir.join(THETA_STAR_FILE))?;
    let state = load_model(&record.run_dir.join(file))?;
    let (forget, retain) = split_by(&data.train, &phase.forget_ids)?;
    let mut m = evaluate(&state, &theta_star, &forget, &retain, &data.test, Duration::ZERO)?;
    m.wall_time = phase.metrics.wall_time;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TaskParams;
    use crate::tinyformer::ModelConfig;

    fn tiny(scenario: Scenario, dir: &Path) -> ExperimentConfig {
        let task = TaskParams {
            num_train: 120,
            num_test: 40,
            seq_len: 6,
            vocab_size: 16,
            content_classes: 2,
            motif_pool: 4,
            zipf_exponent: 0.0,
            forget_count: 8,
        };
        let mut c = ExperimentConfig {
            scenario,
            model: ModelConfig {
                num_layers: 1,
                num_heads: 2,
                d_model: 8,
                d_ff: 8,
                vocab_size: 16,
                num_classes: 3,
                max_seq_len: 6,
                seed: 0,
            },
            task,
            output_dir: Some(dir.to_path_buf()),
            sparsities: vec![0.5],
            ..ExperimentConfig::default()
        };
        c.train.epochs = 3;
        c.unlearn.epochs = 1;
        c.relearn.epochs = 2;
        c.successive.requests = 3;
        c
    }

    #[test]
    fn rt_single_run_has_no_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(Scenario::Single, dir.path());
        c.unlearn.method = Method::Rt;
        let rec = run_experiment(&c).unwrap();
        let cells = rec.phase("unlearn");
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].method, "RT");
        assert!(cells[0].mask_file.is_none());
        assert!(rec.error.is_none());
    }

    #[test]
    fn rerun_is_bit_identical_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(Scenario::Sweep, dir.path());
        c.sparsities = vec![0.0, 0.5, 0.9];
        let rec = run_experiment(&c).unwrap();
        assert_eq!(rec.phase("unlearn").len(), 3);
        let first = fs::read(rec.run_dir.join(METRICS_FILE)).unwrap();
        let again = run_experiment(&c).unwrap();
        assert_eq!(first, fs::read(again.run_dir.join(METRICS_FILE)).unwrap());
        for p in &rec.phases {
            assert_eq!(replay_phase(&rec, p).unwrap(), p.metrics);
        }
        assert_eq!(RunRecord::load(&rec.run_dir).unwrap(), again);
    }

    #[test]
    fn successive_and_relearn_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(Scenario::Successive, dir.path());
        c.unlearn.method = Method::So;
        c.unlearn.optimizer = crate::unlearn::Optimizer::Sgd;
        let rec = run_experiment(&c).unwrap();
        assert_eq!(rec.phase("successive").len(), 6);
        assert!(rec.run_dir.join(TRAJECTORY_FILE).exists());
        let c = tiny(Scenario::Relearn, dir.path());
        let rec = run_experiment(&c).unwrap();
        assert_eq!(rec.relearn.len(), 2);
        for r in &rec.relearn {
            assert!(rec.run_dir.join(&r.trajectory_file).exists());
        }
    }

    #[test]
    fn failure_is_recorded_with_phase() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(Scenario::Successive, dir.path());
        c.successive.requests = 50;
        let err = run_experiment(&c).unwrap_err();
        assert!(matches!(err, Error::Phase { phase: "scenario", .. }));
        let rec = RunRecord::load(&c.run_dir()).unwrap();
        assert_eq!(rec.error.unwrap().phase, "scenario");
    }
}
