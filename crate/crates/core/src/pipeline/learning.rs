use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExplorationConfig};
use crate::dynamics::save_trajectory;
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_parameters, EstimationConfig, EstimationReport, TransitionBuffer,
};
use crate::motor::ArxModel;
use crate::records::{aligned_table, write_jsonl};
use crate::residual::{fit_residual, HybridModel};
use crate::rng::derive_seed;

use super::agent::{AgentConfig, AgentController};
use super::calibration::{identify_motor, rings_with_at_least, MotorReport};
use super::episode::{per_ring_times, rollout_episode, EpisodeOptions, EpisodeRecord};

const KIND_TRAIN: u64 = 0;
const KIND_EVAL: u64 = 1;
/// Episode ids of evaluation rollouts start here so they never collide
/// with training ids.
const EVAL_EPISODE_BASE: usize = 1_000_000;

/// Evaluation stage label: `CMA-ES`, then `CMA-ES+GP1`, `CMA-ES+GP2`, ...
pub fn stage_label(stage: usize) -> String {
    if stage == 0 {
        "CMA-ES".into()
    } else {
        format!("CMA-ES+GP{stage}")
    }
}

/// Directory name of an evaluation stage.
pub fn stage_dir(stage: usize) -> String {
    if stage == 0 {
        "stage0-cmaes".into()
    } else {
        format!("stage{stage}-cmaes-gp{stage}")
    }
}

/// Seed of training episode `i` collected for stage `stage`; stage 0 is the
/// uncalibrated collection.
pub fn train_seed(base: u64, stage: usize, i: usize) -> u64 {
    derive_seed(base, &[KIND_TRAIN, stage as u64, i as u64])
}

/// Seed of evaluation episode `i`. The same seeds are used at every stage so
/// stages are compared on identical starts.
pub fn eval_seed(base: u64, i: usize) -> u64 {
    derive_seed(base, &[KIND_EVAL, i as u64])
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregate metrics of one evaluation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub label: String,
    /// Rollouts in the buffer the stage's residual was trained on.
    pub training_episodes: usize,
    pub training_transitions: usize,
    pub episodes: usize,
    pub solved: usize,
    /// Mean episode length in seconds; unsolved episodes count the full time limit.
    pub mean_total_s: f64,
    pub std_total_s: f64,
    pub per_ring_mean_s: Vec<f64>,
    pub per_ring_std_s: Vec<f64>,
}

impl StageSummary {
    pub fn from_records(
        stage: usize,
        training: &TransitionBuffer,
        episodes: usize,
        records: &[EpisodeRecord],
    ) -> Self {
        let totals: Vec<f64> = records.iter().map(EpisodeRecord::total_s).collect();
        let (mean_total_s, std_total_s) = mean_std(&totals);
        let rings = records.first().map_or(0, |r| r.per_ring_ticks.len());
        let times: Vec<Vec<f64>> = records.iter().map(per_ring_times).collect();
        let (per_ring_mean_s, per_ring_std_s) = (0..rings)
            .map(|ring| mean_std(&times.iter().map(|t| t[ring]).collect::<Vec<_>>()))
            .unzip();
        StageSummary {
            stage,
            label: stage_label(stage),
            training_episodes: episodes,
            training_transitions: training.len(),
            episodes: records.len(),
            solved: records.iter().filter(|r| r.solved).count(),
            mean_total_s,
            std_total_s,
            per_ring_mean_s,
            per_ring_std_s,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub summary: StageSummary,
    pub model: HybridModel,
    pub evaluation: Vec<EpisodeRecord>,
    /// Rollouts collected with this stage's model for the next stage.
    pub collected: Vec<EpisodeRecord>,
}

#[derive(Clone, Debug)]
pub struct LearningRun {
    pub config: ExperimentConfig,
    pub motor: MotorReport,
    /// Rollouts of the uncalibrated agent used for calibration.
    pub calibration_episodes: Vec<EpisodeRecord>,
    pub calibration: EstimationReport,
    pub stages: Vec<StageResult>,
}

/// Runs `seeds` as independent episodes on up to `threads` workers; the
/// output order follows `seeds`.
pub fn run_episodes(
    cfg: &ExperimentConfig,
    model: &HybridModel,
    arx: &ArxModel,
    seeds: &[(usize, u64)],
    exploration: Option<&ExplorationConfig>,
    record_trajectory: bool,
) -> Vec<EpisodeRecord> {
    let threads = match cfg.learning.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(seeds.len())
    .max(1);
    let real_sim = cfg.real_sim();
    let agent_cfg = AgentConfig::from(cfg);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<EpisodeRecord>>> = Mutex::new(vec![None; seeds.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| {
                let mut agent = AgentController::new(model.clone(), *arx, agent_cfg.clone());
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(episode, seed)) = seeds.get(i) else {
                        break;
                    };
                    let opts = EpisodeOptions {
                        episode,
                        time_limit: cfg.time_limit_ticks(),
                        spin0: cfg.episode.initial_spin,
                        noise: cfg.episode.noise,
                        exploration: exploration.cloned(),
                        record_trajectory,
                    };
                    let record =
                        rollout_episode(&real_sim, &cfg.friction.real, &mut agent, seed, &opts);
                    slots.lock().expect("episode slots")[i] = Some(record);
                }
            });
        }
    });
    slots
        .into_inner()
        .expect("episode slots")
        .into_iter()
        .map(|r| r.expect("every episode ran"))
        .collect()
}

fn buffer_of(records: &[EpisodeRecord]) -> TransitionBuffer {
    let mut out = TransitionBuffer::new();
    for r in records {
        out.extend(&r.transitions);
    }
    out
}

/// Runs the evaluation episodes of `cfg` with `model`, keeping their logs.
pub fn evaluate(cfg: &ExperimentConfig, model: &HybridModel, arx: &ArxModel) -> Vec<EpisodeRecord> {
    let seeds: Vec<(usize, u64)> = (0..cfg.learning.eval_episodes)
        .map(|i| (EVAL_EPISODE_BASE + i, eval_seed(cfg.seed, i)))
        .collect();
    run_episodes(cfg, model, arx, &seeds, None, true)
}

fn collect(
    cfg: &ExperimentConfig,
    stage: usize,
    model: &HybridModel,
    arx: &ArxModel,
    explore: bool,
) -> Vec<EpisodeRecord> {
    let n = cfg.learning.episodes_per_stage;
    let seeds: Vec<(usize, u64)> = (0..n)
        .map(|i| (stage * n + i, train_seed(cfg.seed, stage, i)))
        .collect();
    let exploration = explore.then_some(&cfg.learning.exploration);
    run_episodes(cfg, model, arx, &seeds, exploration, false)
}

/// The staged learning procedure:
///
/// 1. identify the inverse motor model on the real servo;
/// 2. collect rollouts with the uncalibrated engine (plus exploration) and
///    calibrate its friction once with CMA-ES;
/// 3. for each GP stage, collect rollouts with the current model and fit
///    residuals on all rollouts collected since calibration.
///
/// Every model is evaluated on the same seeded evaluation episodes.
/// `progress` is called with each finished stage.
pub fn run_learning(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&StageSummary),
) -> Result<LearningRun> {
    cfg.validate()?;
    let motor = identify_motor(cfg)?;
    let arx = motor.arx;
    let agent_sim = cfg.agent_sim();

    let uncalibrated = HybridModel::engine_only(cfg.friction.initial, agent_sim.clone());
    let calibration_episodes = collect(cfg, 0, &uncalibrated, &arx, true);
    let data = rings_with_at_least(
        &buffer_of(&calibration_episodes),
        cfg.estimation.min_per_ring,
    );
    if data.is_empty() {
        return Err(Error::Domain(format!(
            "calibration rollouts produced no ring with {} transitions",
            cfg.estimation.min_per_ring
        )));
    }
    let estimation_cfg = EstimationConfig {
        seed: derive_seed(cfg.seed, &[3, cfg.estimation.seed]),
        ..cfg.estimation.clone()
    };
    let calibration =
        estimate_parameters(&data, &cfg.friction.initial, &agent_sim, &estimation_cfg)?;
    let mu = calibration.mu_star;

    let mut stages = Vec::with_capacity(cfg.learning.gp_stages + 1);
    let mut model = HybridModel::engine_only(mu, agent_sim.clone());
    let mut buffer = TransitionBuffer::new();
    let mut episodes = 0;
    for stage in 0..=cfg.learning.gp_stages {
        if stage > 0 {
            let previous: &StageResult = stages.last().expect("previous stage");
            buffer.extend(&buffer_of(&previous.collected));
            episodes += previous.collected.len();
            model = fit_residual(&buffer, &mu, &agent_sim, &cfg.residual)?;
        }
        let evaluation = evaluate(cfg, &model, &arx);
        let collected = if stage < cfg.learning.gp_stages {
            collect(cfg, stage + 1, &model, &arx, false)
        } else {
            Vec::new()
        };
        let summary = StageSummary::from_records(stage, &buffer, episodes, &evaluation);
        progress(&summary);
        stages.push(StageResult {
            summary,
            model: model.clone(),
            evaluation,
            collected,
        });
    }
    Ok(LearningRun {
        config: cfg.clone(),
        motor,
        calibration_episodes,
        calibration,
        stages,
    })
}

/// Per-ring summary rows `(stage, ring, mean_s, std_s, n)`; rings use the
/// 1-based numbering of the maze.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerRingRow {
    pub stage: String,
    pub ring: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub n: usize,
}

pub fn per_ring_rows(summaries: &[StageSummary]) -> Vec<PerRingRow> {
    let mut rows = Vec::new();
    for s in summaries {
        for (i, (m, sd)) in s.per_ring_mean_s.iter().zip(&s.per_ring_std_s).enumerate() {
            rows.push(PerRingRow {
                stage: s.label.clone(),
                ring: i + 1,
                mean_s: *m,
                std_s: *sd,
                n: s.episodes,
            });
        }
    }
    rows
}

pub fn per_ring_table(rows: &[PerRingRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.stage.clone(),
                r.ring.to_string(),
                format!("{:.3}", r.mean_s),
                format!("{:.3}", r.std_s),
                r.n.to_string(),
            ]
        })
        .collect();
    aligned_table(&["stage", "ring", "mean_s", "std_s", "n"], &body)
}

pub fn stage_table(summaries: &[StageSummary]) -> String {
    let body: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                s.training_episodes.to_string(),
                s.training_transitions.to_string(),
                format!("{}/{}", s.solved, s.episodes),
                format!("{:.3}", s.mean_total_s),
                format!("{:.3}", s.std_total_s),
            ]
        })
        .collect();
    aligned_table(
        &[
            "stage",
            "train_episodes",
            "train_transitions",
            "solved",
            "mean_total_s",
            "std_total_s",
        ],
        &body,
    )
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    stages: Vec<String>,
    eval_seeds: Vec<u64>,
    calibration_seeds: Vec<u64>,
    collection_seeds: Vec<Vec<u64>>,
    motor: &'a MotorReport,
    mu_initial: [f64; 4],
    mu_calibrated: [f64; 4],
    calibration_rmse_initial: f64,
    calibration_rmse_calibrated: f64,
    calibration_evals: usize,
    summaries: Vec<&'a StageSummary>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl LearningRun {
    pub fn summaries(&self) -> Vec<StageSummary> {
        self.stages.iter().map(|s| s.summary.clone()).collect()
    }

    pub fn final_model(&self) -> &HybridModel {
        &self.stages.last().expect("at least one stage").model
    }

    /// Writes the manifest, tables, models and per-episode logs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let cfg = &self.config;
        let summaries = self.summaries();
        let n = cfg.learning.episodes_per_stage;
        let manifest = Manifest {
            seed: cfg.seed,
            stages: summaries.iter().map(|s| s.label.clone()).collect(),
            eval_seeds: (0..cfg.learning.eval_episodes)
                .map(|i| eval_seed(cfg.seed, i))
                .collect(),
            calibration_seeds: (0..n).map(|i| train_seed(cfg.seed, 0, i)).collect(),
            collection_seeds: (1..=cfg.learning.gp_stages)
                .map(|s| (0..n).map(|i| train_seed(cfg.seed, s, i)).collect())
                .collect(),
            motor: &self.motor,
            mu_initial: self.calibration.mu_init.to_array(),
            mu_calibrated: self.calibration.mu_star.to_array(),
            calibration_rmse_initial: self.calibration.rmse_init,
            calibration_rmse_calibrated: self.calibration.rmse_star,
            calibration_evals: self.calibration.optimizer.evals,
            summaries: self.stages.iter().map(|s| &s.summary).collect(),
        };
        write_text(
            &dir.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest)?,
        )?;
        write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
        write_text(
            &dir.join("calibration.json"),
            &serde_json::to_string_pretty(&self.calibration)?,
        )?;
        write_jsonl(
            dir.join("calibration_episodes.jsonl"),
            &self.calibration_episodes,
        )?;
        let rows = per_ring_rows(&summaries);
        write_jsonl(dir.join("per_ring.jsonl"), &rows)?;
        write_text(&dir.join("per_ring.txt"), &per_ring_table(&rows))?;
        write_jsonl(dir.join("stages.jsonl"), &summaries)?;
        write_text(&dir.join("stages.txt"), &stage_table(&summaries))?;
        self.final_model().save(dir.join("model.json"))?;

        for stage in &self.stages {
            let sdir = dir.join(stage_dir(stage.summary.stage));
            create_dir(&sdir)?;
            stage.model.save(sdir.join("model.json"))?;
            write_jsonl(sdir.join("episodes.jsonl"), &stage.evaluation)?;
            write_jsonl(sdir.join("collected.jsonl"), &stage.collected)?;
            let rows = per_ring_rows(std::slice::from_ref(&stage.summary));
            write_text(&sdir.join("per_ring.txt"), &per_ring_table(&rows))?;
            for (i, record) in stage.evaluation.iter().enumerate() {
                let rows: Vec<_> = record.log.iter().map(|l| l.state).collect();
                save_trajectory(sdir.join(format!("episode{i:02}.csv")), &rows)?;
                write_jsonl(sdir.join(format!("episode{i:02}_ticks.jsonl")), &record.log)?;
            }
        }
        Ok(())
    }
}
