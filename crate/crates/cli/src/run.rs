//! Run orchestration: training with on-disk artifacts, observation
//! collection, checkpoint evaluation and the distance report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use module_core::actor::Policy;
use module_core::data::{ExpertObservationSet, ObservationPair};
use module_core::diagnostics::{
    empirical_lfo_reward_distance, estimate_state_transition_distribution, state_transition_error, HistogramGrid,
    RewardFunctionSet,
};
use module_core::env::{EnvKind, Environment};
use module_core::nn::{Matrix, ParamVector};
use module_core::reward::RewardParams;
use module_core::trainer::{
    collect_observations, evaluate, evaluate_random, normalized_score, MetricsRow, TrainConfig, Trainer,
};
use serde::Serialize;

use crate::config::config_json;
use crate::formats::{bundle, group, load_params, save_params};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_EVAL_FILE: &str = "final_eval.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DISTANCE_FILE: &str = "distance.csv";

/// Metrics CSV header, in column order.
pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "eval_return_mean",
    "eval_return_std",
    "reward_loss",
    "critic1_loss",
    "critic2_loss",
    "policy_loss",
    "alpha",
    "entropy_estimate",
    "buffer_size",
];

#[derive(Debug, Clone, Serialize)]
struct CsvRow {
    step: usize,
    eval_return_mean: f64,
    eval_return_std: f64,
    reward_loss: Option<f64>,
    critic1_loss: Option<f64>,
    critic2_loss: Option<f64>,
    policy_loss: Option<f64>,
    alpha: f64,
    entropy_estimate: Option<f64>,
    buffer_size: usize,
}

impl From<&MetricsRow> for CsvRow {
    fn from(r: &MetricsRow) -> Self {
        Self {
            step: r.step,
            eval_return_mean: r.eval_return_mean,
            eval_return_std: r.eval_return_std,
            reward_loss: r.reward_loss,
            critic1_loss: r.critic1_loss,
            critic2_loss: r.critic2_loss,
            policy_loss: r.policy_loss,
            alpha: r.alpha,
            entropy_estimate: r.entropy_estimate,
            buffer_size: r.buffer_size,
        }
    }
}

/// Summary written to `final_eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FinalEval {
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub steps: usize,
    pub episodes: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub random_return_mean: f64,
    /// Mean return recorded in the expert dataset, for imitation runs.
    pub expert_mean_return: Option<f64>,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub final_eval: FinalEval,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step}.mdlp"))
}

/// Trains per `config`, writing the config echo, metrics, a checkpoint at
/// every evaluation point and the final evaluation under `dir`.
pub fn train(config: &TrainConfig, expert: Option<ExpertObservationSet>, dir: &Path) -> Result<RunArtifacts> {
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config_json(config) + "\n")?;
    let expert_return = expert.as_ref().map(|e| e.mean_return);
    let metrics = dir.join(METRICS_FILE);
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&metrics)
        .with_context(|| format!("creating {}", metrics.display()))?;
    csv.write_record(METRICS_COLUMNS)?;
    csv.flush()?;
    let mut trainer = Trainer::new(config.clone(), expert)?;
    let mut checkpoints = Vec::new();
    let mut failure: Option<anyhow::Error> = None;
    let result = trainer.run(|t, row| {
        let mut step = || -> Result<()> {
            csv.serialize(CsvRow::from(row))?;
            csv.flush()?;
            let path = checkpoint_path(dir, row.step);
            save_params(&path, &bundle(&t.checkpoint()))?;
            checkpoints.push((row.step, path));
            Ok(())
        };
        step().map_err(|e| {
            failure = Some(e);
            module_core::Error::Empty { what: "artifact writer" }
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (mean, std) = result?;
    let (random, _) = evaluate_random(config.env, config.eval_episodes, config.seed)?;
    let final_eval = FinalEval {
        algo: config.algo.id().to_string(),
        env: config.env.id().to_string(),
        seed: config.seed,
        steps: trainer.steps(),
        episodes: config.eval_episodes,
        eval_return_mean: mean,
        eval_return_std: std,
        random_return_mean: random,
        expert_mean_return: expert_return,
        normalized_score: expert_return.map(|e| normalized_score(mean, random, e)),
    };
    fs::write(dir.join(FINAL_EVAL_FILE), serde_json::to_string_pretty(&final_eval)? + "\n")?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        metrics,
        checkpoints,
        final_eval,
    })
}

/// Loads the actor stored in a checkpoint, checked against `env`.
pub fn load_policy(path: &Path, env: EnvKind) -> Result<(Policy, ParamVector)> {
    let bundled = load_params(path)?;
    let theta = group(&bundled, "actor")?;
    let spec = env.make().spec().clone();
    let policy = Policy::from_params(&spec, &theta)
        .with_context(|| format!("actor in {} does not fit {}", path.display(), env.id()))?;
    Ok((policy, theta))
}

/// Rolls the checkpoint's actor with action noise and returns the pairs.
pub fn collect(config: &TrainConfig, checkpoint: &Path) -> Result<ExpertObservationSet> {
    let (policy, theta) = load_policy(checkpoint, config.env)?;
    Ok(collect_observations(
        &policy,
        &theta,
        config.env,
        config.pairs,
        config.noise_std,
        config.seed,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

pub fn evaluate_checkpoint(config: &TrainConfig, checkpoint: &Path) -> Result<EvalSummary> {
    let (policy, theta) = load_policy(checkpoint, config.env)?;
    let (mean, std) = evaluate(&policy, &theta, config.env, config.eval_episodes, config.seed)?;
    Ok(EvalSummary {
        episodes: config.eval_episodes,
        eval_return_mean: mean,
        eval_return_std: std,
    })
}

/// Splits a pair list into state trajectories wherever `s′` of one pair is
/// not the `s` of the next.
pub fn chain_trajectories(pairs: &[ObservationPair]) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let continues = i > 0 && pairs[i - 1].s_next == p.s;
        if !continues {
            out.push(vec![p.s.clone()]);
        }
        out.last_mut().expect("pushed above").push(p.s_next.clone());
    }
    out
}

/// State trajectories of deterministic-policy episodes.
fn rollouts(policy: &Policy, theta: &ParamVector, env: EnvKind, episodes: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    use rand::RngCore;
    let mut rng = module_core::rng::stream(seed, module_core::rng::Stream::Eval);
    let mut e = env.make();
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = e.reset(rng.next_u64());
        let mut traj = vec![state.clone()];
        loop {
            let a = policy.deterministic_action(theta, &state)?;
            let r = e.step(&a)?;
            traj.push(r.next_state.clone());
            if r.done {
                break;
            }
            state = r.next_state;
        }
        out.push(traj);
    }
    Ok(out)
}

fn trajectory_pairs(trajectories: &[Vec<Vec<f64>>]) -> Vec<ObservationPair> {
    trajectories
        .iter()
        .flat_map(|t| t.windows(2).map(|w| ObservationPair::new(w[0].clone(), w[1].clone())))
        .collect()
}

/// One row of the distance report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub checkpoint_step: usize,
    pub lfo_reward_distance: f64,
    pub state_transition_error: f64,
    pub coefficient: f64,
}

/// Histogram grid used for an environment's transition distributions.
pub fn grid_for(env: EnvKind) -> Result<HistogramGrid> {
    match env {
        EnvKind::PointMass2D => Ok(HistogramGrid::point_mass_positions()),
        EnvKind::Pendulum => Ok(HistogramGrid::new(vec![0, 1], vec![-1.0, -1.0], vec![1.0, 1.0], 16)?),
    }
}

/// Diagnostics for every checkpoint of the run in `dir` against the expert
/// pairs.
///
/// The LfO reward distance takes the sup over the zero function and the
/// learned rewards of all checkpoints. The transition error of a checkpoint
/// uses its own learned reward, shifted by its minimum over the bin centers
/// so that it is non-negative, against that checkpoint's policy histogram.
pub fn distance_report(config: &TrainConfig, dir: &Path, expert: &ExpertObservationSet) -> Result<Vec<DistanceRow>> {
    ensure!(
        expert.env_id == config.env.id(),
        "expert data was collected on {}, not {}",
        expert.env_id,
        config.env.id()
    );
    let checkpoints = list_checkpoints(dir)?;
    if checkpoints.is_empty() {
        bail!("no checkpoints under {}", dir.join(CHECKPOINT_DIR).display());
    }
    let grid = grid_for(config.env)?;
    let centers = grid.centers();
    let expert_hist = estimate_state_transition_distribution(&chain_trajectories(&expert.pairs), &grid, config.gamma)?;

    let mut rewards = Vec::with_capacity(checkpoints.len());
    let mut agents = Vec::with_capacity(checkpoints.len());
    for (_, path) in &checkpoints {
        let bundled = load_params(path)?;
        let reward = RewardParams::from_params(group(&bundled, "reward")?, config.mu)
            .with_context(|| format!("reward in {}", path.display()))?;
        let theta = group(&bundled, "actor")?;
        let policy = Policy::from_params(config.env.make().spec(), &theta)?;
        agents.push(rollouts(&policy, &theta, config.env, config.eval_episodes, config.seed)?);
        rewards.push(reward);
    }
    let mut set = RewardFunctionSet::new();
    for r in &rewards {
        set = set.with_learned(r);
    }

    let mut rows = Vec::with_capacity(checkpoints.len());
    for (((step, _), reward), trajectories) in checkpoints.iter().zip(&rewards).zip(&agents) {
        let agent_pairs = trajectory_pairs(trajectories);
        let d = empirical_lfo_reward_distance(&set, &expert.pairs, &agent_pairs)?;
        let hist = estimate_state_transition_distribution(trajectories, &grid, config.gamma)?;
        let r_bins = shifted_bin_rewards(reward, &grid_pair_inputs(&grid, &centers, expert.state_dim));
        let e = state_transition_error(&r_bins, &expert_hist.weights, &[&hist.weights])?;
        rows.push(DistanceRow {
            checkpoint_step: *step,
            lfo_reward_distance: d,
            state_transition_error: e,
            coefficient: r_bins.iter().sum(),
        });
    }
    Ok(rows)
}

/// Lifts projected bin centers to full `[s | s′]` rows, with the
/// coordinates outside the grid set to zero.
fn grid_pair_inputs(grid: &HistogramGrid, centers: &Matrix, state_dim: usize) -> Matrix {
    let n = grid.coords.len();
    let mut out = Matrix::zeros(centers.rows(), 2 * state_dim);
    for i in 0..centers.rows() {
        let c = centers.row(i);
        let row = out.row_mut(i);
        for (k, &coord) in grid.coords.iter().enumerate() {
            row[coord] = c[k];
            row[state_dim + coord] = c[n + k];
        }
    }
    out
}

fn shifted_bin_rewards(reward: &RewardParams, inputs: &Matrix) -> Vec<f64> {
    let mut r = reward.values(inputs);
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    r.iter_mut().for_each(|v| *v -= lo);
    r
}

/// `(step, path)` for every `step_<k>.mdlp` in the run, by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let cdir = dir.join(CHECKPOINT_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&cdir).with_context(|| format!("reading {}", cdir.display()))? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".mdlp"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_distance_csv(path: &Path, rows: &[DistanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
