//! Evaluate an actor on a test dataset: deterministic rollouts using the
//! policy mean, success/violation accounting, cost deviation against the
//! oracle labels, and report emission.
//!
//! A scenario counts as a success when its final operating point converges
//! with an empty violation report; intermediate steps do not have to be
//! feasible. Reports substitute sentinel costs for failed scenarios
//! ($20000 for constraint violations, $30000 for divergence) so cost plots
//! expose the failure mode rather than an artificially low objective.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::Case;
use crate::dataset::Dataset;
use crate::env::{decode_action, EnvConfig, GridEnv, StepAssessment};
use crate::nn::MlpParams;

pub const VIOLATION_SENTINEL_COST: f64 = 20_000.0;
pub const DIVERGENCE_SENTINEL_COST: f64 = 30_000.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioStatus {
    Success,
    Violations,
    Diverged,
}

/// Dominant failure mode of an unsuccessful scenario, picked by the
/// largest penalty-weighted excess (ties break toward branch, then
/// voltage, then active power).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCategory {
    Pgen,
    Vbus,
    Branch,
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario_id: usize,
    pub status: ScenarioStatus,
    pub agent_cost_raw: Option<f64>,
    pub agent_cost_sentinel: f64,
    pub oracle_cost: Option<f64>,
    pub deviation_pct: Option<f64>,
    pub violation_category: Option<ViolationCategory>,
    pub steps_used: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ViolationBreakdown {
    pub pgen: usize,
    pub vbus: usize,
    pub branch: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_scenarios: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// Relative cost deviation over successful scenarios with labels.
    pub mean_cost_deviation: Option<f64>,
    pub max_cost_deviation: Option<f64>,
    pub breakdown: ViolationBreakdown,
    #[serde(default)]
    pub per_scenario: Vec<ScenarioRecord>,
}

/// Aggregate view without per-scenario records, for the summary file.
#[derive(Serialize)]
struct SummaryView<'a> {
    n_scenarios: usize,
    n_success: usize,
    success_rate: f64,
    mean_cost_deviation: Option<f64>,
    max_cost_deviation: Option<f64>,
    breakdown: &'a ViolationBreakdown,
}

impl EvalMetrics {
    fn summary(&self) -> SummaryView<'_> {
        SummaryView {
            n_scenarios: self.n_scenarios,
            n_success: self.n_success,
            success_rate: self.success_rate,
            mean_cost_deviation: self.mean_cost_deviation,
            max_cost_deviation: self.max_cost_deviation,
            breakdown: &self.breakdown,
        }
    }
}

fn categorize(assessment: &StepAssessment, weights: (f64, f64, f64)) -> Option<ViolationCategory> {
    if !assessment.converged {
        return Some(ViolationCategory::Diverged);
    }
    let report = &assessment.report;
    if report.is_empty() {
        return None;
    }
    let (w_p, w_v, w_l) = weights;
    let contributions = [
        (ViolationCategory::Branch, w_l * report.branch_total()),
        (ViolationCategory::Vbus, w_v * report.vbus_total()),
        (ViolationCategory::Pgen, w_p * report.pgen_total()),
    ];
    contributions
        .iter()
        .filter(|(_, c)| *c > 0.0)
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
        .map(|(cat, _)| *cat)
}

/// Roll the deterministic policy mean for up to `horizon` steps on every
/// scenario of the dataset and aggregate the outcome.
pub fn evaluate_actor(
    case: &Case,
    actor: &MlpParams,
    dataset: &Dataset,
    env_config: &EnvConfig,
    horizon: usize,
) -> Result<EvalMetrics, EvalError> {
    if dataset.scenarios.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut env = GridEnv::new(case.clone(), env_config.clone())?;
    let obs_dim = actor.input_dim();
    let mut records = Vec::with_capacity(dataset.scenarios.len());
    let mut breakdown = ViolationBreakdown::default();
    let mut n_success = 0usize;
    let mut deviations = Vec::new();

    for (scenario_id, scenario) in dataset.scenarios.iter().enumerate() {
        let mut state = env.reset(scenario)?;
        let mut steps_used = 0;
        for _ in 0..horizon {
            let mean = actor.forward_one(&state[..obs_dim])?;
            let action = decode_action(&mean, &env.normalized_setpoints());
            let result = env.step(&action)?;
            state = result.next_state;
            steps_used += 1;
            if result.done {
                break;
            }
        }
        let assessment = env.last_assessment().expect("episode ran").clone();
        let weights = (
            env.config.reward.w_p,
            env.config.reward.w_v,
            env.config.reward.w_l,
        );
        let category = categorize(&assessment, weights);
        let (status, sentinel) = match category {
            None => (ScenarioStatus::Success, assessment.cost.expect("converged")),
            Some(ViolationCategory::Diverged) => {
                (ScenarioStatus::Diverged, DIVERGENCE_SENTINEL_COST)
            }
            Some(_) => (ScenarioStatus::Violations, VIOLATION_SENTINEL_COST),
        };
        match category {
            None => n_success += 1,
            Some(ViolationCategory::Diverged) => breakdown.diverged += 1,
            Some(ViolationCategory::Branch) => breakdown.branch += 1,
            Some(ViolationCategory::Vbus) => breakdown.vbus += 1,
            Some(ViolationCategory::Pgen) => breakdown.pgen += 1,
        }
        let oracle_cost = scenario.cost_opt;
        let deviation_pct = match (status, assessment.cost, oracle_cost) {
            (ScenarioStatus::Success, Some(agent), Some(oracle)) => {
                let d = (agent - oracle) / oracle * 100.0;
                deviations.push(d);
                Some(d)
            }
            _ => None,
        };
        records.push(ScenarioRecord {
            scenario_id,
            status,
            agent_cost_raw: assessment.cost,
            agent_cost_sentinel: sentinel,
            oracle_cost,
            deviation_pct,
            violation_category: category,
            steps_used,
        });
    }

    let n = records.len();
    let (mean_dev, max_dev) = if deviations.is_empty() {
        (None, None)
    } else {
        let mean = deviations.iter().sum::<f64>() / deviations.len() as f64;
        let max = deviations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (Some(mean), Some(max))
    };
    Ok(EvalMetrics {
        n_scenarios: n,
        n_success,
        success_rate: n_success as f64 / n as f64,
        mean_cost_deviation: mean_dev,
        max_cost_deviation: max_dev,
        breakdown,
        per_scenario: records,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Per-scenario CSV in a stable column order.
pub fn per_scenario_csv(metrics: &EvalMetrics) -> String {
    let mut out = String::from(
        "scenario_id,status,agent_cost_raw,agent_cost_sentinel,oracle_cost,deviation_pct,violation_category,steps_used\n",
    );
    for r in &metrics.per_scenario {
        let status = match r.status {
            ScenarioStatus::Success => "success",
            ScenarioStatus::Violations => "violations",
            ScenarioStatus::Diverged => "diverged",
        };
        let category = r.violation_category.map_or("", |c| match c {
            ViolationCategory::Pgen => "pgen",
            ViolationCategory::Vbus => "vbus",
            ViolationCategory::Branch => "branch",
            ViolationCategory::Diverged => "diverged",
        });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scenario_id,
            status,
            fmt_opt(r.agent_cost_raw),
            r.agent_cost_sentinel,
            fmt_opt(r.oracle_cost),
            fmt_opt(r.deviation_pct),
            category,
            r.steps_used,
        );
    }
    out
}

/// Plot-ready series: agent sentinel cost against oracle cost per scenario
/// index.
pub fn plot_series_csv(metrics: &EvalMetrics) -> String {
    let mut out = String::from("scenario_id,agent_cost_sentinel,oracle_cost\n");
    for r in &metrics.per_scenario {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.scenario_id,
            r.agent_cost_sentinel,
            fmt_opt(r.oracle_cost)
        );
    }
    out
}

/// Write `<stem>.csv`, `<stem>_summary.json` and `<stem>_series.csv`.
pub fn emit_report(metrics: &EvalMetrics, stem: &Path) -> Result<(), EvalError> {
    let csv_path = stem.with_extension("csv");
    std::fs::write(&csv_path, per_scenario_csv(metrics))?;
    let mut summary_path = stem.as_os_str().to_owned();
    summary_path.push("_summary.json");
    std::fs::write(
        Path::new(&summary_path),
        serde_json::to_string_pretty(&metrics.summary()).expect("serializable"),
    )?;
    let mut series_path = stem.as_os_str().to_owned();
    series_path.push("_series.csv");
    std::fs::write(Path::new(&series_path), plot_series_csv(metrics))?;
    Ok(())
}

/// Pseudo-agent that emits the oracle labels as targets; used to sanity
/// check the evaluation plumbing end to end.
pub fn evaluate_oracle_replay(
    case: &Case,
    dataset: &Dataset,
    env_config: &EnvConfig,
    horizon: usize,
) -> Result<EvalMetrics, EvalError> {
    if dataset.scenarios.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut env = GridEnv::new(case.clone(), env_config.clone())?;
    let boxes = crate::env::SetpointBoxes::from_case(case);
    let mut records = Vec::new();
    let mut n_success = 0;
    let mut breakdown = ViolationBreakdown::default();
    let mut deviations = Vec::new();
    for (scenario_id, scenario) in dataset.scenarios.iter().enumerate() {
        env.reset(scenario)?;
        let target = boxes.normalize(
            scenario.pg_opt.as_ref().expect("labeled"),
            scenario.vg_opt.as_ref().expect("labeled"),
        );
        let mut steps_used = 0;
        for _ in 0..horizon {
            let action = decode_action(&target, &env.normalized_setpoints());
            let result = env.step(&action)?;
            steps_used += 1;
            if result.done {
                break;
            }
        }
        let assessment = env.last_assessment().expect("ran").clone();
        let weights = (
            env.config.reward.w_p,
            env.config.reward.w_v,
            env.config.reward.w_l,
        );
        let category = categorize(&assessment, weights);
        let (status, sentinel) = match category {
            None => (ScenarioStatus::Success, assessment.cost.expect("converged")),
            Some(ViolationCategory::Diverged) => (ScenarioStatus::Diverged, DIVERGENCE_SENTINEL_COST),
            Some(_) => (ScenarioStatus::Violations, VIOLATION_SENTINEL_COST),
        };
        match category {
            None => n_success += 1,
            Some(ViolationCategory::Diverged) => breakdown.diverged += 1,
            Some(ViolationCategory::Branch) => breakdown.branch += 1,
            Some(ViolationCategory::Vbus) => breakdown.vbus += 1,
            Some(ViolationCategory::Pgen) => breakdown.pgen += 1,
        }
        let deviation_pct = match (status, assessment.cost, scenario.cost_opt) {
            (ScenarioStatus::Success, Some(agent), Some(oracle)) => {
                let d = (agent - oracle) / oracle * 100.0;
                deviations.push(d);
                Some(d)
            }
            _ => None,
        };
        records.push(ScenarioRecord {
            scenario_id,
            status,
            agent_cost_raw: assessment.cost,
            agent_cost_sentinel: sentinel,
            oracle_cost: scenario.cost_opt,
            deviation_pct,
            violation_category: category,
            steps_used,
        });
    }
    let n = records.len();
    let (mean_dev, max_dev) = if deviations.is_empty() {
        (None, None)
    } else {
        (
            Some(deviations.iter().sum::<f64>() / deviations.len() as f64),
            Some(deviations.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        )
    };
    Ok(EvalMetrics {
        n_scenarios: n,
        n_success,
        success_rate: n_success as f64 / n as f64,
        mean_cost_deviation: mean_dev,
        max_cost_deviation: max_dev,
        breakdown,
        per_scenario: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{ieee14, override_branch_limit};
    use crate::dataset::{generate_scenarios, label_scenarios};
    use crate::nn::Activation;
    use rand::SeedableRng;

    fn labeled_dataset(n: usize, seed: u64) -> (Case, Dataset) {
        let case = override_branch_limit(&ieee14(), 4, 5, 32.0).unwrap();
        let scenarios = generate_scenarios(&case, n, (0.8, 1.2), seed);
        let outcome = label_scenarios(&case, scenarios, seed, (0.8, 1.2), 1.0)
            .unwrap_or_else(|(_, o)| *o);
        (case, outcome.dataset)
    }

    fn env_config(ds: &Dataset) -> EnvConfig {
        let mut config = EnvConfig::default();
        if let Some(cal) = ds.calibration {
            config.reward.k = cal.k;
            config.reward.b = cal.b;
        }
        config
    }

    #[test]
    fn oracle_replay_scores_full_success() {
        let (case, ds) = labeled_dataset(8, 31);
        assert!(ds.scenarios.len() >= 4, "too few feasible scenarios");
        let config = env_config(&ds);
        let metrics = evaluate_oracle_replay(&case, &ds, &config, 5).unwrap();
        assert_eq!(metrics.n_success, metrics.n_scenarios, "{:?}", metrics.breakdown);
        assert_eq!(metrics.success_rate, 1.0);
        // replaying the optimum costs the optimum
        assert!(metrics.max_cost_deviation.unwrap().abs() < 0.05);
        // no sentinel values in a full-success report
        assert!(per_scenario_csv(&metrics).lines().skip(1).all(|l| !l.contains("20000")));
    }

    #[test]
    fn random_actor_underperforms_oracle_replay() {
        let (case, ds) = labeled_dataset(10, 33);
        let config = env_config(&ds);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let actor = MlpParams::new(&[28, 32, 10], Activation::Relu, Activation::Sigmoid, &mut rng);
        let metrics = evaluate_actor(&case, &actor, &ds, &config, 5).unwrap();
        let replay = evaluate_oracle_replay(&case, &ds, &config, 5).unwrap();
        assert!(metrics.success_rate <= replay.success_rate);
        let failures = metrics.breakdown.pgen
            + metrics.breakdown.vbus
            + metrics.breakdown.branch
            + metrics.breakdown.diverged;
        assert_eq!(failures, metrics.n_scenarios - metrics.n_success);
    }

    #[test]
    fn deterministic_metrics() {
        let (case, ds) = labeled_dataset(6, 35);
        let config = env_config(&ds);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let actor = MlpParams::new(&[28, 16, 10], Activation::Relu, Activation::Sigmoid, &mut rng);
        let a = evaluate_actor(&case, &actor, &ds, &config, 5).unwrap();
        let b = evaluate_actor(&case, &actor, &ds, &config, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(per_scenario_csv(&a), per_scenario_csv(&b));
    }

    #[test]
    fn report_files_and_sentinels() {
        let (case, ds) = labeled_dataset(6, 37);
        let config = env_config(&ds);
        // an actor pinned to the box edges diverges or violates nearly
        // always, exercising the sentinel paths
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut actor =
            MlpParams::new(&[28, 8, 10], Activation::Relu, Activation::Sigmoid, &mut rng);
        for layer in actor.layers.iter_mut() {
            layer.b.fill(-30.0); // sigmoid -> ~0: every setpoint at its minimum
        }
        let metrics = evaluate_actor(&case, &actor, &ds, &config, 5).unwrap();
        assert!(metrics.success_rate < 1.0);
        let csv = per_scenario_csv(&metrics);
        for r in &metrics.per_scenario {
            match r.status {
                ScenarioStatus::Diverged => {
                    assert_eq!(r.agent_cost_sentinel, DIVERGENCE_SENTINEL_COST)
                }
                ScenarioStatus::Violations => {
                    assert_eq!(r.agent_cost_sentinel, VIOLATION_SENTINEL_COST)
                }
                ScenarioStatus::Success => assert!(r.agent_cost_sentinel < 20_000.0),
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("report");
        emit_report(&metrics, &stem).unwrap();
        assert!(stem.with_extension("csv").exists());
        assert!(dir.path().join("report_summary.json").exists());
        assert!(dir.path().join("report_series.csv").exists());
        assert_eq!(csv.lines().count(), metrics.n_scenarios + 1);
    }
}
