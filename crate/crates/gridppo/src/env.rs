//! Gym-style episodic grid environment.
//!
//! The state concatenates per-bus loads (normalized by the power base) with
//! the generator setpoints min-max normalized by their boxes; the action is
//! a per-generator tuning delta in the same normalized units. Each step
//! installs the new setpoints, runs the power flow, and scores the outcome
//! with a three-branch reward: a fixed penalty when the solver diverges, a
//! weighted negative penalty when operating limits are violated, and an
//! affine map of generation cost to points when the state is feasible. The
//! affine map is calibrated so oracle-optimal dispatch scores 500 points on
//! every scenario.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::case::{build_ybus, Case};
use crate::dataset::Scenario;
use crate::opf::gen_cost;
use crate::pf::{check_violations, PfSolver, ViolationReport};

pub const DIVERGENCE_PENALTY: f64 = -5000.0;
pub const VIOLATION_FLOOR: f64 = -4000.0;
pub const DEFAULT_HORIZON: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("reset must be called before step")]
    NotReset,
    #[error("episode is done; call reset")]
    EpisodeDone,
    #[error("expected action of length {expected}, got {got}")]
    ActionDimension { expected: usize, got: usize },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("power flow error: {0}")]
    Pf(String),
}

/// Coefficients of the three-branch reward law.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RewardParams {
    /// Affine cost-to-points map; k < 0 so cheaper dispatch scores higher.
    pub k: f64,
    pub b: f64,
    /// Per-scenario correction anchoring the optimum at 500 points.
    pub z: f64,
    /// Penalty weights: points/MW, points/p.u., points/MVA.
    pub w_p: f64,
    pub w_v: f64,
    pub w_l: f64,
    pub divergence_penalty: f64,
    /// Violation rewards never fall below this, keeping them above the
    /// divergence penalty.
    pub violation_floor: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            k: -1.0,
            b: 0.0,
            z: 0.0,
            w_p: 10.0,
            w_v: 1000.0,
            w_l: 10.0,
            divergence_penalty: DIVERGENCE_PENALTY,
            violation_floor: VIOLATION_FLOOR,
        }
    }
}

/// Exactly one branch fires: divergence dominates violations, violations
/// dominate the cost branch.
pub fn compute_reward(
    converged: bool,
    report: &ViolationReport,
    cost: f64,
    params: &RewardParams,
) -> f64 {
    if !converged {
        return params.divergence_penalty;
    }
    if !report.is_empty() {
        let penalty = params.w_p * report.pgen_total()
            + params.w_v * report.vbus_total()
            + params.w_l * report.branch_total();
        return (-penalty).max(params.violation_floor);
    }
    params.k * cost + params.b + params.z
}

/// Interpret absolute normalized targets from the actor as tuning deltas
/// relative to the current normalized setpoints.
pub fn decode_action(target: &[f64], current: &[f64]) -> Vec<f64> {
    debug_assert_eq!(target.len(), current.len());
    target.iter().zip(current).map(|(t, c)| t - c).collect()
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Power-flow verdict on the most recent operating point, kept for
/// evaluation and reporting.
#[derive(Debug, Clone)]
pub struct StepAssessment {
    pub converged: bool,
    pub report: ViolationReport,
    /// Realized generation cost, $/h; present when converged.
    pub cost: Option<f64>,
}

/// Per-generator normalization boxes: Pg in MW, Vg in p.u.
#[derive(Debug, Clone)]
pub struct SetpointBoxes {
    pub p: Vec<(f64, f64)>,
    pub v: Vec<(f64, f64)>,
}

impl SetpointBoxes {
    pub fn from_case(case: &Case) -> Self {
        let p = case.generators.iter().map(|g| (g.pmin, g.pmax)).collect();
        let v = case.generators.iter().map(|g| case.gen_v_limits(g)).collect();
        Self { p, v }
    }

    fn norm(lo: f64, hi: f64, x: f64) -> f64 {
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    fn denorm(lo: f64, hi: f64, u: f64) -> f64 {
        lo + u.clamp(0.0, 1.0) * (hi - lo)
    }

    pub fn normalize(&self, pg: &[f64], vg: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.p.len());
        for (k, &(lo, hi)) in self.p.iter().enumerate() {
            out.push(Self::norm(lo, hi, pg[k]));
        }
        for (k, &(lo, hi)) in self.v.iter().enumerate() {
            out.push(Self::norm(lo, hi, vg[k]));
        }
        out
    }

    /// Map normalized `[pg.., vg..]` back to physical units, clipping to
    /// the boxes.
    pub fn denormalize(&self, normalized: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.p.len();
        let pg = (0..s).map(|k| Self::denorm(self.p[k].0, self.p[k].1, normalized[k])).collect();
        let vg = (0..s).map(|k| Self::denorm(self.v[k].0, self.v[k].1, normalized[s + k])).collect();
        (pg, vg)
    }
}

/// Concatenated observation per the fixed layout
/// `[Pd_1..m, Qd_1..m, Pg_1..s, Vg_1..s]`.
pub fn encode_state(case: &Case, pd: &[f64], qd: &[f64], pg: &[f64], vg: &[f64]) -> Vec<f64> {
    let boxes = SetpointBoxes::from_case(case);
    let mut state = Vec::with_capacity(2 * (pd.len() + pg.len()));
    state.extend(pd.iter().map(|p| p / case.base_mva));
    state.extend(qd.iter().map(|q| q / case.base_mva));
    state.extend(boxes.normalize(pg, vg));
    state
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    pub step_scale: f64,
    pub reward: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            step_scale: 1.0,
            reward: RewardParams::default(),
        }
    }
}

/// Stateful single-episode environment around one case. Vectorized rollout
/// collection uses one instance per worker.
pub struct GridEnv {
    case: Case,
    work: Case,
    ybus: DMatrix<Complex64>,
    solver: PfSolver,
    boxes: SetpointBoxes,
    pub config: EnvConfig,
    t: usize,
    done: bool,
    dead_on_arrival: bool,
    started: bool,
    state: Vec<f64>,
    last: Option<StepAssessment>,
}

impl GridEnv {
    pub fn new(case: Case, config: EnvConfig) -> Result<Self, EnvError> {
        let ybus = build_ybus(&case).map_err(|e| EnvError::Pf(e.to_string()))?;
        let boxes = SetpointBoxes::from_case(&case);
        Ok(Self {
            work: case.clone(),
            case,
            ybus,
            solver: PfSolver::default(),
            boxes,
            config,
            t: 0,
            done: true,
            dead_on_arrival: false,
            started: false,
            state: vec![],
            last: None,
        })
    }

    /// Verdict on the operating point produced by the latest reset/step.
    pub fn last_assessment(&self) -> Option<&StepAssessment> {
        self.last.as_ref()
    }

    fn assess(&self, outcome: &crate::pf::PfOutcome) -> StepAssessment {
        match outcome.solution() {
            None => StepAssessment {
                converged: false,
                report: ViolationReport::default(),
                cost: None,
            },
            Some(sol) => StepAssessment {
                converged: true,
                report: check_violations(&self.work, sol),
                cost: Some(gen_cost(&self.work, &sol.pg_out).expect("lengths match")),
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * (self.case.bus_count() + self.case.gen_count())
    }

    pub fn action_dim(&self) -> usize {
        2 * self.case.gen_count()
    }

    /// Number of leading state entries that encode loads; the actor
    /// conditions only on these.
    pub fn load_dim(&self) -> usize {
        2 * self.case.bus_count()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn case(&self) -> &Case {
        &self.case
    }

    /// Current setpoints in normalized units, in action layout.
    pub fn normalized_setpoints(&self) -> Vec<f64> {
        let pg: Vec<f64> = self.work.generators.iter().map(|g| g.pg).collect();
        let vg: Vec<f64> = self.work.generators.iter().map(|g| g.vg).collect();
        self.boxes.normalize(&pg, &vg)
    }

    /// Install the scenario and run the initial power flow. A diverging
    /// initial condition marks the episode dead on arrival: the first step
    /// scores the divergence penalty and terminates.
    pub fn reset(&mut self, scenario: &Scenario) -> Result<Vec<f64>, EnvError> {
        self.work = crate::dataset::apply_scenario(&self.case, scenario)?;
        self.config.reward.z = scenario.z.unwrap_or(0.0);
        let outcome = self
            .solver
            .solve(&self.work, &self.ybus)
            .map_err(|e| EnvError::Pf(e.to_string()))?;
        self.dead_on_arrival = !outcome.converged();
        self.last = Some(self.assess(&outcome));
        self.t = 0;
        self.done = false;
        self.started = true;
        self.state = self.encode_current();
        Ok(self.state.clone())
    }

    fn encode_current(&self) -> Vec<f64> {
        let pd: Vec<f64> = self.work.buses.iter().map(|b| b.pd).collect();
        let qd: Vec<f64> = self.work.buses.iter().map(|b| b.qd).collect();
        let pg: Vec<f64> = self.work.generators.iter().map(|g| g.pg).collect();
        let vg: Vec<f64> = self.work.generators.iter().map(|g| g.vg).collect();
        encode_state(&self.work, &pd, &qd, &pg, &vg)
    }

    /// Apply a tuning delta in normalized units, solve the power flow, and
    /// score the new operating point.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.action_dim() {
            return Err(EnvError::ActionDimension {
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        self.t += 1;

        let current = self.normalized_setpoints();
        let target: Vec<f64> = current
            .iter()
            .zip(action)
            .map(|(c, a)| (c + a * self.config.step_scale).clamp(0.0, 1.0))
            .collect();
        let (pg, vg) = self.boxes.denormalize(&target);
        for (k, g) in self.work.generators.iter_mut().enumerate() {
            g.pg = pg[k];
            g.vg = vg[k];
        }
        self.state = self.encode_current();

        if self.dead_on_arrival {
            self.done = true;
            return Ok(StepResult {
                next_state: self.state.clone(),
                reward: self.config.reward.divergence_penalty,
                done: true,
            });
        }

        let outcome = self
            .solver
            .solve(&self.work, &self.ybus)
            .map_err(|e| EnvError::Pf(e.to_string()))?;
        let assessment = self.assess(&outcome);
        let reward = match assessment.cost {
            None => self.config.reward.divergence_penalty,
            Some(cost) => compute_reward(true, &assessment.report, cost, &self.config.reward),
        };
        let diverged = !assessment.converged;
        self.last = Some(assessment);
        self.done = diverged || self.t >= self.config.horizon;
        Ok(StepResult { next_state: self.state.clone(), reward, done: self.done })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{ieee14, override_branch_limit};
    use crate::dataset::generate_scenarios;
    use approx::assert_relative_eq;

    fn nominal_scenario(case: &Case) -> Scenario {
        Scenario {
            pd: case.buses.iter().map(|b| b.pd).collect(),
            qd: case.buses.iter().map(|b| b.qd).collect(),
            pg0: case.generators.iter().map(|g| g.pg).collect(),
            vg0: case.generators.iter().map(|g| g.vg).collect(),
            pg_opt: None,
            vg_opt: None,
            cost_opt: None,
            z: None,
            feasible: false,
        }
    }

    #[test]
    fn state_and_action_dimensions() {
        let mut env = GridEnv::new(ieee14(), EnvConfig::default()).unwrap();
        assert_eq!(env.state_dim(), 38);
        assert_eq!(env.action_dim(), 10);
        let s = env.reset(&nominal_scenario(env.case())).unwrap();
        assert_eq!(s.len(), 38);
    }

    #[test]
    fn default_scenario_encodes_case_loads() {
        let case = ieee14();
        let mut env = GridEnv::new(case.clone(), EnvConfig::default()).unwrap();
        let s = env.reset(&nominal_scenario(&case)).unwrap();
        for (i, b) in case.buses.iter().enumerate() {
            assert_relative_eq!(s[i], b.pd / case.base_mva);
            assert_relative_eq!(s[14 + i], b.qd / case.base_mva);
        }
        // generator block is min-max normalized
        let g = &case.generators[0];
        assert_relative_eq!(s[28], (g.pg - g.pmin) / (g.pmax - g.pmin));
    }

    #[test]
    fn reward_branches() {
        let params = RewardParams { k: -0.05, b: 400.0, z: 25.0, ..Default::default() };
        // divergence dominates everything
        assert_eq!(compute_reward(false, &ViolationReport::default(), 1e9, &params), -5000.0);
        // violations dominate cost
        let mut report = ViolationReport::default();
        report.vbus.push((3, 0.02));
        assert_relative_eq!(compute_reward(true, &report, 0.0, &params), -20.0);
        // the floor keeps violation rewards above the divergence penalty
        report.pgen.push((0, 1e9));
        assert_eq!(compute_reward(true, &report, 0.0, &params), VIOLATION_FLOOR);
        // feasible branch is the affine map
        let r = compute_reward(true, &ViolationReport::default(), 6000.0, &params);
        assert_relative_eq!(r, -0.05 * 6000.0 + 400.0 + 25.0);
    }

    #[test]
    fn decode_action_is_target_minus_current() {
        assert_eq!(decode_action(&[0.4, 0.9], &[0.4, 0.9]), vec![0.0, 0.0]);
        assert_eq!(decode_action(&[1.0, 1.0], &[0.0, 0.0]), vec![1.0, 1.0]);
        let t = vec![0.5; 10];
        let c = vec![0.25; 10];
        assert_eq!(decode_action(&t, &c).len(), 10);
    }

    #[test]
    fn zero_action_keeps_setpoints_and_scores_cost_branch() {
        // bring every Vg inside the band so the nominal point is feasible
        let mut case = ieee14();
        for g in case.generators.iter_mut() {
            g.vg = g.vg.min(1.05);
        }
        let mut env = GridEnv::new(case.clone(), EnvConfig::default()).unwrap();
        env.reset(&nominal_scenario(&case)).unwrap();
        let before = env.normalized_setpoints();
        let result = env.step(&vec![0.0; 10]).unwrap();
        assert_eq!(env.normalized_setpoints(), before);
        // feasible, no violations: affine cost branch with defaults k=-1,b=z=0
        let out = crate::pf::solve_pf(&case).unwrap();
        let cost = gen_cost(&case, &out.solution().unwrap().pg_out).unwrap();
        assert_relative_eq!(result.reward, -cost, epsilon = 1e-9);
        assert!(!result.done);
    }

    #[test]
    fn overload_scores_violation_branch() {
        // stock dispatch pushes ~63 MVA over line 4-5; a 32 MVA limit puts
        // the unchanged action in the violation branch
        let case = override_branch_limit(&ieee14(), 4, 5, 32.0).unwrap();
        let mut env = GridEnv::new(case.clone(), EnvConfig::default()).unwrap();
        env.reset(&nominal_scenario(&case)).unwrap();
        let result = env.step(&vec![0.0; 10]).unwrap();
        assert!(result.reward < 0.0);
        assert!(result.reward >= VIOLATION_FLOOR);
        // reproduce the arithmetic from the violation report; applying the
        // action clips setpoints into their boxes, so Vg 1.07/1.09 become
        // 1.06 before the solve
        let mut clipped = case.clone();
        for g in clipped.generators.iter_mut() {
            let (lo, hi) = case.gen_v_limits(g);
            g.vg = g.vg.clamp(lo, hi);
            g.pg = g.pg.clamp(g.pmin, g.pmax);
        }
        let out = crate::pf::solve_pf(&clipped).unwrap();
        let sol = out.solution().unwrap();
        let report = check_violations(&clipped, sol);
        assert!(!report.is_empty());
        let expected = (-(10.0 * report.pgen_total()
            + 1000.0 * report.vbus_total()
            + 10.0 * report.branch_total()))
        .max(VIOLATION_FLOOR);
        assert_relative_eq!(result.reward, expected, epsilon = 1e-9);
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut case = ieee14();
        for g in case.generators.iter_mut() {
            g.vg = g.vg.min(1.05);
        }
        let mut env = GridEnv::new(case.clone(), EnvConfig::default()).unwrap();
        env.reset(&nominal_scenario(&case)).unwrap();
        let mut dones = vec![];
        for _ in 0..5 {
            dones.push(env.step(&vec![0.0; 10]).unwrap().done);
        }
        assert_eq!(dones, vec![false, false, false, false, true]);
        assert!(matches!(env.step(&vec![0.0; 10]), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn dead_on_arrival_episode_scores_divergence_once() {
        // an impossible operating condition: loads far beyond the network's
        // transfer capability
        let case = ieee14();
        let mut scenario = nominal_scenario(&case);
        for v in scenario.pd.iter_mut() {
            *v *= 40.0;
        }
        for v in scenario.qd.iter_mut() {
            *v *= 40.0;
        }
        let mut env = GridEnv::new(case, EnvConfig::default()).unwrap();
        let s = env.reset(&scenario).unwrap();
        assert_eq!(s.len(), 38);
        let result = env.step(&vec![0.0; 10]).unwrap();
        assert_eq!(result.reward, DIVERGENCE_PENALTY);
        assert!(result.done);
    }

    #[test]
    fn oracle_target_scores_500_when_calibrated() {
        let case = override_branch_limit(&ieee14(), 4, 5, 32.0).unwrap();
        let scenarios = generate_scenarios(&case, 6, (0.9, 1.1), 17);
        let outcome =
            crate::dataset::label_scenarios(&case, scenarios, 17, (0.9, 1.1), 1.0)
                .unwrap_or_else(|(_, o)| *o);
        let ds = outcome.dataset;
        assert!(!ds.scenarios.is_empty());
        let cal = ds.calibration.unwrap();
        let mut config = EnvConfig::default();
        config.reward.k = cal.k;
        config.reward.b = cal.b;
        let mut env = GridEnv::new(case.clone(), config).unwrap();
        for scenario in &ds.scenarios {
            env.reset(scenario).unwrap();
            // point the targets at the oracle labels
            let boxes = SetpointBoxes::from_case(&case);
            let target =
                boxes.normalize(scenario.pg_opt.as_ref().unwrap(), scenario.vg_opt.as_ref().unwrap());
            let action = decode_action(&target, &env.normalized_setpoints());
            let result = env.step(&action).unwrap();
            // replay runs through the power flow, so allow solver-level slack
            assert!(
                (result.reward - 500.0).abs() < 1.0,
                "reward {} for oracle replay",
                result.reward
            );
        }
    }
}
