//! Scenario generation, oracle labeling, reward calibration, and dataset
//! persistence.
//!
//! A scenario is one operating condition: per-bus loads scaled by
//! independent uniform multipliers, and initial generator settings drawn
//! uniformly inside their boxes. Labeling solves the full AC OPF per
//! scenario and drops infeasible ones, so a saved dataset contains only
//! feasible operating conditions together with the affine cost-to-reward
//! calibration.
//!
//! File format: one JSON header line (schema version, case fingerprint,
//! generation parameters, calibration, record count, content checksum)
//! followed by one JSON scenario per line.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::case::{case_fingerprint, Case};
use crate::opf::{solve_opf, OpfStatus};

pub const SCHEMA_VERSION: u32 = 1;

/// Target reward of an oracle-optimal action after calibration, points.
pub const OPTIMAL_REWARD_POINTS: f64 = 500.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("scenario dimensions do not match the case ({0})")]
    DimensionMismatch(String),
    #[error("oracle failure rate {rate:.3} exceeded the configured threshold {threshold:.3}")]
    OracleFailureRate { rate: f64, threshold: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("file is corrupt: {0}")]
    Corrupt(String),
    #[error("dataset was generated for a different case (fingerprint {expected}.. != {got}..)")]
    FingerprintMismatch { expected: String, got: String },
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
}

/// One operating condition, optionally labeled with the oracle optimum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    /// Per-bus loads, MW / MVAr.
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
    /// Initial generator settings, MW / p.u.
    pub pg0: Vec<f64>,
    pub vg0: Vec<f64>,
    /// Oracle labels, present only for feasible scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pg_opt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vg_opt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_opt: Option<f64>,
    /// Per-scenario reward correction: optimal cost maps to exactly
    /// [`OPTIMAL_REWARD_POINTS`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub feasible: bool,
}

impl Scenario {
    pub fn labeled(&self) -> bool {
        self.pg_opt.is_some() && self.vg_opt.is_some() && self.cost_opt.is_some()
    }
}

/// Affine map from cost to reward points, shared by every scenario of a
/// dataset: reward = k * cost + b + z.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Calibration {
    pub k: f64,
    pub b: f64,
    /// Set when the cost span was too small to anchor the map.
    pub degenerate: bool,
}

impl Calibration {
    /// Fit so the cheapest labeled cost maps to 500 points and the most
    /// expensive to 0; z then corrects every scenario to exactly 500.
    pub fn fit(costs: &[f64]) -> Option<Calibration> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &c in costs {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        if costs.is_empty() || !lo.is_finite() {
            return None;
        }
        let span = hi - lo;
        if span < 1e-9 {
            return Some(Calibration { k: -1.0, b: OPTIMAL_REWARD_POINTS + hi, degenerate: true });
        }
        Some(Calibration {
            k: -OPTIMAL_REWARD_POINTS / span,
            b: OPTIMAL_REWARD_POINTS * hi / span,
            degenerate: false,
        })
    }

    pub fn z_for(&self, cost: f64) -> f64 {
        OPTIMAL_REWARD_POINTS - (self.k * cost + self.b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub fingerprint: String,
    pub seed: u64,
    pub load_range: (f64, f64),
    pub calibration: Option<Calibration>,
    pub scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn labeled_costs(&self) -> Vec<f64> {
        self.scenarios.iter().filter_map(|s| s.cost_opt).collect()
    }

    /// Recompute (k, b) from this dataset's labeled costs and refresh every
    /// scenario's z.
    pub fn calibrate(&mut self) {
        self.calibration = Calibration::fit(&self.labeled_costs());
        self.apply_calibration_z();
    }

    /// Refresh z from the current calibration (used after copying train
    /// calibration onto a test split).
    pub fn apply_calibration_z(&mut self) {
        let Some(cal) = self.calibration else {
            for s in self.scenarios.iter_mut() {
                s.z = None;
            }
            return;
        };
        for s in self.scenarios.iter_mut() {
            s.z = s.cost_opt.map(|c| cal.z_for(c));
        }
    }
}

/// Copy a scenario's loads and initial settings into a case.
pub fn apply_scenario(case: &Case, scenario: &Scenario) -> Result<Case, DatasetError> {
    if scenario.pd.len() != case.bus_count()
        || scenario.qd.len() != case.bus_count()
        || scenario.pg0.len() != case.gen_count()
        || scenario.vg0.len() != case.gen_count()
    {
        return Err(DatasetError::DimensionMismatch(format!(
            "case has {} buses / {} generators, scenario has {} / {}",
            case.bus_count(),
            case.gen_count(),
            scenario.pd.len(),
            scenario.pg0.len()
        )));
    }
    let mut out = case.clone();
    for (i, b) in out.buses.iter_mut().enumerate() {
        b.pd = scenario.pd[i];
        b.qd = scenario.qd[i];
    }
    for (k, g) in out.generators.iter_mut().enumerate() {
        g.pg = scenario.pg0[k];
        g.vg = scenario.vg0[k];
    }
    Ok(out)
}

/// Draw `n` unlabeled scenarios: every bus load scaled by its own uniform
/// multiplier in `load_range` (constant power factor), generator settings
/// uniform inside their boxes. Reproducible from the seed.
pub fn generate_scenarios(case: &Case, n: usize, load_range: (f64, f64), seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw_scenario(case, load_range, &mut rng)).collect()
}

fn draw_scenario<R: Rng>(case: &Case, (lo, hi): (f64, f64), rng: &mut R) -> Scenario {
    let mut pd = Vec::with_capacity(case.bus_count());
    let mut qd = Vec::with_capacity(case.bus_count());
    for b in &case.buses {
        let mult = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        pd.push(b.pd * mult);
        qd.push(b.qd * mult);
    }
    let mut pg0 = Vec::with_capacity(case.gen_count());
    let mut vg0 = Vec::with_capacity(case.gen_count());
    for g in &case.generators {
        pg0.push(rng.gen_range(g.pmin..=g.pmax));
        let (vmin, vmax) = case.gen_v_limits(g);
        vg0.push(rng.gen_range(vmin..=vmax));
    }
    Scenario {
        pd,
        qd,
        pg0,
        vg0,
        pg_opt: None,
        vg_opt: None,
        cost_opt: None,
        z: None,
        feasible: false,
    }
}

#[derive(Debug)]
pub struct LabelOutcome {
    pub dataset: Dataset,
    pub attempted: usize,
    pub dropped: usize,
}

/// Solve the OPF for every scenario, keep the feasible ones with their
/// labels, and fit the reward calibration. Aborts (keeping partial output)
/// when the oracle failure rate exceeds `max_failure_rate`.
pub fn label_scenarios(
    case: &Case,
    scenarios: Vec<Scenario>,
    seed: u64,
    load_range: (f64, f64),
    max_failure_rate: f64,
) -> Result<LabelOutcome, (DatasetError, Box<LabelOutcome>)> {
    let mut labeled = Vec::new();
    let mut attempted = 0;
    let mut dropped = 0;
    for mut scenario in scenarios {
        attempted += 1;
        match label_one(case, &mut scenario) {
            Ok(true) => labeled.push(scenario),
            Ok(false) => dropped += 1,
            Err(_) => dropped += 1,
        }
    }
    let mut dataset = Dataset {
        fingerprint: case_fingerprint(case),
        seed,
        load_range,
        calibration: None,
        scenarios: labeled,
    };
    dataset.calibrate();
    let outcome = LabelOutcome { dataset, attempted, dropped };
    let rate = if attempted == 0 { 0.0 } else { dropped as f64 / attempted as f64 };
    if rate > max_failure_rate {
        let err = DatasetError::OracleFailureRate { rate, threshold: max_failure_rate };
        return Err((err, Box::new(outcome)));
    }
    Ok(outcome)
}

/// Label a single scenario in place; returns whether it is feasible.
pub fn label_one(case: &Case, scenario: &mut Scenario) -> Result<bool, DatasetError> {
    let scen_case = apply_scenario(case, scenario)?;
    let sol = solve_opf(&scen_case).map_err(|e| DatasetError::DimensionMismatch(e.to_string()))?;
    if sol.status == OpfStatus::Optimal {
        scenario.pg_opt = Some(sol.pg_opt);
        scenario.vg_opt = Some(sol.vg_opt);
        scenario.cost_opt = Some(sol.objective);
        scenario.feasible = true;
        Ok(true)
    } else {
        scenario.feasible = false;
        Ok(false)
    }
}

/// Shuffled disjoint split. Calibration is fitted on the train part only
/// and copied onto the test part, whose per-scenario z values are then
/// derived from the train calibration.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DatasetError::BadFractions(train_fraction));
    }
    let n = dataset.scenarios.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    let pick = |ids: &[usize]| Dataset {
        fingerprint: dataset.fingerprint.clone(),
        seed: dataset.seed,
        load_range: dataset.load_range,
        calibration: None,
        scenarios: ids.iter().map(|&i| dataset.scenarios[i].clone()).collect(),
    };
    let mut train = pick(&idx[..n_train]);
    let mut test = pick(&idx[n_train..]);
    train.calibrate();
    test.calibration = train.calibration;
    test.apply_calibration_z();
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    fingerprint: String,
    seed: u64,
    load_range: (f64, f64),
    calibration: Option<Calibration>,
    n_scenarios: usize,
    checksum: String,
}

/// Serialize to the JSON-lines format. Byte-identical for identical
/// datasets.
pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut body = String::new();
    for s in &dataset.scenarios {
        body.push_str(&serde_json::to_string(s).expect("serializable"));
        body.push('\n');
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        fingerprint: dataset.fingerprint.clone(),
        seed: dataset.seed,
        load_range: dataset.load_range,
        calibration: dataset.calibration,
        n_scenarios: dataset.scenarios.len(),
        checksum: hex_digest(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&header).expect("serializable");
    out.push('\n');
    out.push_str(&body);
    out.into_bytes()
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, to_bytes(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    from_str(&text)
}

pub fn from_str(text: &str) -> Result<Dataset, DatasetError> {
    let mut lines = text.split_inclusive('\n');
    let header_line = lines.next().ok_or_else(|| DatasetError::Corrupt("empty file".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| DatasetError::Format { line: 1, msg: e.to_string() })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::SchemaVersion(header.schema_version));
    }
    let body: String = lines.collect();
    if hex_digest(body.as_bytes()) != header.checksum {
        return Err(DatasetError::Corrupt("checksum mismatch".into()));
    }
    let mut scenarios = Vec::with_capacity(header.n_scenarios);
    for (i, line) in body.lines().enumerate() {
        let s: Scenario = serde_json::from_str(line)
            .map_err(|e| DatasetError::Format { line: i + 2, msg: e.to_string() })?;
        scenarios.push(s);
    }
    if scenarios.len() != header.n_scenarios {
        return Err(DatasetError::Corrupt(format!(
            "header promises {} scenarios, found {}",
            header.n_scenarios,
            scenarios.len()
        )));
    }
    Ok(Dataset {
        fingerprint: header.fingerprint,
        seed: header.seed,
        load_range: header.load_range,
        calibration: header.calibration,
        scenarios,
    })
}

/// Load and verify the dataset belongs to the given case.
pub fn load_for_case(path: &Path, case: &Case) -> Result<Dataset, DatasetError> {
    let dataset = load(path)?;
    let expected = case_fingerprint(case);
    if dataset.fingerprint != expected {
        return Err(DatasetError::FingerprintMismatch {
            expected: expected[..12].to_string(),
            got: dataset.fingerprint.get(..12).unwrap_or(&dataset.fingerprint).to_string(),
        });
    }
    Ok(dataset)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
}
