//! Supervised actor initialization: regress the actor's Sigmoid outputs
//! onto oracle-optimal setpoints before any PPO training.
//!
//! Inputs are the load block of the observation (the actor never sees the
//! current setpoints); targets are the optimal settings min-max normalized
//! into (0, 1) by the generator boxes. Losses are reported both in
//! normalized units (training curve) and denormalized to MW / p.u.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::Case;
use crate::dataset::Scenario;
use crate::env::SetpointBoxes;
use crate::nn::{adam_step, sgd_step, Activation, AdamState, MlpParams, PolicyParams};

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("dataset has no labeled scenarios")]
    EmptyDataset,
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImitationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub minibatch_size: usize,
    /// Fraction of examples held out for the validation curve.
    pub holdout_fraction: f64,
    pub optimizer: Optimizer,
    /// Hidden layer widths of the actor built here.
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    pub seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            minibatch_size: 64,
            holdout_fraction: 0.01,
            optimizer: Optimizer::Adam,
            hidden: vec![64, 64],
            log_std_init: -1.0,
            seed: 0,
        }
    }
}

/// Feature/target pair in normalized units.
struct Example {
    x: Vec<f64>,
    y: Vec<f64>,
}

fn build_examples(case: &Case, scenarios: &[Scenario]) -> Vec<Example> {
    let boxes = SetpointBoxes::from_case(case);
    scenarios
        .iter()
        .filter(|s| s.labeled())
        .map(|s| {
            let mut x = Vec::with_capacity(2 * case.bus_count());
            x.extend(s.pd.iter().map(|p| p / case.base_mva));
            x.extend(s.qd.iter().map(|q| q / case.base_mva));
            let y = boxes.normalize(s.pg_opt.as_ref().unwrap(), s.vg_opt.as_ref().unwrap());
            Example { x, y }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean squared error in normalized units.
    pub train_mse: f64,
    pub holdout_mse: f64,
}

pub struct PretrainResult {
    pub policy: PolicyParams,
    pub curve: Vec<EpochLoss>,
    /// Positions of the held-out examples within the labeled subsequence
    /// of the input scenarios, in input order filtered to labeled ones.
    pub holdout_indices: Vec<usize>,
}

/// Minibatch regression of the actor onto the labels. Deterministic for a
/// fixed seed and dataset order.
pub fn pretrain_actor(
    case: &Case,
    scenarios: &[Scenario],
    cfg: &ImitationConfig,
) -> Result<PretrainResult, ImitationError> {
    let examples = build_examples(case, scenarios);
    if examples.is_empty() {
        return Err(ImitationError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![2 * case.bus_count()];
    dims.extend(&cfg.hidden);
    dims.push(2 * case.gen_count());
    let mut actor = MlpParams::new(&dims, Activation::Relu, Activation::Sigmoid, &mut rng);
    let mut opt = AdamState::new(&actor);

    // shuffled split
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_holdout = ((examples.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.min(examples.len().saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let matrixify = |ids: &[usize]| -> (DMatrix<f64>, DMatrix<f64>) {
        let xs = DMatrix::from_fn(ids.len(), examples[0].x.len(), |r, c| examples[ids[r]].x[c]);
        let ys = DMatrix::from_fn(ids.len(), examples[0].y.len(), |r, c| examples[ids[r]].y[c]);
        (xs, ys)
    };
    let (train_x, train_y) = matrixify(train_idx);
    let (hold_x, hold_y) = matrixify(holdout_idx);

    let mse = |actor: &MlpParams, x: &DMatrix<f64>, y: &DMatrix<f64>| -> f64 {
        if x.nrows() == 0 {
            return f64::NAN;
        }
        let p = actor.forward(x).expect("shapes fixed");
        (p - y).map(|e| e * e).sum() / (y.nrows() * y.ncols()) as f64
    };

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch_order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..batch_order.len()).rev() {
            let j = rng.gen_range(0..=i);
            batch_order.swap(i, j);
        }
        for chunk in batch_order.chunks(cfg.minibatch_size) {
            let xb = DMatrix::from_fn(chunk.len(), train_x.ncols(), |r, c| train_x[(chunk[r], c)]);
            let yb = DMatrix::from_fn(chunk.len(), train_y.ncols(), |r, c| train_y[(chunk[r], c)]);
            let cache = actor.forward_cached(&xb)?;
            let pred = cache.output();
            let scale = 2.0 / (yb.nrows() * yb.ncols()) as f64;
            let upstream = (pred - &yb) * scale;
            let grads = actor.backward_cached(&cache, &upstream);
            match cfg.optimizer {
                Optimizer::Adam => adam_step(&mut actor, &grads, &mut opt, cfg.lr),
                Optimizer::Sgd => sgd_step(&mut actor, &grads, cfg.lr),
            }
        }
        let train_mse = mse(&actor, &train_x, &train_y);
        let holdout_mse = if n_holdout > 0 { mse(&actor, &hold_x, &hold_y) } else { train_mse };
        if !train_mse.is_finite() {
            return Err(ImitationError::NonFinite(epoch));
        }
        curve.push(EpochLoss { epoch, train_mse, holdout_mse });
    }

    Ok(PretrainResult {
        policy: PolicyParams {
            actor,
            log_std: DVector::from_element(2 * case.gen_count(), cfg.log_std_init),
        },
        curve,
        holdout_indices: holdout_idx.to_vec(),
    })
}

/// Per-block mean squared error in physical units (MW^2 for the active
/// power block, p.u.^2 for the voltage block).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BlockMse {
    pub mse_p_mw2: f64,
    pub mse_v_pu2: f64,
}

impl BlockMse {
    pub fn rmse_p_mw(&self) -> f64 {
        self.mse_p_mw2.sqrt()
    }

    pub fn rmse_v_pu(&self) -> f64 {
        self.mse_v_pu2.sqrt()
    }
}

/// Denormalized error arithmetic shared by `eval_mse` and its tests:
/// predictions and labels are normalized rows in action layout.
pub fn mse_from_predictions(
    case: &Case,
    predictions: &DMatrix<f64>,
    labels: &DMatrix<f64>,
) -> BlockMse {
    let s = case.gen_count();
    let boxes = SetpointBoxes::from_case(case);
    let n = predictions.nrows();
    let mut sum_p = 0.0;
    let mut sum_v = 0.0;
    for r in 0..n {
        for k in 0..s {
            let (lo, hi) = boxes.p[k];
            let err = (predictions[(r, k)] - labels[(r, k)]) * (hi - lo);
            sum_p += err * err;
            let (lo, hi) = boxes.v[k];
            let err = (predictions[(r, s + k)] - labels[(r, s + k)]) * (hi - lo);
            sum_v += err * err;
        }
    }
    BlockMse {
        mse_p_mw2: sum_p / (n * s) as f64,
        mse_v_pu2: sum_v / (n * s) as f64,
    }
}

/// Run the actor over every labeled scenario and report block MSE in
/// physical units.
pub fn eval_mse(
    case: &Case,
    actor: &MlpParams,
    scenarios: &[Scenario],
) -> Result<BlockMse, ImitationError> {
    let examples = build_examples(case, scenarios);
    if examples.is_empty() {
        return Err(ImitationError::EmptyDataset);
    }
    let x = DMatrix::from_fn(examples.len(), examples[0].x.len(), |r, c| examples[r].x[c]);
    let y = DMatrix::from_fn(examples.len(), examples[0].y.len(), |r, c| examples[r].y[c]);
    let preds = actor.forward(&x)?;
    Ok(mse_from_predictions(case, &preds, &y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::ieee14;
    use crate::dataset::generate_scenarios;
    use approx::assert_relative_eq;

    /// Synthetic smooth labels tied to the loads, so pretraining has
    /// structure to learn without running the OPF oracle.
    fn synthetic_labeled(case: &Case, n: usize, seed: u64) -> Vec<Scenario> {
        let boxes = SetpointBoxes::from_case(case);
        let mut scenarios = generate_scenarios(case, n, (0.6, 1.4), seed);
        for s in scenarios.iter_mut() {
            let total: f64 = s.pd.iter().sum::<f64>() / case.base_mva;
            let u = 1.0 / (1.0 + (-0.5 * (total - 2.59)).exp());
            let norm: Vec<f64> = (0..2 * case.gen_count())
                .map(|d| (0.2 + 0.6 * u * (1.0 + 0.1 * d as f64)).min(0.95))
                .collect();
            let (pg, vg) = boxes.denormalize(&norm);
            s.pg_opt = Some(pg);
            s.vg_opt = Some(vg);
            s.cost_opt = Some(5000.0 + 1000.0 * u);
            s.feasible = true;
        }
        scenarios
    }

    #[test]
    fn single_example_is_memorized() {
        let case = ieee14();
        let scenarios = synthetic_labeled(&case, 1, 5);
        let cfg = ImitationConfig {
            epochs: 400,
            lr: 1e-2,
            minibatch_size: 1,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let result = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        let last = result.curve.last().unwrap();
        assert!(last.train_mse < 1e-5, "train mse {}", last.train_mse);
        // with no holdout the curve mirrors train loss
        assert_eq!(last.train_mse, last.holdout_mse);
    }

    #[test]
    fn constant_labels_converge_to_constant_output() {
        let case = ieee14();
        let mut scenarios = synthetic_labeled(&case, 64, 6);
        let boxes = SetpointBoxes::from_case(&case);
        let norm = vec![0.4; 10];
        let (pg, vg) = boxes.denormalize(&norm);
        for s in scenarios.iter_mut() {
            s.pg_opt = Some(pg.clone());
            s.vg_opt = Some(vg.clone());
        }
        let cfg = ImitationConfig { epochs: 200, lr: 3e-3, ..Default::default() };
        let result = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        // any input maps near the constant label
        let x: Vec<f64> = scenarios[10]
            .pd
            .iter()
            .chain(scenarios[10].qd.iter())
            .map(|v| v / case.base_mva)
            .collect();
        let out = result.policy.actor.forward_one(&x).unwrap();
        for v in out {
            assert!((v - 0.4).abs() < 0.02, "output {v} vs 0.4");
        }
    }

    #[test]
    fn eval_mse_fixtures() {
        let case = ieee14();
        let boxes = SetpointBoxes::from_case(&case);
        let labels = DMatrix::from_element(4, 10, 0.5);
        // perfect predictions
        let out = mse_from_predictions(&case, &labels, &labels);
        assert_eq!(out.mse_p_mw2, 0.0);
        assert_eq!(out.mse_v_pu2, 0.0);
        // constant 1 MW offset on every P output
        let mut preds = labels.clone();
        for k in 0..5 {
            let (lo, hi) = boxes.p[k];
            for r in 0..4 {
                preds[(r, k)] += 1.0 / (hi - lo);
            }
        }
        let out = mse_from_predictions(&case, &preds, &labels);
        assert_relative_eq!(out.mse_p_mw2, 1.0, epsilon = 1e-12);
        assert_eq!(out.mse_v_pu2, 0.0);
        // 1e-3 p.u. offset on every V output
        let mut preds = labels.clone();
        for k in 0..5 {
            let (lo, hi) = boxes.v[k];
            for r in 0..4 {
                preds[(r, 5 + k)] += 1e-3 / (hi - lo);
            }
        }
        let out = mse_from_predictions(&case, &preds, &labels);
        assert_relative_eq!(out.mse_v_pu2, 1e-6, epsilon = 1e-18);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let case = ieee14();
        let scenarios = synthetic_labeled(&case, 50, 7);
        let cfg = ImitationConfig { epochs: 5, ..Default::default() };
        let a = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        let b = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        for (la, lb) in a.policy.actor.layers.iter().zip(&b.policy.actor.layers) {
            assert_eq!(la.w, lb.w);
        }
        let ma = eval_mse(&case, &a.policy.actor, &scenarios).unwrap();
        let mb = eval_mse(&case, &b.policy.actor, &scenarios).unwrap();
        assert_eq!(ma.mse_p_mw2.to_bits(), mb.mse_p_mw2.to_bits());
    }

    #[test]
    fn holdout_loss_improves_on_smoothed_average() {
        let case = ieee14();
        let scenarios = synthetic_labeled(&case, 400, 8);
        let cfg = ImitationConfig { epochs: 30, holdout_fraction: 0.1, ..Default::default() };
        let result = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        let smooth = |w: &[EpochLoss]| w.iter().map(|e| e.holdout_mse).sum::<f64>() / w.len() as f64;
        let first = smooth(&result.curve[..5]);
        let last = smooth(&result.curve[25..]);
        assert!(last < first, "holdout {last} vs initial {first}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval_mse() {
        let case = ieee14();
        let scenarios = synthetic_labeled(&case, 60, 9);
        let cfg = ImitationConfig { epochs: 10, ..Default::default() };
        let result = pretrain_actor(&case, &scenarios, &cfg).unwrap();
        let before = eval_mse(&case, &result.policy.actor, &scenarios).unwrap();
        let ckpt = crate::ckpt::Checkpoint::new(
            &case,
            &result.policy,
            None,
            crate::env::EnvConfig::default(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actor.json");
        crate::ckpt::save_checkpoint(&ckpt, &path).unwrap();
        let loaded = crate::ckpt::load_checkpoint(&path).unwrap().policy().unwrap();
        let after = eval_mse(&case, &loaded.actor, &scenarios).unwrap();
        assert_eq!(before.mse_p_mw2.to_bits(), after.mse_p_mw2.to_bits());
        assert_eq!(before.mse_v_pu2.to_bits(), after.mse_v_pu2.to_bits());
    }

    #[test]
    fn unlabeled_dataset_is_an_error() {
        let case = ieee14();
        let scenarios = generate_scenarios(&case, 5, (0.9, 1.1), 10);
        assert!(matches!(
            pretrain_actor(&case, &scenarios, &ImitationConfig::default()),
            Err(ImitationError::EmptyDataset)
        ));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let actor = MlpParams::new(&[28, 8, 10], Activation::Relu, Activation::Sigmoid, &mut rng);
        assert!(matches!(
            eval_mse(&case, &actor, &scenarios),
            Err(ImitationError::EmptyDataset)
        ));
    }
}
