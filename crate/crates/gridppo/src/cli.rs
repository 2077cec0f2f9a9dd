//! Command-line interface: power flow and OPF solves, dataset generation,
//! supervised pretraining, PPO training, and evaluation/reporting.
//!
//! Exit codes: 0 on success, 1 on usage or data errors, 2 on numerical
//! failure (diverged power flow, non-optimal OPF, aborted training).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::case::{override_branch_limit, parse_case, Case};
use crate::ckpt::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{self, Dataset};
use crate::env::EnvConfig;
use crate::eval::{evaluate_actor, emit_report, EvalMetrics};
use crate::imitation::{eval_mse, pretrain_actor, ImitationConfig, Optimizer};
use crate::opf::{solve_opf, OpfStatus};
use crate::pf::{check_violations, solve_pf};
use crate::ppo::{train_on_dataset, ArchConfig, GaeConfig, PpoConfig};

#[derive(Parser)]
#[command(
    name = "gridppo",
    about = "AC optimal power flow setpoints via supervised warm-start and PPO",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CaseArgs {
    /// Path to a case file (table format or JSON mirror).
    #[arg(long)]
    case: PathBuf,
    /// Replace a branch flow limit, written FROM:TO:MVA (e.g. 4:5:32).
    #[arg(long, value_name = "F:T:MVA")]
    set_branch_limit: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow and print voltages, generation, flows and
    /// limit violations.
    SolvePf {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        json: bool,
    },
    /// Solve the AC optimal power flow and print the optimal dispatch.
    SolveOpf {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        json: bool,
    },
    /// Generate scenarios, label them with the OPF oracle, and write a
    /// dataset (optionally split into train/test files).
    GenData {
        #[command(flatten)]
        case: CaseArgs,
        /// Number of raw scenarios to draw.
        #[arg(long)]
        n: usize,
        /// Stop once this many labeled-feasible scenarios are collected.
        #[arg(long)]
        keep: Option<usize>,
        /// Load multiplier range, written LO:HI.
        #[arg(long, default_value = "0.6:1.4")]
        range: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ingest labels from a JSON-lines file instead of running the
        /// oracle (one record per generated scenario).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Abort when the oracle failure rate exceeds this fraction.
        #[arg(long, default_value_t = 0.9)]
        max_failure: f64,
        /// Train fraction; writes <out-stem>.train/.test alongside --out.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Supervised actor initialization from oracle labels.
    Pretrain {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Held-out fraction for the loss curve.
        #[arg(long, default_value_t = 0.01)]
        holdout: f64,
        /// Use only the first FRACTION of the dataset (0..1], e.g. 0.18.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, value_parser = ["sgd", "adam"], default_value = "adam")]
        optimizer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-epoch loss curve CSV here.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// PPO fine-tuning on a labeled training dataset.
    Train {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Warm-start actor checkpoint (from pretrain or a previous run).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Dataset slice for periodic success-rate evaluation.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config update count.
        #[arg(long)]
        updates: Option<usize>,
    },
    /// Evaluate a checkpoint on a test dataset.
    Eval {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        /// Report file stem; writes <stem>.csv, <stem>_summary.json,
        /// <stem>_series.csv and <stem>_records.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit report files from a saved records JSON.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Whole-file training configuration (TOML). The reward's (k, b, z) fields
/// are overwritten from the dataset calibration at train time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    pub seed: u64,
    pub eval_every: usize,
    pub eval_scenarios: usize,
    pub ppo: PpoConfig,
    pub gae: GaeConfig,
    pub env: EnvConfig,
    pub arch: ArchConfig,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_every: 10,
            eval_scenarios: 200,
            ppo: PpoConfig::default(),
            gae: GaeConfig::default(),
            env: EnvConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the error path with status 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SolvePf { case, json } => cmd_solve_pf(&load_case(&case)?, json),
        Command::SolveOpf { case, json } => cmd_solve_opf(&load_case(&case)?, json),
        Command::GenData {
            case,
            n,
            keep,
            range,
            seed,
            out,
            labels,
            max_failure,
            split,
            split_seed,
        } => cmd_gen_data(
            &load_case(&case)?,
            n,
            keep,
            &range,
            seed,
            &out,
            labels.as_deref(),
            max_failure,
            split,
            split_seed,
        ),
        Command::Pretrain {
            case,
            data,
            epochs,
            lr,
            batch,
            holdout,
            fraction,
            optimizer,
            seed,
            out,
            curve,
        } => {
            let case = load_case(&case)?;
            let cfg = ImitationConfig {
                epochs,
                lr,
                minibatch_size: batch,
                holdout_fraction: holdout,
                optimizer: if optimizer == "sgd" { Optimizer::Sgd } else { Optimizer::Adam },
                seed,
                ..Default::default()
            };
            cmd_pretrain(&case, &data, &cfg, fraction, &out, curve.as_deref())
        }
        Command::Train { case, data, config, init, out, log, eval_data, seed, updates } => {
            let case = load_case(&case)?;
            let mut cfg = match config {
                None => TrainFileConfig::default(),
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(usage)?;
                    toml::from_str(&text).map_err(usage)?
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(u) = updates {
                cfg.ppo.total_updates = u;
            }
            cmd_train(&case, &data, &cfg, init.as_deref(), &out, log.as_deref(), eval_data.as_deref())
        }
        Command::Eval { case, data, ckpt, horizon, out } => {
            cmd_eval(&load_case(&case)?, &data, &ckpt, horizon, out.as_deref())
        }
        Command::Report { records, out } => cmd_report(&records, &out),
    }
}

fn load_case(args: &CaseArgs) -> Result<Case, CliError> {
    let text = std::fs::read_to_string(&args.case).map_err(usage)?;
    let mut case = parse_case(&text).map_err(usage)?;
    if let Some(arg) = &args.set_branch_limit {
        let parts: Vec<&str> = arg.split(':').collect();
        if parts.len() != 3 {
            return Err(usage("--set-branch-limit expects FROM:TO:MVA"));
        }
        let from: usize = parts[0].parse().map_err(usage)?;
        let to: usize = parts[1].parse().map_err(usage)?;
        let mva: f64 = parts[2].parse().map_err(usage)?;
        case = override_branch_limit(&case, from, to, mva).map_err(usage)?;
    }
    Ok(case)
}

fn cmd_solve_pf(case: &Case, json: bool) -> Result<(), CliError> {
    let outcome = solve_pf(case).map_err(usage)?;
    match outcome.solution() {
        None => {
            if json {
                println!("{{\"converged\": false}}");
            } else {
                println!("power flow diverged");
            }
            Err(CliError::Numerical("power flow diverged".into()))
        }
        Some(sol) => {
            let report = check_violations(case, sol);
            if json {
                let payload = serde_json::json!({
                    "converged": true,
                    "iterations": sol.iterations,
                    "vm": sol.v.iter().map(|v| v.norm()).collect::<Vec<_>>(),
                    "va_deg": sol.v.iter().map(|v| v.arg().to_degrees()).collect::<Vec<_>>(),
                    "pg_mw": sol.pg_out,
                    "qg_mvar": sol.qg_out,
                    "sf_mva": sol.sf,
                    "st_mva": sol.st,
                    "violations": {
                        "pgen": report.pgen,
                        "vbus": report.vbus,
                        "branch": report.branch.iter()
                            .map(|(i, end, e)| (i, format!("{end:?}"), e))
                            .collect::<Vec<_>>(),
                    },
                });
                println!("{}", serde_json::to_string_pretty(&payload).expect("serializable"));
            } else {
                println!("converged in {} iterations", sol.iterations);
                println!("bus   Vm (p.u.)   Va (deg)");
                for (i, b) in case.buses.iter().enumerate() {
                    println!(
                        "{:>3}   {:9.5}  {:9.4}",
                        b.id,
                        sol.v[i].norm(),
                        sol.v[i].arg().to_degrees()
                    );
                }
                println!("gen bus   Pg (MW)    Qg (MVAr)");
                for (k, g) in case.generators.iter().enumerate() {
                    println!("{:>7}  {:9.3}  {:9.3}", g.bus, sol.pg_out[k], sol.qg_out[k]);
                }
                println!("branch     Sf (MVA)   St (MVA)");
                for (i, br) in case.branches.iter().enumerate() {
                    println!("{:>3}-{:<3}  {:9.3}  {:9.3}", br.from, br.to, sol.sf[i], sol.st[i]);
                }
                if report.is_empty() {
                    println!("no violations");
                } else {
                    println!("violations: {report:?}");
                }
            }
            Ok(())
        }
    }
}

fn cmd_solve_opf(case: &Case, json: bool) -> Result<(), CliError> {
    let sol = solve_opf(case).map_err(usage)?;
    if json {
        let payload = serde_json::json!({
            "status": format!("{:?}", sol.status),
            "objective": sol.objective,
            "pg_mw": sol.pg_opt,
            "vg_pu": sol.vg_opt,
            "iterations": sol.iterations,
            "kkt_residual": sol.kkt_residual,
        });
        println!("{}", serde_json::to_string_pretty(&payload).expect("serializable"));
    } else {
        println!("status: {:?} ({} iterations)", sol.status, sol.iterations);
        println!("objective: {:.4} $/h", sol.objective);
        println!("gen bus   Pg* (MW)   Vg* (p.u.)");
        for (k, g) in case.generators.iter().enumerate() {
            println!("{:>7}  {:9.3}   {:8.5}", g.bus, sol.pg_opt[k], sol.vg_opt[k]);
        }
    }
    if sol.status == OpfStatus::Optimal {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("OPF did not reach optimality: {:?}", sol.status)))
    }
}

#[derive(Deserialize)]
struct ExternalLabel {
    pg_opt: Option<Vec<f64>>,
    vg_opt: Option<Vec<f64>>,
    cost_opt: Option<f64>,
    feasible: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    case: &Case,
    n: usize,
    keep: Option<usize>,
    range: &str,
    seed: u64,
    out: &Path,
    labels: Option<&Path>,
    max_failure: f64,
    split: Option<f64>,
    split_seed: u64,
) -> Result<(), CliError> {
    let (lo, hi) = parse_range(range)?;
    let raw = dataset::generate_scenarios(case, n, (lo, hi), seed);

    let outcome = if let Some(labels_path) = labels {
        ingest_labels(case, raw, labels_path, seed, (lo, hi))?
    } else {
        let mut labeled = Vec::new();
        let mut attempted = 0;
        let mut dropped = 0;
        for mut scenario in raw {
            if keep.is_some_and(|k| labeled.len() >= k) {
                break;
            }
            attempted += 1;
            match dataset::label_one(case, &mut scenario) {
                Ok(true) => labeled.push(scenario),
                _ => dropped += 1,
            }
        }
        let mut ds = Dataset {
            fingerprint: crate::case::case_fingerprint(case),
            seed,
            load_range: (lo, hi),
            calibration: None,
            scenarios: labeled,
        };
        ds.calibrate();
        let rate = if attempted == 0 { 0.0 } else { dropped as f64 / attempted as f64 };
        eprintln!(
            "labeled {} of {attempted} scenarios ({dropped} infeasible dropped, rate {rate:.3})",
            ds.scenarios.len()
        );
        if rate > max_failure {
            dataset::save(&ds, out).map_err(usage)?;
            return Err(CliError::Numerical(format!(
                "oracle failure rate {rate:.3} exceeds {max_failure}; partial output kept at {}",
                out.display()
            )));
        }
        dataset::LabelOutcome { dataset: ds, attempted, dropped }
    };

    let ds = outcome.dataset;
    dataset::save(&ds, out).map_err(usage)?;
    println!("wrote {} scenarios to {}", ds.scenarios.len(), out.display());

    if let Some(frac) = split {
        let (train, test) = dataset::split(&ds, frac, split_seed).map_err(usage)?;
        let train_path = sibling(out, ".train.jsonl");
        let test_path = sibling(out, ".test.jsonl");
        dataset::save(&train, &train_path).map_err(usage)?;
        dataset::save(&test, &test_path).map_err(usage)?;
        println!(
            "split {} / {} into {} and {}",
            train.scenarios.len(),
            test.scenarios.len(),
            train_path.display(),
            test_path.display()
        );
    }
    Ok(())
}

fn ingest_labels(
    case: &Case,
    mut raw: Vec<crate::dataset::Scenario>,
    labels_path: &Path,
    seed: u64,
    load_range: (f64, f64),
) -> Result<dataset::LabelOutcome, CliError> {
    let text = std::fs::read_to_string(labels_path).map_err(usage)?;
    let mut labeled = Vec::new();
    let mut dropped = 0;
    let mut lines = text.lines();
    for scenario in raw.iter_mut() {
        let Some(line) = lines.next() else {
            return Err(usage("label file has fewer records than generated scenarios"));
        };
        let label: ExternalLabel = serde_json::from_str(line).map_err(usage)?;
        if label.feasible {
            scenario.pg_opt = label.pg_opt;
            scenario.vg_opt = label.vg_opt;
            scenario.cost_opt = label.cost_opt;
            scenario.feasible = true;
            if !scenario.labeled() {
                return Err(usage("feasible label record is missing pg_opt/vg_opt/cost_opt"));
            }
            labeled.push(scenario.clone());
        } else {
            dropped += 1;
        }
    }
    let attempted = labeled.len() + dropped;
    let mut ds = Dataset {
        fingerprint: crate::case::case_fingerprint(case),
        seed,
        load_range,
        calibration: None,
        scenarios: labeled,
    };
    ds.calibrate();
    Ok(dataset::LabelOutcome { dataset: ds, attempted, dropped })
}

fn cmd_pretrain(
    case: &Case,
    data: &Path,
    cfg: &ImitationConfig,
    fraction: f64,
    out: &Path,
    curve: Option<&Path>,
) -> Result<(), CliError> {
    let ds = dataset::load_for_case(data, case).map_err(usage)?;
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(usage("--fraction must be in (0, 1]"));
    }
    let take = ((ds.scenarios.len() as f64) * fraction).ceil() as usize;
    let slice = &ds.scenarios[..take.min(ds.scenarios.len())];
    let result = pretrain_actor(case, slice, cfg).map_err(usage)?;
    let mse = eval_mse(case, &result.policy.actor, slice).map_err(usage)?;
    println!(
        "trained on {} scenarios: MSE {:.6} MW^2 / {:.3e} p.u.^2 (RMSE {:.4} MW / {:.2e} p.u.)",
        slice.len(),
        mse.mse_p_mw2,
        mse.mse_v_pu2,
        mse.rmse_p_mw(),
        mse.rmse_v_pu()
    );
    let mut ckpt = Checkpoint::new(case, &result.policy, None, EnvConfig::default());
    if let Some(cal) = ds.calibration {
        ckpt.env.reward.k = cal.k;
        ckpt.env.reward.b = cal.b;
    }
    save_checkpoint(&ckpt, out).map_err(usage)?;
    println!("checkpoint written to {}", out.display());
    if let Some(curve_path) = curve {
        let mut csv = String::from("epoch,train_mse,holdout_mse\n");
        for row in &result.curve {
            let _ = writeln!(csv, "{},{},{}", row.epoch, row.train_mse, row.holdout_mse);
        }
        std::fs::write(curve_path, csv).map_err(usage)?;
    }
    Ok(())
}

fn cmd_train(
    case: &Case,
    data: &Path,
    cfg: &TrainFileConfig,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    eval_data: Option<&Path>,
) -> Result<(), CliError> {
    let train_ds = dataset::load_for_case(data, case).map_err(usage)?;
    let (mut policy, mut critic) = cfg.arch.build(case, cfg.seed);
    let mut resume = None;
    if let Some(init_path) = init {
        let ckpt = load_checkpoint(init_path).map_err(usage)?;
        ckpt.verify_case(case).map_err(usage)?;
        policy = ckpt.policy().map_err(usage)?;
        if let Some(c) = ckpt.critic_params().map_err(usage)? {
            critic = c;
        }
        resume = ckpt.optimizer;
    }

    let eval_ds = match eval_data {
        None => None,
        Some(path) => Some(dataset::load_for_case(path, case).map_err(usage)?),
    };
    let mut env_cfg = cfg.env.clone();
    if let Some(cal) = train_ds.calibration {
        env_cfg.reward.k = cal.k;
        env_cfg.reward.b = cal.b;
    }
    let eval_cfg = env_cfg.clone();
    let horizon = cfg.env.horizon;
    let n_eval = cfg.eval_scenarios;
    let mut eval_hook = eval_ds.map(|ds| {
        let case = case.clone();
        move |policy: &crate::nn::PolicyParams| -> f64 {
            let slice = Dataset {
                scenarios: ds.scenarios.iter().take(n_eval).cloned().collect(),
                ..ds.clone()
            };
            evaluate_actor(&case, &policy.actor, &slice, &eval_cfg, horizon)
                .map(|m| m.success_rate)
                .unwrap_or(f64::NAN)
        }
    });

    let report = train_on_dataset(
        case,
        &train_ds,
        &mut policy,
        &mut critic,
        &cfg.ppo,
        &cfg.gae,
        cfg.env.clone(),
        cfg.seed,
        cfg.eval_every,
        eval_hook.as_mut().map(|f| f as &mut dyn FnMut(&crate::nn::PolicyParams) -> f64),
        resume.as_ref(),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut ckpt = Checkpoint::new(case, &policy, Some(&critic), env_cfg);
    if let Some(cal) = train_ds.calibration {
        ckpt.env.reward.k = cal.k;
        ckpt.env.reward.b = cal.b;
    }
    ckpt.optimizer = Some(report.optimizer);
    save_checkpoint(&ckpt, out).map_err(usage)?;

    if let Some(log_path) = log {
        let mut csv = String::from(
            "update,mean_return,actor_loss,critic_loss,clip_fraction,eval_success_rate\n",
        );
        for row in &report.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                row.update,
                row.mean_return,
                row.actor_loss,
                row.critic_loss,
                row.clip_fraction,
                row.eval_success_rate.map_or_else(String::new, |v| v.to_string()),
            );
        }
        std::fs::write(log_path, csv).map_err(usage)?;
    }
    let final_return = report.rows.last().map_or(f64::NAN, |r| r.mean_return);
    println!(
        "{} updates, final mean return {final_return:.1}, checkpoint at {}",
        report.rows.len(),
        out.display()
    );
    if report.aborted {
        return Err(CliError::Numerical(
            "training aborted on non-finite loss; last good checkpoint kept".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(
    case: &Case,
    data: &Path,
    ckpt_path: &Path,
    horizon: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ds = dataset::load_for_case(data, case).map_err(usage)?;
    let ckpt = load_checkpoint(ckpt_path).map_err(usage)?;
    ckpt.verify_case(case).map_err(usage)?;
    let policy = ckpt.policy().map_err(usage)?;
    let metrics = evaluate_actor(case, &policy.actor, &ds, &ckpt.env, horizon)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    print_metrics(&metrics);
    if let Some(stem) = out {
        emit_report(&metrics, stem).map_err(usage)?;
        let records = FullRecords { metrics: &metrics };
        let mut records_path = stem.as_os_str().to_owned();
        records_path.push("_records.json");
        std::fs::write(
            Path::new(&records_path),
            serde_json::to_string(&records).expect("serializable"),
        )
        .map_err(usage)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FullRecords<'a> {
    metrics: &'a EvalMetrics,
}

fn print_metrics(metrics: &EvalMetrics) {
    println!(
        "success rate: {:.2}% ({} of {})",
        100.0 * metrics.success_rate,
        metrics.n_success,
        metrics.n_scenarios
    );
    if let (Some(mean), Some(max)) = (metrics.mean_cost_deviation, metrics.max_cost_deviation) {
        println!("cost deviation over successes: mean {mean:.3}%, max {max:.3}%");
    }
    println!(
        "failures: {} branch, {} vbus, {} pgen, {} diverged",
        metrics.breakdown.branch,
        metrics.breakdown.vbus,
        metrics.breakdown.pgen,
        metrics.breakdown.diverged
    );
}

fn cmd_report(records: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(records).map_err(usage)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(usage)?;
    let metrics: EvalMetrics =
        serde_json::from_value(value.get("metrics").cloned().unwrap_or(value)).map_err(usage)?;
    emit_report(&metrics, out).map_err(usage)?;
    println!("report written to {}*", out.display());
    Ok(())
}

fn parse_range(arg: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = arg.split(':').collect();
    if parts.len() != 2 {
        return Err(usage("--range expects LO:HI"));
    }
    let lo: f64 = parts[0].parse().map_err(usage)?;
    let hi: f64 = parts[1].parse().map_err(usage)?;
    if lo <= 0.0 || hi < lo {
        return Err(usage("--range needs 0 < LO <= HI"));
    }
    Ok((lo, hi))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}
