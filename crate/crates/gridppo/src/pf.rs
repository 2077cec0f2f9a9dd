//! Newton-Raphson AC power flow with generator reactive-limit enforcement.
//!
//! Voltages are polar; free variables are the angles of all non-slack buses
//! followed by the magnitudes of PQ buses. Divergence is a value returned to
//! the caller, not an error: the RL environment treats it as an episode
//! terminator.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::case::{build_ybus, validate_case, BusKind, Case, CaseError};

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITER: usize = 20;
pub const PF_MAX_QLIM_PASSES: usize = 6;

/// Excesses smaller than these are treated as numerical noise when building
/// a violation report, so replays of solutions with binding constraints do
/// not read as infeasible.
pub const PGEN_TOL_MW: f64 = 1e-3;
pub const VBUS_TOL_PU: f64 = 1e-5;
pub const BRANCH_TOL_MVA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("power flow has not converged; violation checks need a solved state")]
    NotConverged,
}

/// Converged power-flow state.
#[derive(Debug, Clone)]
pub struct PfSolution {
    /// Complex voltage per bus, p.u.
    pub v: Vec<Complex64>,
    /// Realized generator injections, MW / MVAr.
    pub pg_out: Vec<f64>,
    pub qg_out: Vec<f64>,
    /// Apparent-power flow at each branch end, MVA.
    pub sf: Vec<f64>,
    pub st: Vec<f64>,
    /// Newton iterations summed over Q-limit passes.
    pub iterations: usize,
    /// PV buses pinned to a reactive limit during the solve.
    pub q_switched: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceReason {
    IterationLimit,
    SingularJacobian,
    NonFiniteState,
    SwitchingLimit,
}

#[derive(Debug, Clone)]
pub struct Divergence {
    pub reason: DivergenceReason,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum PfOutcome {
    Solved(PfSolution),
    Diverged(Divergence),
}

impl PfOutcome {
    pub fn converged(&self) -> bool {
        matches!(self, PfOutcome::Solved(_))
    }

    pub fn solution(&self) -> Option<&PfSolution> {
        match self {
            PfOutcome::Solved(s) => Some(s),
            PfOutcome::Diverged(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineEnd {
    From,
    To,
}

/// Per-category constraint excesses of a solved state. All excesses are
/// positive; an empty report means the operating point is feasible.
#[derive(Debug, Clone, Default)]
pub struct ViolationReport {
    /// (generator index, MW outside its active-power box)
    pub pgen: Vec<(usize, f64)>,
    /// (bus index, p.u. outside the magnitude band)
    pub vbus: Vec<(usize, f64)>,
    /// (branch index, end, MVA above the flow limit)
    pub branch: Vec<(usize, LineEnd, f64)>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.pgen.is_empty() && self.vbus.is_empty() && self.branch.is_empty()
    }

    pub fn pgen_total(&self) -> f64 {
        self.pgen.iter().map(|(_, e)| e).sum()
    }

    pub fn vbus_total(&self) -> f64 {
        self.vbus.iter().map(|(_, e)| e).sum()
    }

    pub fn branch_total(&self) -> f64 {
        self.branch.iter().map(|(_, _, e)| e).sum()
    }
}

/// Partial derivatives of the complex bus injections S = diag(V) conj(Y V)
/// with respect to voltage angles and magnitudes.
pub(crate) fn dsbus_dv(
    ybus: &DMatrix<Complex64>,
    v: &[Complex64],
) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = v.len();
    let ibus: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|j| ybus[(i, j)] * v[j]).sum())
        .collect();
    let mut ds_dva = DMatrix::<Complex64>::zeros(n, n);
    let mut ds_dvm = DMatrix::<Complex64>::zeros(n, n);
    let j = Complex64::new(0.0, 1.0);
    for r in 0..n {
        let vnorm_r = v[r] / v[r].norm();
        for c in 0..n {
            let vnorm_c = v[c] / v[c].norm();
            // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
            let mut t = -ybus[(r, c)] * v[c];
            if r == c {
                t += ibus[r];
            }
            ds_dva[(r, c)] = j * v[r] * t.conj();
            // dS/dVm = diag(V) conj(Y diag(Vnorm)) + conj(diag(I)) diag(Vnorm)
            let mut u = v[r] * (ybus[(r, c)] * vnorm_c).conj();
            if r == c {
                u += ibus[r].conj() * vnorm_r;
            }
            ds_dvm[(r, c)] = u;
        }
    }
    (ds_dva, ds_dvm)
}

/// Scheduled complex injection per bus in p.u.: generation minus load,
/// with shunts handled inside Ybus.
fn scheduled_injection(case: &Case) -> Vec<Complex64> {
    let mut s = vec![Complex64::default(); case.bus_count()];
    for (i, b) in case.buses.iter().enumerate() {
        s[i] -= Complex64::new(b.pd, b.qd) / case.base_mva;
    }
    for g in &case.generators {
        let bi = case.bus_index(g.bus).expect("validated");
        s[bi] += Complex64::new(g.pg, 0.0) / case.base_mva;
    }
    s
}

fn complex_injection(ybus: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let ib: Complex64 = (0..n).map(|j| ybus[(i, j)] * v[j]).sum();
            v[i] * ib.conj()
        })
        .collect()
}

/// Working classification of buses during a solve, after any PV->PQ
/// switching.
struct BusSets {
    non_slack: Vec<usize>,
    pq: Vec<usize>,
}

fn bus_sets(kinds: &[BusKind]) -> BusSets {
    let non_slack = (0..kinds.len()).filter(|&i| kinds[i] != BusKind::Slack).collect();
    let pq = (0..kinds.len()).filter(|&i| kinds[i] == BusKind::Pq).collect();
    BusSets { non_slack, pq }
}

fn mismatch_vector(
    ybus: &DMatrix<Complex64>,
    v: &[Complex64],
    sched: &[Complex64],
    sets: &BusSets,
) -> DVector<f64> {
    let inj = complex_injection(ybus, v);
    let mut f = DVector::zeros(sets.non_slack.len() + sets.pq.len());
    for (k, &i) in sets.non_slack.iter().enumerate() {
        f[k] = inj[i].re - sched[i].re;
    }
    for (k, &i) in sets.pq.iter().enumerate() {
        f[sets.non_slack.len() + k] = inj[i].im - sched[i].im;
    }
    f
}

fn jacobian_matrix(
    ybus: &DMatrix<Complex64>,
    v: &[Complex64],
    sets: &BusSets,
) -> DMatrix<f64> {
    let (ds_dva, ds_dvm) = dsbus_dv(ybus, v);
    let np = sets.non_slack.len();
    let nq = sets.pq.len();
    let mut jac = DMatrix::zeros(np + nq, np + nq);
    for (r, &i) in sets.non_slack.iter().enumerate() {
        for (c, &j) in sets.non_slack.iter().enumerate() {
            jac[(r, c)] = ds_dva[(i, j)].re;
        }
        for (c, &j) in sets.pq.iter().enumerate() {
            jac[(r, np + c)] = ds_dvm[(i, j)].re;
        }
    }
    for (r, &i) in sets.pq.iter().enumerate() {
        for (c, &j) in sets.non_slack.iter().enumerate() {
            jac[(np + r, c)] = ds_dva[(i, j)].im;
        }
        for (c, &j) in sets.pq.iter().enumerate() {
            jac[(np + r, np + c)] = ds_dvm[(i, j)].im;
        }
    }
    jac
}

/// Active/reactive power mismatch of the case at the given voltages, in
/// p.u.: P rows for every non-slack bus in bus order, then Q rows for PQ
/// buses. Uses the case's own bus classification (no Q-limit switching).
pub fn compute_mismatch(case: &Case, v: &[Complex64]) -> Result<DVector<f64>, PfError> {
    let ybus = build_ybus(case)?;
    let kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
    let sets = bus_sets(&kinds);
    Ok(mismatch_vector(&ybus, v, &scheduled_injection(case), &sets))
}

/// Jacobian of `compute_mismatch` with respect to the free variables:
/// angles of non-slack buses, then magnitudes of PQ buses.
pub fn compute_jacobian(case: &Case, v: &[Complex64]) -> Result<DMatrix<f64>, PfError> {
    let ybus = build_ybus(case)?;
    let kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
    let sets = bus_sets(&kinds);
    Ok(jacobian_matrix(&ybus, v, &sets))
}

/// Complex branch terminal flows in p.u. using the same two-port model as
/// `build_ybus`. Out-of-service branches report zero.
pub fn branch_flows_complex(case: &Case, v: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    case.branches
        .iter()
        .map(|br| {
            if !br.status {
                return (Complex64::default(), Complex64::default());
            }
            let f = case.bus_index(br.from).expect("validated");
            let t = case.bus_index(br.to).expect("validated");
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let bc = Complex64::new(0.0, br.b_charging / 2.0);
            let tap = Complex64::from_polar(br.tap, br.shift.to_radians());
            let yff = (ys + bc) / (br.tap * br.tap);
            let yft = -ys / tap.conj();
            let ytf = -ys / tap;
            let ytt = ys + bc;
            let i_f = yff * v[f] + yft * v[t];
            let i_t = ytf * v[f] + ytt * v[t];
            (v[f] * i_f.conj(), v[t] * i_t.conj())
        })
        .collect()
}

/// Apparent-power flow magnitude at each branch end, MVA.
pub fn branch_flows(case: &Case, v: &[Complex64]) -> Vec<(f64, f64)> {
    branch_flows_complex(case, v)
        .into_iter()
        .map(|(sf, st)| (sf.norm() * case.base_mva, st.norm() * case.base_mva))
        .collect()
}

/// Power-flow solver holding tolerances and the Q-limit policy. Instances
/// are cheap; independent solves may run on separate instances.
#[derive(Debug, Clone)]
pub struct PfSolver {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_qlim_passes: usize,
    pub enforce_q_limits: bool,
}

impl Default for PfSolver {
    fn default() -> Self {
        Self {
            tolerance: PF_TOLERANCE,
            max_iterations: PF_MAX_ITER,
            max_qlim_passes: PF_MAX_QLIM_PASSES,
            enforce_q_limits: true,
        }
    }
}

/// Solve with default settings, validating the case and building Ybus.
pub fn solve_pf(case: &Case) -> Result<PfOutcome, PfError> {
    let violations = validate_case(case);
    if !violations.is_empty() {
        return Err(PfError::InvalidCase(violations.join("; ")));
    }
    let ybus = build_ybus(case)?;
    PfSolver::default().solve(case, &ybus)
}

impl PfSolver {
    /// Run Newton-Raphson from a flat start, repeating with PV buses pinned
    /// to binding reactive limits until no further switching is needed.
    pub fn solve(&self, case: &Case, ybus: &DMatrix<Complex64>) -> Result<PfOutcome, PfError> {
        let m = case.bus_count();
        let mut kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
        let mut sched = scheduled_injection(case);

        // flat start; PV and slack magnitudes come from generator setpoints
        let mut vm = vec![1.0; m];
        for g in &case.generators {
            let bi = case.bus_index(g.bus).expect("validated");
            if kinds[bi] != BusKind::Pq {
                vm[bi] = g.vg;
            }
        }
        let mut v: Vec<Complex64> = vm.iter().map(|&m| Complex64::new(m, 0.0)).collect();

        let mut total_iters = 0;
        let mut q_switched: Vec<usize> = Vec::new();

        for _pass in 0..=self.max_qlim_passes {
            let sets = bus_sets(&kinds);
            match self.newton(ybus, v.as_mut_slice(), &sched, &sets, &mut total_iters) {
                Ok(()) => {}
                Err(d) => return Ok(PfOutcome::Diverged(d)),
            }

            if !self.enforce_q_limits {
                break;
            }
            // Q produced at each still-PV generator bus; switch binding
            // buses to PQ at the violated limit. Slack is exempt.
            let inj = complex_injection(ybus, &v);
            let mut switched_now = Vec::new();
            for (bi, bus) in case.buses.iter().enumerate() {
                if kinds[bi] != BusKind::Pv {
                    continue;
                }
                let gens: Vec<&crate::case::Generator> =
                    case.generators.iter().filter(|g| g.bus == bus.id).collect();
                if gens.is_empty() {
                    continue;
                }
                let qg_bus = inj[bi].im * case.base_mva + bus.qd;
                let qmin: f64 = gens.iter().map(|g| g.qmin).sum();
                let qmax: f64 = gens.iter().map(|g| g.qmax).sum();
                let pinned = if qg_bus > qmax + 1e-9 {
                    Some(qmax)
                } else if qg_bus < qmin - 1e-9 {
                    Some(qmin)
                } else {
                    None
                };
                if let Some(q) = pinned {
                    kinds[bi] = BusKind::Pq;
                    sched[bi].im = (q - bus.qd) / case.base_mva;
                    switched_now.push(bi);
                }
            }
            if switched_now.is_empty() {
                break;
            }
            q_switched.extend(switched_now);
            if _pass == self.max_qlim_passes {
                return Ok(PfOutcome::Diverged(Divergence {
                    reason: DivergenceReason::SwitchingLimit,
                    iterations: total_iters,
                }));
            }
        }

        Ok(PfOutcome::Solved(self.package(case, ybus, v, total_iters, q_switched)))
    }

    fn newton(
        &self,
        ybus: &DMatrix<Complex64>,
        v: &mut [Complex64],
        sched: &[Complex64],
        sets: &BusSets,
        total_iters: &mut usize,
    ) -> Result<(), Divergence> {
        let np = sets.non_slack.len();
        let mut f = mismatch_vector(ybus, v, sched, sets);
        for _ in 0..self.max_iterations {
            if f.amax() < self.tolerance {
                return Ok(());
            }
            *total_iters += 1;
            let jac = jacobian_matrix(ybus, v, sets);
            let lu = jac.lu();
            let Some(dx) = lu.solve(&(-&f)) else {
                return Err(Divergence {
                    reason: DivergenceReason::SingularJacobian,
                    iterations: *total_iters,
                });
            };
            let mut va: Vec<f64> = v.iter().map(|c| c.arg()).collect();
            let mut vm: Vec<f64> = v.iter().map(|c| c.norm()).collect();
            for (k, &i) in sets.non_slack.iter().enumerate() {
                va[i] += dx[k];
            }
            for (k, &i) in sets.pq.iter().enumerate() {
                vm[i] += dx[np + k];
            }
            for i in 0..v.len() {
                v[i] = Complex64::from_polar(vm[i], va[i]);
            }
            if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Divergence {
                    reason: DivergenceReason::NonFiniteState,
                    iterations: *total_iters,
                });
            }
            f = mismatch_vector(ybus, v, sched, sets);
        }
        if f.amax() < self.tolerance {
            Ok(())
        } else {
            Err(Divergence {
                reason: DivergenceReason::IterationLimit,
                iterations: *total_iters,
            })
        }
    }

    fn package(
        &self,
        case: &Case,
        ybus: &DMatrix<Complex64>,
        v: Vec<Complex64>,
        iterations: usize,
        q_switched: Vec<usize>,
    ) -> PfSolution {
        let inj = complex_injection(ybus, &v);
        let s = case.gen_count();
        let mut pg_out = vec![0.0; s];
        let mut qg_out = vec![0.0; s];

        let slack_idx = case.slack_index().expect("validated");
        for (bi, bus) in case.buses.iter().enumerate() {
            let members: Vec<usize> = case
                .generators
                .iter()
                .enumerate()
                .filter(|(_, g)| g.bus == bus.id)
                .map(|(k, _)| k)
                .collect();
            if members.is_empty() {
                continue;
            }
            // active power: scheduled, except the first slack-bus generator
            // absorbs the system imbalance
            let pg_bus = inj[bi].re * case.base_mva + bus.pd;
            if bi == slack_idx {
                let fixed: f64 = members[1..].iter().map(|&k| case.generators[k].pg).sum();
                pg_out[members[0]] = pg_bus - fixed;
                for &k in &members[1..] {
                    pg_out[k] = case.generators[k].pg;
                }
            } else {
                for &k in &members {
                    pg_out[k] = case.generators[k].pg;
                }
            }
            // reactive power: bus total split proportionally to Q-ranges
            let qg_bus = inj[bi].im * case.base_mva + bus.qd;
            let qmin_sum: f64 = members.iter().map(|&k| case.generators[k].qmin).sum();
            let range: f64 = members
                .iter()
                .map(|&k| case.generators[k].qmax - case.generators[k].qmin)
                .sum();
            for &k in &members {
                let g = &case.generators[k];
                let share = if range > 0.0 {
                    (g.qmax - g.qmin) / range
                } else {
                    1.0 / members.len() as f64
                };
                qg_out[k] = g.qmin + (qg_bus - qmin_sum) * share;
            }
        }

        let flows = branch_flows(case, &v);
        let (sf, st) = flows.into_iter().unzip();
        PfSolution { v, pg_out, qg_out, sf, st, iterations, q_switched }
    }
}

/// Limit excesses of a converged solution: generator active power outside
/// its box, bus magnitudes outside their band, branch flows above S_max.
pub fn check_violations(case: &Case, sol: &PfSolution) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (k, g) in case.generators.iter().enumerate() {
        let excess = (sol.pg_out[k] - g.pmax).max(g.pmin - sol.pg_out[k]).max(0.0);
        if excess > PGEN_TOL_MW {
            report.pgen.push((k, excess));
        }
    }
    for (i, b) in case.buses.iter().enumerate() {
        let vm = sol.v[i].norm();
        let excess = (vm - b.vmax).max(b.vmin - vm).max(0.0);
        if excess > VBUS_TOL_PU {
            report.vbus.push((i, excess));
        }
    }
    for (i, br) in case.branches.iter().enumerate() {
        let Some(s_max) = br.s_max else { continue };
        if !br.status {
            continue;
        }
        if sol.sf[i] - s_max > BRANCH_TOL_MVA {
            report.branch.push((i, LineEnd::From, sol.sf[i] - s_max));
        }
        if sol.st[i] - s_max > BRANCH_TOL_MVA {
            report.branch.push((i, LineEnd::To, sol.st[i] - s_max));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{ieee14, parse_case};
    use approx::assert_relative_eq;

    fn two_bus(pd_mw: f64, qd_mvar: f64) -> Case {
        parse_case(&format!(
            "baseMVA\n100\nbus\n\
             1 3 0 0 0 0 1 1 0 0 1 1.1 0.9\n\
             2 1 {pd_mw} {qd_mvar} 0 0 1 1 0 0 1 1.1 0.9\n\
             gen\n1 0 0 900 -900 1.0 100 1 900 0\n\
             branch\n1 2 0 0.1 0 0 0 0 0 0 1\n\
             gencost\n2 0 0 3 0.01 40 0\n"
        ))
        .unwrap()
    }

    #[test]
    fn flat_no_load_network_converges_immediately() {
        let case = two_bus(0.0, 0.0);
        let out = solve_pf(&case).unwrap();
        let sol = out.solution().expect("converged");
        assert!(sol.iterations <= 2);
        for vi in &sol.v {
            assert_relative_eq!(vi.norm(), 1.0, epsilon = 1e-10);
            assert_relative_eq!(vi.arg(), 0.0, epsilon = 1e-10);
        }
        assert!(sol.sf.iter().all(|&s| s < 1e-9));
    }

    #[test]
    fn mismatch_matches_direct_formula() {
        let case = two_bus(10.0, 0.0);
        let v = vec![Complex64::new(1.0, 0.0); 2];
        let f = compute_mismatch(&case, &v).unwrap();
        // scheduled -0.1 p.u. at bus 2, injected 0 at flat voltage
        assert_relative_eq!(f[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatch_zero_on_flat_unloaded() {
        let case = two_bus(0.0, 0.0);
        let v = vec![Complex64::new(1.0, 0.0); 2];
        let f = compute_mismatch(&case, &v).unwrap();
        assert!(f.amax() < 1e-14);
    }

    #[test]
    fn jacobian_lossless_flat_start_entry() {
        let case = two_bus(0.0, 0.0);
        let v = vec![Complex64::new(1.0, 0.0); 2];
        let jac = compute_jacobian(&case, &v).unwrap();
        // dP2/dtheta2 = |V1||V2| B with B = 1/x = 10
        assert_relative_eq!(jac[(0, 0)], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_zero_without_branches() {
        let mut case = two_bus(0.0, 0.0);
        case.branches[0].status = false;
        let v = vec![Complex64::new(1.0, 0.0); 2];
        let jac = compute_jacobian(&case, &v).unwrap();
        assert!(jac.amax() < 1e-14);
    }

    /// Central finite differences of the mismatch over the free variables.
    fn fd_jacobian(case: &Case, v: &[Complex64], step: f64) -> DMatrix<f64> {
        let kinds: Vec<BusKind> = case.buses.iter().map(|b| b.kind).collect();
        let non_slack: Vec<usize> =
            (0..kinds.len()).filter(|&i| kinds[i] != BusKind::Slack).collect();
        let pq: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == BusKind::Pq).collect();
        let nvars = non_slack.len() + pq.len();
        let f0 = compute_mismatch(case, v).unwrap();
        let mut jac = DMatrix::zeros(f0.len(), nvars);
        let perturb = |k: usize, delta: f64| -> Vec<Complex64> {
            let mut va: Vec<f64> = v.iter().map(|c| c.arg()).collect();
            let mut vm: Vec<f64> = v.iter().map(|c| c.norm()).collect();
            if k < non_slack.len() {
                va[non_slack[k]] += delta;
            } else {
                vm[pq[k - non_slack.len()]] += delta;
            }
            va.iter().zip(&vm).map(|(&a, &m)| Complex64::from_polar(m, a)).collect()
        };
        for k in 0..nvars {
            let fp = compute_mismatch(case, &perturb(k, step)).unwrap();
            let fm = compute_mismatch(case, &perturb(k, -step)).unwrap();
            for r in 0..f0.len() {
                jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * step);
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences_on_random_states() {
        use rand::{Rng, SeedableRng};
        let case = ieee14();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            let v: Vec<Complex64> = (0..14)
                .map(|_| {
                    Complex64::from_polar(
                        rng.gen_range(0.95..1.06),
                        rng.gen_range(-0.35..0.1),
                    )
                })
                .collect();
            let jac = compute_jacobian(&case, &v).unwrap();
            let fd = fd_jacobian(&case, &v, 1e-6);
            let err = (&jac - &fd).amax();
            assert!(err < 1e-5, "max |J - J_fd| = {err}");
        }
    }

    #[test]
    fn two_bus_delivers_exact_power() {
        // lossless line delivering 10 MW at unity power factor on both
        // ends: |Sf| = |St| = 10 MVA
        let case = two_bus(10.0, 0.0);
        let out = solve_pf(&case).unwrap();
        let sol = out.solution().expect("converged");
        // analytic: V2 being a PQ bus, magnitudes differ slightly; delivered
        // P equals the load exactly
        let flows = branch_flows(&case, &sol.v);
        let (_, st) = flows[0];
        assert_relative_eq!(st, 10.0, epsilon = 1e-5);
        // power balance: generation = load + losses (lossless here)
        assert_relative_eq!(sol.pg_out[0], 10.0, epsilon = 1e-5);
    }

    #[test]
    fn two_bus_beyond_transfer_limit_diverges() {
        // maximum unity-pf transfer over x = 0.1 p.u. from a 1.0 source is
        // V^2/(2x) = 5 p.u.; beyond the PV-curve nose no real solution
        // exists
        let case = two_bus(600.0, 0.0);
        let out = solve_pf(&case).unwrap();
        assert!(!out.converged(), "expected divergence");
        let case = two_bus(480.0, 0.0);
        assert!(solve_pf(&case).unwrap().converged());
    }

    #[test]
    fn power_balance_at_converged_solution() {
        let case = ieee14();
        let out = solve_pf(&case).unwrap();
        let sol = out.solution().expect("converged");
        let total_gen: f64 = sol.pg_out.iter().sum();
        let total_load: f64 = case.buses.iter().map(|b| b.pd).sum();
        let flows = branch_flows_complex(&case, &sol.v);
        let losses: f64 = flows
            .iter()
            .map(|(sf, st)| (sf.re + st.re) * case.base_mva)
            .sum();
        let shunt_p: f64 = case
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| b.gs * sol.v[i].norm_sqr())
            .sum();
        assert_relative_eq!(total_gen, total_load + losses + shunt_p, epsilon = 1e-4);
    }

    #[test]
    fn converged_mismatch_below_tolerance() {
        let case = ieee14();
        let out = solve_pf(&case).unwrap();
        let sol = out.solution().expect("converged");
        let f = compute_mismatch(&case, &sol.v).unwrap();
        assert!(f.amax() <= 1e-8);
    }

    #[test]
    fn q_limits_respected_after_enforcement() {
        // raise loads until some PV generator hits a reactive limit
        let mut case = ieee14();
        for b in case.buses.iter_mut() {
            b.pd *= 1.25;
            b.qd *= 1.25;
        }
        let out = solve_pf(&case).unwrap();
        let sol = out.solution().expect("converged");
        let slack = case.slack_index().unwrap();
        for (k, g) in case.generators.iter().enumerate() {
            if case.bus_index(g.bus).unwrap() == slack {
                continue;
            }
            assert!(
                sol.qg_out[k] <= g.qmax + 1e-8 && sol.qg_out[k] >= g.qmin - 1e-8,
                "gen {k} Qg {} outside [{}, {}]",
                sol.qg_out[k],
                g.qmin,
                g.qmax
            );
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let case = ieee14();
        let a = solve_pf(&case).unwrap();
        let b = solve_pf(&case).unwrap();
        let (sa, sb) = (a.solution().unwrap(), b.solution().unwrap());
        assert_eq!(sa.iterations, sb.iterations);
        for (x, y) in sa.v.iter().zip(&sb.v) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }

    #[test]
    fn violation_report_arithmetic() {
        // the stock setpoints put gen buses 6 and 8 above Vmax (Vg = 1.07
        // and 1.09 against a 1.06 band), so bring every Vg inside the band
        // first to obtain a feasible state
        let mut case = ieee14();
        for g in case.generators.iter_mut() {
            g.vg = g.vg.min(1.05);
        }
        let out = solve_pf(&case).unwrap();
        let mut sol = out.solution().unwrap().clone();
        let report = check_violations(&case, &sol);
        assert!(report.is_empty(), "{report:?}");

        // push one bus magnitude out of band
        sol.v[9] = Complex64::from_polar(1.08, sol.v[9].arg());
        let report = check_violations(&case, &sol);
        assert_eq!(report.vbus.len(), 1);
        assert_relative_eq!(report.vbus[0].1, 0.02, epsilon = 1e-12);

        // branch carrying 40 MVA against a 32 MVA limit -> 8 MVA excess
        let modified = crate::case::override_branch_limit(&case, 4, 5, 32.0).unwrap();
        let mut sol2 = out.solution().unwrap().clone();
        sol2.sf[6] = 40.0;
        sol2.st[6] = 40.0;
        let report = check_violations(&modified, &sol2);
        let excess: Vec<f64> = report
            .branch
            .iter()
            .filter(|(i, _, _)| *i == 6)
            .map(|(_, _, e)| *e)
            .collect();
        assert_eq!(excess.len(), 2);
        assert_relative_eq!(excess[0], 8.0, epsilon = 1e-9);
    }
}
