//! Full nonlinear AC optimal power flow solved with the interior-point
//! method from [`crate::ipm`]. Labels scenarios with optimal generator
//! setpoints and serves as the evaluation baseline.
//!
//! Variables are `[va (non-slack); vm; pg; qg]` in per unit. Equalities are
//! the complex power balance at every bus; inequalities are squared
//! apparent-power branch limits on both ends; voltage magnitudes and
//! generator injections carry box bounds. All derivatives are analytic and
//! validated against finite differences in the test suite.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::case::{build_ybus, validate_case, Case};
use crate::ipm::{solve_nlp, IpmOptions, IpmSolution, IpmStatus, NlpProblem};
use crate::pf::dsbus_dv;

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("expected {expected} generator values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpfStatus {
    Optimal,
    Infeasible,
    IterLimit,
}

/// Optimal dispatch for one operating condition.
#[derive(Debug, Clone)]
pub struct OpfSolution {
    pub status: OpfStatus,
    /// Optimal generator active power, MW.
    pub pg_opt: Vec<f64>,
    /// Optimal generator voltage setpoints, p.u.
    pub vg_opt: Vec<f64>,
    /// Complex bus voltages at the optimum.
    pub v_opt: Vec<Complex64>,
    /// Total generation cost, $/h.
    pub objective: f64,
    pub iterations: usize,
    /// Normalized first-order optimality residual at exit.
    pub kkt_residual: f64,
}

/// Total polynomial generation cost in $/h for the given dispatch in MW.
pub fn gen_cost(case: &Case, pg_mw: &[f64]) -> Result<f64, OpfError> {
    if pg_mw.len() != case.gen_count() {
        return Err(OpfError::LengthMismatch {
            expected: case.gen_count(),
            got: pg_mw.len(),
        });
    }
    Ok(case
        .generators
        .iter()
        .zip(pg_mw)
        .map(|(g, &p)| g.cost.eval(p))
        .sum())
}

struct OpfProblem<'a> {
    case: &'a Case,
    ybus: DMatrix<Complex64>,
    /// Branch admittance rows and own-end indices for limited in-service
    /// branches: (branch index, from bus, to bus, yff, yft, ytf, ytt,
    /// squared limit in p.u.).
    limited: Vec<LimitedBranch>,
    /// Generator bus indices.
    gbus: Vec<usize>,
    /// Map bus index -> position in the non-slack angle block.
    va_pos: Vec<Option<usize>>,
    m: usize,
    s: usize,
}

struct LimitedBranch {
    f: usize,
    t: usize,
    yff: Complex64,
    yft: Complex64,
    ytf: Complex64,
    ytt: Complex64,
    smax_sq: f64,
}

impl<'a> OpfProblem<'a> {
    fn new(case: &'a Case) -> Result<Self, OpfError> {
        let violations = validate_case(case);
        if !violations.is_empty() {
            return Err(OpfError::InvalidCase(violations.join("; ")));
        }
        let ybus = build_ybus(case).map_err(|e| OpfError::InvalidCase(e.to_string()))?;
        let m = case.bus_count();
        let slack = case.slack_index().expect("validated");
        let mut va_pos = vec![None; m];
        let mut pos = 0;
        for (i, slot) in va_pos.iter_mut().enumerate() {
            if i != slack {
                *slot = Some(pos);
                pos += 1;
            }
        }
        let mut limited = Vec::new();
        for br in case.branches.iter().filter(|b| b.status) {
            let Some(smax) = br.s_max else { continue };
            let f = case.bus_index(br.from).expect("validated");
            let t = case.bus_index(br.to).expect("validated");
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let bc = Complex64::new(0.0, br.b_charging / 2.0);
            let tap = Complex64::from_polar(br.tap, br.shift.to_radians());
            limited.push(LimitedBranch {
                f,
                t,
                yff: (ys + bc) / (br.tap * br.tap),
                yft: -ys / tap.conj(),
                ytf: -ys / tap,
                ytt: ys + bc,
                smax_sq: (smax / case.base_mva).powi(2),
            });
        }
        let gbus = case
            .generators
            .iter()
            .map(|g| case.bus_index(g.bus).expect("validated"))
            .collect();
        let s = case.gen_count();
        Ok(Self { case, ybus, limited, gbus, va_pos, m, s })
    }

    fn nv(&self) -> usize {
        (self.m - 1) + self.m + 2 * self.s
    }

    fn vm_off(&self) -> usize {
        self.m - 1
    }

    fn pg_off(&self) -> usize {
        self.m - 1 + self.m
    }

    fn qg_off(&self) -> usize {
        self.pg_off() + self.s
    }

    fn voltages(&self, x: &DVector<f64>) -> Vec<Complex64> {
        (0..self.m)
            .map(|i| {
                let va = self.va_pos[i].map_or(0.0, |p| x[p]);
                Complex64::from_polar(x[self.vm_off() + i], va)
            })
            .collect()
    }

    fn midpoint_start(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.nv());
        for (i, b) in self.case.buses.iter().enumerate() {
            x[self.vm_off() + i] = 0.5 * (b.vmin + b.vmax);
        }
        for (k, g) in self.case.generators.iter().enumerate() {
            x[self.pg_off() + k] = 0.5 * (g.pmin + g.pmax) / self.case.base_mva;
            x[self.qg_off() + k] = 0.5 * (g.qmin + g.qmax) / self.case.base_mva;
        }
        x
    }

    /// dS/dVa and dS/dVm rows (nlim x m) for one side of every limited
    /// branch. `own` and `other` pick the terminal; `y_own`/`y_other` its
    /// admittance pair.
    #[allow(clippy::too_many_arguments)]
    fn dside_dv(
        &self,
        v: &[Complex64],
        side_from: bool,
    ) -> (DMatrix<Complex64>, DMatrix<Complex64>, Vec<Complex64>) {
        let nl = self.limited.len();
        let m = self.m;
        let j = Complex64::new(0.0, 1.0);
        let mut dva = DMatrix::<Complex64>::zeros(nl, m);
        let mut dvm = DMatrix::<Complex64>::zeros(nl, m);
        let mut s_br = Vec::with_capacity(nl);
        for (r, lb) in self.limited.iter().enumerate() {
            let (own, other, y_own, y_other) = if side_from {
                (lb.f, lb.t, lb.yff, lb.yft)
            } else {
                (lb.t, lb.f, lb.ytt, lb.ytf)
            };
            let i_br = y_own * v[own] + y_other * v[other];
            let s = v[own] * i_br.conj();
            s_br.push(s);
            let vnorm = |i: usize| v[i] / v[i].norm();
            // dS/dVa = j (conj(I) dV_own/dVa - V_own conj(Y dV/dVa))
            dva[(r, own)] =
                j * (i_br.conj() * v[own] - v[own] * (y_own * v[own]).conj());
            dva[(r, other)] = j * (-v[own] * (y_other * v[other]).conj());
            // dS/dVm = V_own conj(Y dV/dVm) + conj(I) dV_own/dVm
            dvm[(r, own)] =
                v[own] * (y_own * vnorm(own)).conj() + i_br.conj() * vnorm(own);
            dvm[(r, other)] = v[own] * (y_other * vnorm(other)).conj();
        }
        (dva, dvm, s_br)
    }

    /// Hessian blocks of sum_i lam_i S_i(V) over (va, vm), each m x m.
    fn d2sbus_dv2(
        &self,
        v: &[Complex64],
        lam: &DVector<f64>,
    ) -> [DMatrix<Complex64>; 4] {
        let m = self.m;
        let y = &self.ybus;
        let ibus: Vec<Complex64> =
            (0..m).map(|i| (0..m).map(|k| y[(i, k)] * v[k]).sum()).collect();
        let diag_v = DMatrix::from_fn(m, m, |r, c| {
            if r == c { v[r] } else { Complex64::default() }
        });
        let diag_lam_v = DMatrix::from_fn(m, m, |r, c| {
            if r == c { lam[r] * v[r] } else { Complex64::default() }
        });
        let yc = y.map(|e| e);
        let b = &yc * &diag_v;
        let c_mat = &diag_lam_v * b.map(|e| e.conj());
        let d = y.adjoint() * &diag_v;
        let d_lam: Vec<Complex64> = (0..m)
            .map(|r| d.row(r).iter().zip(lam.iter()).map(|(&e, &l)| e * l).sum())
            .collect();
        let mut e_mat = DMatrix::<Complex64>::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                let t = d[(r, c)] * lam[c] - if r == c { d_lam[r] } else { Complex64::default() };
                e_mat[(r, c)] = v[r].conj() * t;
            }
        }
        let mut f_mat = c_mat.clone();
        for r in 0..m {
            f_mat[(r, r)] -= lam[r] * v[r] * ibus[r].conj();
        }
        let g_inv: Vec<f64> = (0..m).map(|i| 1.0 / v[i].norm()).collect();
        let gaa = &e_mat + &f_mat;
        let j = Complex64::new(0.0, 1.0);
        let mut gva = &e_mat - &f_mat;
        for r in 0..m {
            for c in 0..m {
                gva[(r, c)] *= j * g_inv[r];
            }
        }
        let gav = gva.transpose();
        let mut gvv = &c_mat + c_mat.transpose();
        for r in 0..m {
            for c in 0..m {
                gvv[(r, c)] *= g_inv[r] * g_inv[c];
            }
        }
        [gaa, gav, gva, gvv]
    }

    /// Hessian blocks of sum_l lam_l S_l(V) for one side of the limited
    /// branches.
    fn d2sbr_dv2(
        &self,
        v: &[Complex64],
        lam: &[Complex64],
        side_from: bool,
    ) -> [DMatrix<Complex64>; 4] {
        let m = self.m;
        // A = Ybr^H diag(lam) Cbr accumulated densely
        let mut a = DMatrix::<Complex64>::zeros(m, m);
        for (r, lb) in self.limited.iter().enumerate() {
            let (own, other, y_own, y_other) = if side_from {
                (lb.f, lb.t, lb.yff, lb.yft)
            } else {
                (lb.t, lb.f, lb.ytt, lb.ytf)
            };
            a[(own, own)] += y_own.conj() * lam[r];
            a[(other, own)] += y_other.conj() * lam[r];
        }
        let av: Vec<Complex64> =
            (0..m).map(|r| (0..m).map(|c| a[(r, c)] * v[c]).sum()).collect();
        let atv: Vec<Complex64> =
            (0..m).map(|c| (0..m).map(|r| a[(r, c)] * v[r].conj()).sum()).collect();
        let mut b = DMatrix::<Complex64>::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                b[(r, c)] = v[r].conj() * a[(r, c)] * v[c];
            }
        }
        let bt = b.transpose();
        let f_mat = &b + &bt;
        let g_inv: Vec<f64> = (0..m).map(|i| 1.0 / v[i].norm()).collect();
        let j = Complex64::new(0.0, 1.0);

        let mut haa = f_mat.clone();
        let mut hva = &b - &bt;
        for r in 0..m {
            haa[(r, r)] -= av[r] * v[r].conj() + atv[r] * v[r];
            hva[(r, r)] -= av[r] * v[r].conj() - atv[r] * v[r];
        }
        for r in 0..m {
            for c in 0..m {
                hva[(r, c)] *= j * g_inv[r];
            }
        }
        let hav = hva.transpose();
        let mut hvv = f_mat;
        for r in 0..m {
            for c in 0..m {
                hvv[(r, c)] *= g_inv[r] * g_inv[c];
            }
        }
        [haa, hav, hva, hvv]
    }

    /// Real Hessian blocks of sum_l mu_l |S_l(V)|^2 for one side.
    fn d2abr_dv2(
        &self,
        v: &[Complex64],
        mu: &[f64],
        side_from: bool,
    ) -> [DMatrix<f64>; 4] {
        let (dva, dvm, s_br) = self.dside_dv(v, side_from);
        let lam: Vec<Complex64> =
            s_br.iter().zip(mu).map(|(s, &w)| s.conj() * w).collect();
        let [saa, sav, sva, svv] = self.d2sbr_dv2(v, &lam, side_from);
        let m = self.m;
        let nl = self.limited.len();
        let cross = |da: &DMatrix<Complex64>, db: &DMatrix<Complex64>| {
            // da^T diag(mu) conj(db)
            DMatrix::from_fn(m, m, |r, c| {
                (0..nl)
                    .map(|l| da[(l, r)] * mu[l] * db[(l, c)].conj())
                    .sum::<Complex64>()
            })
        };
        let haa = (saa + cross(&dva, &dva)).map(|e| 2.0 * e.re);
        let hav = (sav + cross(&dva, &dvm)).map(|e| 2.0 * e.re);
        let hva = (sva + cross(&dvm, &dva)).map(|e| 2.0 * e.re);
        let hvv = (svv + cross(&dvm, &dvm)).map(|e| 2.0 * e.re);
        [haa, hav, hva, hvv]
    }

    /// Scatter a full (va, vm) block Hessian into problem coordinates.
    fn scatter_vv(&self, dst: &mut DMatrix<f64>, blocks: &[DMatrix<f64>; 4]) {
        let [aa, av, va, vv] = blocks;
        let m = self.m;
        for r in 0..m {
            for c in 0..m {
                let (pr, pc) = (self.va_pos[r], self.va_pos[c]);
                if let (Some(pr), Some(pc)) = (pr, pc) {
                    dst[(pr, pc)] += aa[(r, c)];
                }
                if let Some(pr) = pr {
                    dst[(pr, self.vm_off() + c)] += av[(r, c)];
                }
                if let Some(pc) = pc {
                    dst[(self.vm_off() + r, pc)] += va[(r, c)];
                }
                dst[(self.vm_off() + r, self.vm_off() + c)] += vv[(r, c)];
            }
        }
    }
}

impl NlpProblem for OpfProblem<'_> {
    fn num_vars(&self) -> usize {
        self.nv()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.nv();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        let base = self.case.base_mva;
        for (i, b) in self.case.buses.iter().enumerate() {
            lo[self.vm_off() + i] = b.vmin;
            hi[self.vm_off() + i] = b.vmax;
        }
        for (k, g) in self.case.generators.iter().enumerate() {
            lo[self.pg_off() + k] = g.pmin / base;
            hi[self.pg_off() + k] = g.pmax / base;
            lo[self.qg_off() + k] = g.qmin / base;
            hi[self.qg_off() + k] = g.qmax / base;
        }
        (lo, hi)
    }

    fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let base = self.case.base_mva;
        let mut df = DVector::zeros(self.nv());
        let mut f = 0.0;
        for (k, g) in self.case.generators.iter().enumerate() {
            let mw = x[self.pg_off() + k] * base;
            f += g.cost.eval(mw);
            df[self.pg_off() + k] = (2.0 * g.cost.c2 * mw + g.cost.c1) * base;
        }
        (f, df)
    }

    fn equalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.m;
        let base = self.case.base_mva;
        let v = self.voltages(x);
        let inj: Vec<Complex64> = {
            let y = &self.ybus;
            (0..m)
                .map(|i| {
                    let ib: Complex64 = (0..m).map(|k| y[(i, k)] * v[k]).sum();
                    v[i] * ib.conj()
                })
                .collect()
        };
        let mut g = DVector::zeros(2 * m);
        for (i, b) in self.case.buses.iter().enumerate() {
            g[i] = inj[i].re + b.pd / base;
            g[m + i] = inj[i].im + b.qd / base;
        }
        for (k, &bi) in self.gbus.iter().enumerate() {
            g[bi] -= x[self.pg_off() + k];
            g[m + bi] -= x[self.qg_off() + k];
        }

        let (ds_dva, ds_dvm) = dsbus_dv(&self.ybus, &v);
        let mut dg = DMatrix::zeros(2 * m, self.nv());
        for i in 0..m {
            for c in 0..m {
                if let Some(p) = self.va_pos[c] {
                    dg[(i, p)] = ds_dva[(i, c)].re;
                    dg[(m + i, p)] = ds_dva[(i, c)].im;
                }
                dg[(i, self.vm_off() + c)] = ds_dvm[(i, c)].re;
                dg[(m + i, self.vm_off() + c)] = ds_dvm[(i, c)].im;
            }
        }
        for (k, &bi) in self.gbus.iter().enumerate() {
            dg[(bi, self.pg_off() + k)] = -1.0;
            dg[(m + bi, self.qg_off() + k)] = -1.0;
        }
        (g, dg)
    }

    fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let nl = self.limited.len();
        let v = self.voltages(x);
        let mut h = DVector::zeros(2 * nl);
        let mut dh = DMatrix::zeros(2 * nl, self.nv());
        for (side, off) in [(true, 0), (false, nl)] {
            let (dva, dvm, s_br) = self.dside_dv(&v, side);
            for (r, lb) in self.limited.iter().enumerate() {
                h[off + r] = s_br[r].norm_sqr() - lb.smax_sq;
                for c in 0..self.m {
                    let da = 2.0 * (s_br[r].conj() * dva[(r, c)]).re;
                    let dm = 2.0 * (s_br[r].conj() * dvm[(r, c)]).re;
                    if let Some(p) = self.va_pos[c] {
                        dh[(off + r, p)] = da;
                    }
                    dh[(off + r, self.vm_off() + c)] = dm;
                }
            }
        }
        (h, dh)
    }

    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        cost_scale: f64,
    ) -> DMatrix<f64> {
        let m = self.m;
        let nl = self.limited.len();
        let base = self.case.base_mva;
        let v = self.voltages(x);
        let mut hess = DMatrix::zeros(self.nv(), self.nv());

        // cost curvature
        for (k, g) in self.case.generators.iter().enumerate() {
            hess[(self.pg_off() + k, self.pg_off() + k)] =
                2.0 * g.cost.c2 * base * base * cost_scale;
        }

        // power balance: real part weighted by lam_P, imaginary by lam_Q
        let lam_p = lam.rows(0, m).into_owned();
        let lam_q = lam.rows(m, m).into_owned();
        let gp = self.d2sbus_dv2(&v, &lam_p);
        let gq = self.d2sbus_dv2(&v, &lam_q);
        let balance = [
            gp[0].map(|e| e.re) + gq[0].map(|e| e.im),
            gp[1].map(|e| e.re) + gq[1].map(|e| e.im),
            gp[2].map(|e| e.re) + gq[2].map(|e| e.im),
            gp[3].map(|e| e.re) + gq[3].map(|e| e.im),
        ];
        self.scatter_vv(&mut hess, &balance);

        // squared flow limits, both ends
        if nl > 0 {
            let mu_f: Vec<f64> = (0..nl).map(|l| mu[l]).collect();
            let mu_t: Vec<f64> = (0..nl).map(|l| mu[nl + l]).collect();
            let hf = self.d2abr_dv2(&v, &mu_f, true);
            let ht = self.d2abr_dv2(&v, &mu_t, false);
            self.scatter_vv(&mut hess, &hf);
            self.scatter_vv(&mut hess, &ht);
        }
        hess
    }
}

/// Solve the AC OPF from a deterministic midpoint start. `Infeasible` and
/// `IterLimit` are values used by the dataset labeler to filter scenarios.
pub fn solve_opf(case: &Case) -> Result<OpfSolution, OpfError> {
    let problem = OpfProblem::new(case)?;
    let opts = IpmOptions {
        tol: 1e-6,
        max_iterations: 150,
        centering: 0.1,
        step_fraction: 0.9995,
        // balances $-scale cost gradients against p.u. constraint gradients
        cost_scale: 1e-4,
        ..Default::default()
    };
    let x0 = problem.midpoint_start();
    let sol = solve_nlp(&problem, &x0, &opts);
    Ok(package(case, &problem, sol))
}

fn package(case: &Case, problem: &OpfProblem, sol: IpmSolution) -> OpfSolution {
    let status = match sol.status {
        IpmStatus::Converged => OpfStatus::Optimal,
        IpmStatus::NumericalFailure => OpfStatus::Infeasible,
        IpmStatus::IterationLimit => OpfStatus::IterLimit,
    };
    let base = case.base_mva;
    let pg_opt: Vec<f64> =
        (0..problem.s).map(|k| sol.x[problem.pg_off() + k] * base).collect();
    let vg_opt: Vec<f64> =
        problem.gbus.iter().map(|&bi| sol.x[problem.vm_off() + bi]).collect();
    let v_opt = problem.voltages(&sol.x);
    let objective = gen_cost(case, &pg_opt).expect("lengths match");
    OpfSolution {
        status,
        pg_opt,
        vg_opt,
        v_opt,
        objective,
        iterations: sol.iterations,
        kkt_residual: sol.gradcond,
    }
}
