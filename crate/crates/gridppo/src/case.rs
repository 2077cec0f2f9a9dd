//! Grid case model: buses, branches, generators, polynomial costs.
//!
//! Cases are parsed from whitespace-separated numeric tables under the
//! headers `baseMVA`, `bus`, `gen`, `branch`, `gencost` with the MATPOWER
//! mpc column order, or from a JSON mirror of the same tables. MATPOWER
//! `.m` decoration (`mpc.bus = [ ... ];`) is tolerated so a standard case
//! file can be dropped in unchanged.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bus category: which quantities are fixed at the bus during power flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Active load, MW.
    pub pd: f64,
    /// Reactive load, MVAr.
    pub qd: f64,
    /// Shunt conductance, MW demanded at V = 1.0 p.u.
    pub gs: f64,
    /// Shunt susceptance, MVAr injected at V = 1.0 p.u.
    pub bs: f64,
    /// Voltage magnitude limits, p.u.
    pub vmin: f64,
    pub vmax: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series resistance and reactance, p.u.
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, p.u.
    pub b_charging: f64,
    /// Off-nominal tap ratio; 1.0 for a plain line (0 in the source table
    /// also means nominal).
    pub tap: f64,
    /// Phase shift, degrees.
    pub shift: f64,
    /// Apparent-power flow limit, MVA. `None` when unenforced.
    pub s_max: Option<f64>,
    pub status: bool,
}

/// Quadratic generation cost c2 * Pg^2 + c1 * Pg + c0, Pg in MW.
#[derive(Debug, Clone, Copy)]
pub struct PolyCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl PolyCost {
    pub fn eval(&self, pg_mw: f64) -> f64 {
        (self.c2 * pg_mw + self.c1) * pg_mw + self.c0
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub bus: usize,
    /// Active-power setpoint, MW.
    pub pg: f64,
    /// Voltage setpoint, p.u.
    pub vg: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub cost: PolyCost,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing required section `{0}`")]
    MissingSection(&'static str),
    #[error("{table} row {row} references undefined bus {bus}")]
    UndefinedBus {
        table: &'static str,
        row: usize,
        bus: usize,
    },
    #[error("gencost row {0} uses a piecewise-linear model; only polynomial costs of degree <= 2 are supported")]
    PiecewiseCost(usize),
    #[error("gencost has {ncost} rows but gen has {ngen}")]
    CostCountMismatch { ncost: usize, ngen: usize },
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("branch {0}-{1} has zero series impedance")]
    ZeroImpedance(usize, usize),
    #[error("no branch between buses {0} and {1}")]
    NoSuchBranch(usize, usize),
}

impl Case {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn gen_count(&self) -> usize {
        self.generators.len()
    }

    /// Internal index of the bus with external id `id`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Voltage box of the bus a generator regulates, used as its Vg limits.
    pub fn gen_v_limits(&self, gen: &Generator) -> (f64, f64) {
        let bi = self.bus_index(gen.bus).expect("validated case");
        (self.buses[bi].vmin, self.buses[bi].vmax)
    }
}

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;

#[derive(Deserialize)]
struct JsonCase {
    #[serde(rename = "baseMVA")]
    base_mva: f64,
    bus: Vec<Vec<f64>>,
    gen: Vec<Vec<f64>>,
    branch: Vec<Vec<f64>>,
    gencost: Vec<Vec<f64>>,
}

/// Parse case text (table format or JSON mirror) into a validated `Case`.
pub fn parse_case(text: &str) -> Result<Case, CaseError> {
    let tables = if text.trim_start().starts_with('{') {
        let jc: JsonCase = serde_json::from_str(text)
            .map_err(|e| CaseError::Syntax { line: e.line(), msg: e.to_string() })?;
        Tables {
            base_mva: Some(jc.base_mva),
            bus: jc.bus,
            gen: jc.gen,
            branch: jc.branch,
            gencost: jc.gencost,
        }
    } else {
        parse_tables(text)?
    };
    let case = tables_to_case(tables)?;
    let violations = validate_case(&case);
    if violations.is_empty() {
        Ok(case)
    } else {
        Err(CaseError::Invalid(violations.join("; ")))
    }
}

struct Tables {
    base_mva: Option<f64>,
    bus: Vec<Vec<f64>>,
    gen: Vec<Vec<f64>>,
    branch: Vec<Vec<f64>>,
    gencost: Vec<Vec<f64>>,
}

fn parse_tables(text: &str) -> Result<Tables, CaseError> {
    let mut tables = Tables {
        base_mva: None,
        bus: vec![],
        gen: vec![],
        branch: vec![],
        gencost: vec![],
    };
    let mut section: Option<&'static str> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        // strip comments
        let mut line = raw;
        for marker in ['%', '#'] {
            if let Some(pos) = line.find(marker) {
                line = &line[..pos];
            }
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // MATPOWER boilerplate that carries no table data
        if line.starts_with("function") || line.contains("mpc.version") {
            continue;
        }

        // section header, optionally with `mpc.` prefix and `= [` suffix
        let head = line
            .trim_start_matches("mpc.")
            .split(['=', '['])
            .next()
            .unwrap()
            .trim();
        let named = match head {
            "baseMVA" => Some("baseMVA"),
            "bus" => Some("bus"),
            "gen" => Some("gen"),
            "branch" => Some("branch"),
            "gencost" => Some("gencost"),
            _ => None,
        };
        if let Some(name) = named {
            section = Some(name);
            // inline value, e.g. `mpc.baseMVA = 100;`
            let rest: String = line
                .trim_start_matches("mpc.")
                .trim_start_matches(name)
                .chars()
                .filter(|c| !matches!(c, '=' | '[' | ']' | ';'))
                .collect();
            if !rest.trim().is_empty() {
                push_row(&mut tables, name, rest.trim(), lineno)?;
            }
            continue;
        }

        let body: String = line
            .chars()
            .filter(|c| !matches!(c, '[' | ']' | ';' | ','))
            .collect();
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        let Some(name) = section else {
            return Err(CaseError::Syntax {
                line: lineno,
                msg: format!("data before any section header: `{line}`"),
            });
        };
        push_row(&mut tables, name, body, lineno)?;
    }
    Ok(tables)
}

fn push_row(tables: &mut Tables, section: &str, body: &str, lineno: usize) -> Result<(), CaseError> {
    let mut row = Vec::new();
    for tok in body.split_whitespace() {
        let v: f64 = tok.parse().map_err(|_| CaseError::Syntax {
            line: lineno,
            msg: format!("expected a number, found `{tok}`"),
        })?;
        row.push(v);
    }
    match section {
        "baseMVA" => {
            if row.len() != 1 {
                return Err(CaseError::Syntax {
                    line: lineno,
                    msg: "baseMVA expects a single value".into(),
                });
            }
            tables.base_mva = Some(row[0]);
        }
        other => {
            let (dst, min_cols) = match other {
                "bus" => (&mut tables.bus, BUS_COLS),
                "gen" => (&mut tables.gen, GEN_COLS),
                "branch" => (&mut tables.branch, BRANCH_COLS),
                "gencost" => (&mut tables.gencost, 4),
                _ => unreachable!(),
            };
            if row.len() < min_cols {
                return Err(CaseError::Syntax {
                    line: lineno,
                    msg: format!("{other} row needs at least {min_cols} columns, found {}", row.len()),
                });
            }
            dst.push(row);
        }
    }
    Ok(())
}

fn tables_to_case(t: Tables) -> Result<Case, CaseError> {
    let base_mva = t.base_mva.ok_or(CaseError::MissingSection("baseMVA"))?;
    if t.bus.is_empty() {
        return Err(CaseError::MissingSection("bus"));
    }
    if t.gen.is_empty() {
        return Err(CaseError::MissingSection("gen"));
    }
    if t.branch.is_empty() {
        return Err(CaseError::MissingSection("branch"));
    }
    if t.gencost.is_empty() {
        return Err(CaseError::MissingSection("gencost"));
    }
    if t.gencost.len() != t.gen.len() {
        return Err(CaseError::CostCountMismatch {
            ncost: t.gencost.len(),
            ngen: t.gen.len(),
        });
    }

    let buses: Vec<Bus> = t
        .bus
        .iter()
        .map(|r| Bus {
            id: r[0] as usize,
            kind: match r[1] as usize {
                3 => BusKind::Slack,
                2 => BusKind::Pv,
                _ => BusKind::Pq,
            },
            pd: r[2],
            qd: r[3],
            gs: r[4],
            bs: r[5],
            base_kv: r[9],
            vmax: r[11],
            vmin: r[12],
        })
        .collect();
    let ids: HashSet<usize> = buses.iter().map(|b| b.id).collect();

    let mut generators = Vec::new();
    for (i, (g, c)) in t.gen.iter().zip(&t.gencost).enumerate() {
        let bus = g[0] as usize;
        if !ids.contains(&bus) {
            return Err(CaseError::UndefinedBus { table: "gen", row: i + 1, bus });
        }
        if g[7] == 0.0 {
            continue; // out of service
        }
        if c[0] as usize != 2 {
            return Err(CaseError::PiecewiseCost(i + 1));
        }
        let ncost = c[3] as usize;
        if c.len() < 4 + ncost || ncost > 3 || ncost == 0 {
            return Err(CaseError::Invalid(format!(
                "gencost row {}: polynomial with {ncost} coefficients not supported",
                i + 1
            )));
        }
        // coefficients are highest degree first; pad to quadratic
        let mut coef = [0.0; 3];
        for (k, &v) in c[4..4 + ncost].iter().enumerate() {
            coef[3 - ncost + k] = v;
        }
        generators.push(Generator {
            bus,
            pg: g[1],
            qmax: g[3],
            qmin: g[4],
            vg: g[5],
            pmax: g[8],
            pmin: g[9],
            cost: PolyCost { c2: coef[0], c1: coef[1], c0: coef[2] },
        });
    }

    let mut branches = Vec::new();
    for (i, r) in t.branch.iter().enumerate() {
        let (from, to) = (r[0] as usize, r[1] as usize);
        for bus in [from, to] {
            if !ids.contains(&bus) {
                return Err(CaseError::UndefinedBus { table: "branch", row: i + 1, bus });
            }
        }
        branches.push(Branch {
            from,
            to,
            r: r[2],
            x: r[3],
            b_charging: r[4],
            s_max: if r[5] > 0.0 { Some(r[5]) } else { None },
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            shift: r[9],
            status: r[10] != 0.0,
        });
    }

    Ok(Case { base_mva, buses, branches, generators })
}

/// Collect every invariant breach as human-readable strings. Does not stop
/// at the first failure; an empty vector means the case is valid.
pub fn validate_case(case: &Case) -> Vec<String> {
    let mut v = Vec::new();
    if case.base_mva <= 0.0 || !case.base_mva.is_finite() {
        v.push(format!("baseMVA must be positive and finite, got {}", case.base_mva));
    }
    if case.buses.len() < 2 {
        v.push(format!("case needs at least 2 buses, found {}", case.buses.len()));
    }
    if case.generators.is_empty() {
        v.push("case needs at least one generator".into());
    }

    let mut seen = HashMap::new();
    for b in &case.buses {
        if let Some(prev) = seen.insert(b.id, b.id) {
            v.push(format!("duplicate bus id {prev}"));
        }
        if b.vmin >= b.vmax {
            v.push(format!("bus {}: Vmin {} >= Vmax {}", b.id, b.vmin, b.vmax));
        }
        if !(b.pd.is_finite() && b.qd.is_finite()) {
            v.push(format!("bus {}: non-finite load", b.id));
        }
    }
    let n_slack = case.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if n_slack != 1 {
        v.push(format!("exactly one slack bus required, found {n_slack}"));
    }

    for (i, br) in case.branches.iter().enumerate() {
        if br.r == 0.0 && br.x == 0.0 {
            v.push(format!("branch {} ({}-{}): zero series impedance", i + 1, br.from, br.to));
        }
        if br.from == br.to {
            v.push(format!("branch {} connects bus {} to itself", i + 1, br.from));
        }
        if let Some(s) = br.s_max {
            if s <= 0.0 {
                v.push(format!("branch {} ({}-{}): non-positive flow limit", i + 1, br.from, br.to));
            }
        }
        for bus in [br.from, br.to] {
            if case.bus_index(bus).is_none() {
                v.push(format!("branch {} references undefined bus {bus}", i + 1));
            }
        }
    }

    for (i, g) in case.generators.iter().enumerate() {
        match case.bus_index(g.bus) {
            None => v.push(format!("generator {} references undefined bus {}", i + 1, g.bus)),
            Some(bi) => {
                if case.buses[bi].kind == BusKind::Pq {
                    v.push(format!("generator {} sits on PQ bus {}", i + 1, g.bus));
                }
            }
        }
        if g.pmin > g.pmax {
            v.push(format!("generator {} at bus {}: Pmin {} > Pmax {}", i + 1, g.bus, g.pmin, g.pmax));
        }
        if g.qmin > g.qmax {
            v.push(format!("generator {} at bus {}: Qmin {} > Qmax {}", i + 1, g.bus, g.qmin, g.qmax));
        }
        let c = g.cost;
        if ![c.c2, c.c1, c.c0].iter().all(|x| x.is_finite()) || c.c2 < 0.0 {
            v.push(format!("generator {} at bus {}: bad cost coefficients", i + 1, g.bus));
        }
    }
    v
}

/// Build the complex bus admittance matrix from in-service branches and
/// bus shunts. Off-nominal taps sit on the `from` side.
pub fn build_ybus(case: &Case) -> Result<DMatrix<Complex64>, CaseError> {
    let m = case.bus_count();
    let mut y = DMatrix::<Complex64>::zeros(m, m);
    for br in case.branches.iter().filter(|b| b.status) {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(CaseError::ZeroImpedance(br.from, br.to));
        }
        let f = case.bus_index(br.from).expect("validated");
        let t = case.bus_index(br.to).expect("validated");
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let bc = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap, br.shift.to_radians());
        y[(f, f)] += (ys + bc) / (br.tap * br.tap);
        y[(t, t)] += ys + bc;
        y[(f, t)] += -ys / tap.conj();
        y[(t, f)] += -ys / tap;
    }
    for (i, b) in case.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(b.gs, b.bs) / case.base_mva;
    }
    Ok(y)
}

/// Return a copy of the case with the flow limit of the branch between the
/// given buses replaced. Matches either orientation; applies to every
/// parallel branch on that corridor.
pub fn override_branch_limit(
    case: &Case,
    from: usize,
    to: usize,
    s_max: f64,
) -> Result<Case, CaseError> {
    let mut out = case.clone();
    let mut hit = false;
    for br in out.branches.iter_mut() {
        if (br.from == from && br.to == to) || (br.from == to && br.to == from) {
            br.s_max = Some(s_max);
            hit = true;
        }
    }
    if hit {
        Ok(out)
    } else {
        Err(CaseError::NoSuchBranch(from, to))
    }
}

/// Render a case back to the table text format. `parse_case` of the output
/// reproduces the numeric content exactly.
pub fn serialize_case(case: &Case) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "baseMVA\n{}", fmt_num(case.base_mva));
    let _ = writeln!(s, "bus");
    for b in &case.buses {
        let kind = match b.kind {
            BusKind::Slack => 3,
            BusKind::Pv => 2,
            BusKind::Pq => 1,
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} 1 1 0 {} 1 {} {}",
            b.id,
            kind,
            fmt_num(b.pd),
            fmt_num(b.qd),
            fmt_num(b.gs),
            fmt_num(b.bs),
            fmt_num(b.base_kv),
            fmt_num(b.vmax),
            fmt_num(b.vmin),
        );
    }
    let _ = writeln!(s, "gen");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "{} {} 0 {} {} {} {} 1 {} {}",
            g.bus,
            fmt_num(g.pg),
            fmt_num(g.qmax),
            fmt_num(g.qmin),
            fmt_num(g.vg),
            fmt_num(case.base_mva),
            fmt_num(g.pmax),
            fmt_num(g.pmin),
        );
    }
    let _ = writeln!(s, "branch");
    for br in &case.branches {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} 0 0 {} {} {}",
            br.from,
            br.to,
            fmt_num(br.r),
            fmt_num(br.x),
            fmt_num(br.b_charging),
            fmt_num(br.s_max.unwrap_or(0.0)),
            fmt_num(if br.tap == 1.0 { 0.0 } else { br.tap }),
            fmt_num(br.shift),
            i32::from(br.status),
        );
    }
    let _ = writeln!(s, "gencost");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "2 0 0 3 {} {} {}",
            fmt_num(g.cost.c2),
            fmt_num(g.cost.c1),
            fmt_num(g.cost.c0),
        );
    }
    s
}

fn fmt_num(v: f64) -> String {
    // shortest representation that round-trips through f64
    let mut s = format!("{v}");
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// SHA-256 of the canonical serialization, used to tie datasets and
/// checkpoints to the exact case they were produced from.
pub fn case_fingerprint(case: &Case) -> String {
    let digest = Sha256::digest(serialize_case(case).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

/// Bundled IEEE 14-bus system (MATPOWER column conventions).
pub fn ieee14_case_text() -> &'static str {
    include_str!("../data/ieee14.case")
}

pub fn ieee14() -> Case {
    parse_case(ieee14_case_text()).expect("bundled case is valid")
}
