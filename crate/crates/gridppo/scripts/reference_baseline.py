#!/usr/bin/env python3
"""Independent reference solutions for the bundled IEEE 14-bus case.

Solves the nominal power flow with MINPACK (scipy.optimize.root, hybr) and
the AC OPF with scipy's trust-region interior-point NLP solver
(trust-constr), both coded directly from the textbook equations with no
code shared with the Rust implementation. The printed JSON is frozen into
the Rust test suite as the reference fixture.

Usage: python3 scripts/reference_baseline.py ../data/ieee14.case
"""

import json
import sys

import numpy as np
from scipy import optimize


def parse_case(path):
    tables = {"bus": [], "gen": [], "branch": [], "gencost": []}
    base = None
    section = None
    for raw in open(path):
        line = raw.split("%")[0].split("#")[0].strip()
        if not line:
            continue
        if line in ("baseMVA", "bus", "gen", "branch", "gencost"):
            section = line
            continue
        row = [float(t) for t in line.split()]
        if section == "baseMVA":
            base = row[0]
        else:
            tables[section].append(row)
    return base, {k: np.array(v) for k, v in tables.items()}


def build_ybus(base, bus, branch):
    n = len(bus)
    ids = {int(b[0]): i for i, b in enumerate(bus)}
    y = np.zeros((n, n), dtype=complex)
    for br in branch:
        if br[10] == 0:
            continue
        f, t = ids[int(br[0])], ids[int(br[1])]
        ys = 1.0 / (br[2] + 1j * br[3])
        bc = 1j * br[4] / 2.0
        tap = br[8] if br[8] != 0 else 1.0
        a = tap * np.exp(1j * np.deg2rad(br[9]))
        y[f, f] += (ys + bc) / (tap * tap)
        y[t, t] += ys + bc
        y[f, t] += -ys / np.conj(a)
        y[t, f] += -ys / a
    for i, b in enumerate(bus):
        y[i, i] += (b[4] + 1j * b[5]) / base
    return y, ids


def branch_flows(base, bus, branch, v):
    ids = {int(b[0]): i for i, b in enumerate(bus)}
    sf, st = [], []
    for br in branch:
        f, t = ids[int(br[0])], ids[int(br[1])]
        ys = 1.0 / (br[2] + 1j * br[3])
        bc = 1j * br[4] / 2.0
        tap = br[8] if br[8] != 0 else 1.0
        a = tap * np.exp(1j * np.deg2rad(br[9]))
        i_f = ((ys + bc) / (tap * tap)) * v[f] + (-ys / np.conj(a)) * v[t]
        i_t = (-ys / a) * v[f] + (ys + bc) * v[t]
        sf.append(v[f] * np.conj(i_f))
        st.append(v[t] * np.conj(i_t))
    return np.array(sf), np.array(st)


def solve_pf(base, bus, gen, branch):
    """Nominal power flow via MINPACK's hybrid Powell method."""
    n = len(bus)
    ybus, ids = build_ybus(base, bus, branch)
    kinds = bus[:, 1].astype(int)
    slack = int(np.where(kinds == 3)[0][0])
    non_slack = [i for i in range(n) if i != slack]
    pq = [i for i in range(n) if kinds[i] == 1]

    vm0 = np.ones(n)
    sched = -(bus[:, 2] + 1j * bus[:, 3]) / base
    for g in gen:
        i = ids[int(g[0])]
        sched[i] += g[1] / base
        if kinds[i] != 1:
            vm0[i] = g[5]

    def residual(x):
        va = np.zeros(n)
        vm = vm0.copy()
        va[non_slack] = x[: len(non_slack)]
        vm[pq] = x[len(non_slack):]
        v = vm * np.exp(1j * va)
        inj = v * np.conj(ybus @ v)
        mis = inj - sched
        return np.concatenate([mis[non_slack].real, mis[pq].imag])

    x0 = np.zeros(len(non_slack) + len(pq))
    x0[len(non_slack):] = 1.0
    sol = optimize.root(residual, x0, method="hybr", tol=1e-13)
    assert sol.success, sol.message
    assert np.max(np.abs(residual(sol.x))) < 1e-10

    va = np.zeros(n)
    vm = vm0.copy()
    va[non_slack] = sol.x[: len(non_slack)]
    vm[pq] = sol.x[len(non_slack):]
    v = vm * np.exp(1j * va)
    inj = v * np.conj(ybus @ v)

    # confirm no PV generator is pushed outside its reactive box, so the
    # fixture is comparable with a Q-limit-enforcing solver
    for g in gen:
        i = ids[int(g[0])]
        if kinds[i] == 2:
            qg = inj[i].imag * base + bus[i, 3]
            assert g[4] - 1e-6 <= qg <= g[3] + 1e-6, f"Q limit binds at bus {int(g[0])}"

    slack_pg = inj[slack].real * base + bus[slack, 2]
    sf, st = branch_flows(base, bus, branch, v)
    return v, slack_pg, np.abs(sf) * base, np.abs(st) * base


def solve_opf(base, bus, gen, branch, load_scale=1.0, overrides=None):
    """Full AC OPF via scipy trust-constr (an interior-point NLP method)."""
    bus = bus.copy()
    branch = branch.copy()
    bus[:, 2] *= load_scale
    bus[:, 3] *= load_scale
    if overrides:
        for (f, t, s) in overrides:
            for br in branch:
                if {int(br[0]), int(br[1])} == {f, t}:
                    br[5] = s

    n, ng = len(bus), len(gen)
    ybus, ids = build_ybus(base, bus, branch)
    slack = int(np.where(bus[:, 1] == 3)[0][0])
    non_slack = [i for i in range(n) if i != slack]
    gbus = [ids[int(g[0])] for g in gen]
    cg = np.zeros((n, ng))
    for k, i in enumerate(gbus):
        cg[i, k] = 1.0
    sd = (bus[:, 2] + 1j * bus[:, 3]) / base

    nva = len(non_slack)

    def unpack(x):
        va = np.zeros(n)
        va[non_slack] = x[:nva]
        vm = x[nva: nva + n]
        pg = x[nva + n: nva + n + ng]
        qg = x[nva + n + ng:]
        return va, vm, pg, qg

    gencost = case_tables["gencost"]

    def cost(x):
        _, _, pg, _ = unpack(x)
        mw = pg * base
        return float(np.sum(gencost[:, 4] * mw ** 2 + gencost[:, 5] * mw + gencost[:, 6]))

    def balance(x):
        va, vm, pg, qg = unpack(x)
        v = vm * np.exp(1j * va)
        inj = v * np.conj(ybus @ v)
        mis = inj + sd - cg @ (pg + 1j * qg)
        return np.concatenate([mis.real, mis.imag])

    limited = [(i, br[5] / base) for i, br in enumerate(branch) if br[5] > 0]

    def flow_sq(x):
        va, vm, _, _ = unpack(x)
        v = vm * np.exp(1j * va)
        sf, st = branch_flows(base, bus, branch, v)
        out = []
        for i, _ in limited:
            out.append(np.abs(sf[i]) ** 2)
            out.append(np.abs(st[i]) ** 2)
        return np.array(out)

    lb = np.concatenate([
        -np.pi * np.ones(nva),
        bus[:, 12],
        gen[:, 9] / base,
        gen[:, 4] / base,
    ])
    ub = np.concatenate([
        np.pi * np.ones(nva),
        bus[:, 11],
        gen[:, 8] / base,
        gen[:, 3] / base,
    ])
    x0 = (lb + ub) / 2.0
    x0[:nva] = 0.0

    cons = [
        optimize.NonlinearConstraint(balance, 0.0, 0.0),
        optimize.NonlinearConstraint(flow_sq, -np.inf, [s ** 2 for _, s in limited for _ in "ft"]),
    ]
    res = optimize.minimize(
        cost, x0, method="trust-constr",
        bounds=optimize.Bounds(lb, ub), constraints=cons,
        options={"gtol": 1e-10, "xtol": 1e-12, "maxiter": 3000},
    )
    feasible = res.constr_violation < 1e-7
    va, vm, pg, qg = unpack(res.x)
    return {
        "success": bool(res.success or res.status == 2),
        "feasible": bool(feasible),
        "objective": cost(res.x),
        "pg_mw": list(pg * base),
        "vg_pu": list(vm[gbus]),
        "constr_violation": float(res.constr_violation),
    }


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "data/ieee14.case"
    base, case_tables = parse_case(path)
    bus, gen, branch = case_tables["bus"], case_tables["gen"], case_tables["branch"]

    v, slack_pg, sf, st = solve_pf(base, bus, gen, branch)
    out = {
        "pf_vm": [round(x, 12) for x in np.abs(v)],
        "pf_va_deg": [round(x, 12) for x in np.rad2deg(np.angle(v))],
        "pf_slack_pg_mw": round(slack_pg, 9),
        "pf_sf_mva": [round(x, 9) for x in sf],
        "pf_st_mva": [round(x, 9) for x in st],
        "opf_nominal": solve_opf(base, bus, gen, branch),
        "opf_mod_ln45_32mva_load140": solve_opf(
            base, bus, gen, branch, load_scale=1.4, overrides=[(4, 5, 32.0)]
        ),
        "opf_mod_ln45_32mva_nominal_load": solve_opf(
            base, bus, gen, branch, load_scale=1.0, overrides=[(4, 5, 32.0)]
        ),
    }
    print(json.dumps(out, indent=1))
