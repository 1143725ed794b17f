"""Invariant suite behind the `validate` CLI command.

Each check is a named predicate over a run configuration; `run_checks`
executes all of them and reports (name, passed, detail) triples.  These are
the module-level invariants that do not need a full closed-loop run.
"""

import itertools

import numpy as np

from .canal import assemble_global, build_chain, build_coalition_model, steady_state
from .control import compute_setpoint
from .numerics import QpProblem, solve_qp
from .supervisor import SynthesisCache, synthesize
from .topology import Partition, Topology, partition_of


def _check_partition_conditions(cfg):
    n = len(cfg.reaches)
    links = list(range(1, n))
    count = 0
    for bits in itertools.product((0, 1), repeat=n - 1):
        enabled = frozenset(l for l, b in zip(links, bits) if b)
        p = partition_of(Topology(n, enabled))
        members = sorted(s for b in p for s in b)
        if members != list(range(1, n + 1)):
            return False, f"cover violated for {enabled}"
        if not 1 <= len(p) <= n:
            return False, f"block count {len(p)} out of range"
        count += 1
    return True, f"{count} topologies"


def _check_block_assembly(cfg):
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    global_model = assemble_global(subs)
    rng = np.random.default_rng(0)
    n = len(subs)
    for _ in range(5):
        cuts = sorted(rng.choice(range(1, n), size=int(rng.integers(0, n - 1)), replace=False))
        blocks = []
        start = 1
        for c in list(cuts) + [n]:
            if start <= c:
                blocks.append(tuple(range(start, c + 1)))
            start = c + 1
        coals = [build_coalition_model(subs, b, blocks) for b in blocks]
        xi = np.zeros((global_model.n, global_model.n))
        row = 0
        offsets = []
        for c in coals:
            offsets.append(row)
            xi[row:row + c.n, row:row + c.n] = c.Xi
            row += c.n
        for i, ci in enumerate(coals):
            for j, cj in enumerate(coals):
                if i != j:
                    xi_ij, _ = ci.coupling_matrices(cj)
                    xi[offsets[i]:offsets[i] + ci.n, offsets[j]:offsets[j] + cj.n] += xi_ij
        if not np.allclose(xi, global_model.Xi, atol=1e-13):
            return False, f"assembly mismatch for {blocks}"
    return True, "5 random partitions"


def _check_steady_state(cfg):
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    model = assemble_global(subs)
    offtakes = np.full(len(subs), 2.0)
    _, state = steady_state(subs, offtakes)
    nxt = model.Xi @ state + model.Phi @ offtakes
    ok = np.allclose(nxt, state, atol=1e-10)
    return ok, "telescoped flows are a fixed point"


def _check_gamma_rows(cfg):
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    model = assemble_global(subs)
    ok = np.allclose(model.gamma @ model.gamma.T, np.eye(model.m), atol=1e-14)
    return ok, "level selectors orthonormal"


def _check_synthesis_certificates(cfg):
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    cache = SynthesisCache()
    n = len(subs)
    partitions = [
        Partition(tuple((i,) for i in range(1, n + 1))),
        Partition((tuple(range(1, n + 1)),)),
        Partition(((1, 2, 3), tuple(range(4, n + 1)))),
    ]
    worst = 0.0
    for part in partitions:
        gains = synthesize(part, subs, cfg.controller, cache)
        for entry in gains.entries.values():
            tol = 1e-8 * (1.0 + np.linalg.norm(entry.p_mat, np.inf))
            worst = max(worst, entry.dare_res / tol, entry.lyap_res / tol)
            if entry.dare_res > tol or entry.lyap_res > tol:
                return False, f"certificate failed for {entry.members}"
    return True, f"worst residual at {worst:.1e} of tolerance"


def _check_setpoint_telescoping(cfg):
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    model = assemble_global(subs)
    rng = np.random.default_rng(1)
    rho = rng.uniform(0.5, 4.0, size=len(subs))
    xi_bar, u_bar = compute_setpoint(model, rho, np.zeros(0))
    expected = np.cumsum(rho[::-1])[::-1]
    ok = (
        np.allclose(xi_bar[model.gate_flow_rows()], expected, atol=1e-9)
        and np.allclose(model.gamma @ xi_bar, 0.0, atol=1e-10)
        and np.allclose(u_bar, 0.0, atol=1e-10)
    )
    return ok, "flows telescope, levels zero"


def _check_qp_equality_agreement(cfg):
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = int(rng.integers(2, 5))
        m_mat = rng.normal(size=(n, n))
        h = m_mat @ m_mat.T + 0.5 * np.eye(n)
        f = rng.normal(size=n)
        aeq = rng.normal(size=(1, n))
        beq = rng.normal(size=1)
        sol = solve_qp(QpProblem(h, f, aeq, beq))
        kkt = np.block([[h, aeq.T], [aeq, np.zeros((1, 1))]])
        ref = np.linalg.solve(kkt, np.concatenate([-f, beq]))[:n]
        if np.linalg.norm(sol.x - ref, np.inf) > 1e-9 * (1 + np.linalg.norm(ref, np.inf)):
            return False, "KKT disagreement"
    return True, "10 random equality QPs"


CHECKS = [
    ("partition-conditions-exhaustive", _check_partition_conditions),
    ("coalition-block-assembly", _check_block_assembly),
    ("global-steady-state", _check_steady_state),
    ("level-selector-rows", _check_gamma_rows),
    ("synthesis-certificates", _check_synthesis_certificates),
    ("setpoint-telescoping", _check_setpoint_telescoping),
    ("qp-equality-kkt-agreement", _check_qp_equality_agreement),
]


def run_checks(cfg):
    """Run every invariant check; returns a list of (name, ok, detail)."""
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(cfg)
        except Exception as exc:  # a crash is a failure with the reason attached
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
