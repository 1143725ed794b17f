"""Command-line surface: run, baseline, compare, sweep, validate."""

import argparse
import os
import sys

from .canal import build_chain, steady_state
from .io import (
    ConfigError,
    builtin_config,
    emit_plot_data,
    load_config,
    scenario_by_name,
    write_trace,
)
from .simulate import PlantConfig, accumulate_costs, run_centralized, run_closed_loop
from .supervisor import PublishedSetpoints, SynthesisCache, select_topology
from .validate import run_checks


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="canalmpc",
        description="Coalitional MPC for canal level control with topology switching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (default: bundled case study)")
        p.add_argument("--scenario", default=None, help="bundled scenario name (scenario1/scenario2)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--clink", type=float, default=None, help="link cost override")
        p.add_argument("--tlambda", type=int, default=None, help="supervisory interval override")
        p.add_argument("--mismatch", type=float, default=None,
                       help="plant mismatch factor (alternating +/- on surfaces)")

    p_run = sub.add_parser("run", help="closed-loop coalitional run")
    common(p_run)
    p_run.add_argument("--centralized", action="store_true",
                       help="fixed full topology instead of the supervisory layer")

    p_base = sub.add_parser("baseline", help="centralized baseline run")
    common(p_base)

    p_cmp = sub.add_parser("compare", help="coalitional and centralized runs plus cost report")
    common(p_cmp)

    p_swp = sub.add_parser("sweep", help="link-cost sweep: selected link counts at a disturbed state")
    common(p_swp)

    p_val = sub.add_parser("validate", help="run the invariant suite")
    common(p_val)

    return parser


def _materialize(args):
    if args.config:
        cfg = load_config(args.config)
        if args.scenario:
            cfg.scenario = scenario_by_name(args.scenario)
    else:
        cfg = builtin_config(args.scenario or "scenario1")
    if cfg.scenario is None:
        cfg.scenario = scenario_by_name(args.scenario or "scenario1")
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.clink is not None:
        cfg.controller.link_cost = args.clink
    if args.tlambda is not None:
        cfg.t_lambda = args.tlambda
    if args.mismatch is not None:
        cfg.plant = PlantConfig.with_mismatch(args.mismatch, len(cfg.reaches))
    return cfg


def _run_one(cfg, centralized, cache):
    kwargs = dict(
        scenario=cfg.scenario,
        ctrl_cfg=cfg.controller,
        plant_cfg=cfg.plant,
        seed=cfg.seed,
        cache=cache,
        reaches=cfg.reaches,
    )
    if centralized:
        trace = run_centralized(**kwargs)
    else:
        trace = run_closed_loop(t_lambda=cfg.t_lambda, **kwargs)
    trace.config_hash = cfg.config_hash()
    return trace


def _emit(cfg, trace, tag):
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"trace_{tag}.csv")
    write_trace(trace, path)
    plot_dir = os.path.join(cfg.output_dir, f"plots_{tag}")
    emit_plot_data(trace, plot_dir, c_link=cfg.controller.link_cost)
    return path


def _print_report(tag, report):
    print(f"[{tag}] perf_avg={report.perf_avg:.3f} links_avg={report.links_avg:.3f} "
          f"network_avg={report.network_avg:.3f} combined_avg={report.combined_avg:.3f} "
          f"decision_vars_avg={report.decision_vars_avg:.2f} coalitions_avg={report.coalitions_avg:.2f}")


def cmd_run(args, centralized=False):
    cfg = _materialize(args)
    cache = SynthesisCache()
    trace = _run_one(cfg, centralized or getattr(args, "centralized", False), cache)
    tag = "centralized" if (centralized or getattr(args, "centralized", False)) else "coalitional"
    path = _emit(cfg, trace, tag)
    report = accumulate_costs(trace, cfg.controller.link_cost)
    _print_report(tag, report)
    print(f"trace written to {path}")
    return 0


def cmd_compare(args):
    cfg = _materialize(args)
    cache = SynthesisCache()
    coal = _run_one(cfg, False, cache)
    cent = _run_one(cfg, True, cache)
    _emit(cfg, coal, "coalitional")
    _emit(cfg, cent, "centralized")
    c = cfg.controller.link_cost
    for c_price in (0.0, c):
        r_coal = accumulate_costs(coal, c_price)
        r_cent = accumulate_costs(cent, c_price)
        print(f"c_link={c_price}:")
        _print_report("coalitional", r_coal)
        _print_report("centralized", r_cent)
    return 0


def cmd_sweep(args):
    """Selected link count at a disturbed state for each c_link in the sweep list."""
    cfg = _materialize(args)
    subs = build_chain(cfg.reaches, cfg.controller.sample_time)
    rho = cfg.scenario.offtakes_at(0)
    flows, state = steady_state(subs, rho)
    # mid-range incumbent, modest disturbance in its unlinked region
    from .canal import assemble_global
    from .supervisor import split_global_state
    from .topology import Topology

    state = state.copy()
    model = assemble_global(subs)
    lv = model.level_rows()
    n = len(subs)
    mid = n // 2
    state[lv[mid - 1]] = 0.06
    state[lv[mid]] = 0.048
    published = PublishedSetpoints.bootstrap(flows)
    cache = SynthesisCache()
    third = max(1, (n - 1) // 4)
    incumbent = Topology(
        n, frozenset(range(1, third + 1)) | frozenset(range(n - third, n))
    )
    counts = []
    for c_link in cfg.c_link_sweep:
        result = select_topology(
            split_global_state(subs, state), rho, published, incumbent, cache,
            subs, cfg.controller, cfg.t_lambda, c_link=c_link, global_model=model,
        )
        counts.append(result.topology.n_links)
        print(f"c_link={c_link:g}: selected {result.topology.bits()} ({result.topology.n_links} links)")
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    print(f"link count non-increasing in c_link: {'yes' if monotone else 'NO'}")
    return 0 if monotone else 1


def cmd_validate(args):
    cfg = _materialize(args)
    results = run_checks(cfg)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "baseline":
            return cmd_run(args, centralized=True)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "validate":
            return cmd_validate(args)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
