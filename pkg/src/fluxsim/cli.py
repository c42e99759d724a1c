"""``fluxsim`` command line: run, compare, cost, serve, validate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .engine import Engine, load_log
from .harness import (
    aggregate,
    aggregate_csv,
    compare_topologies,
    cost_report,
    records_csv,
    run_scenario,
    write_outputs,
)
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _run(args) -> int:
    scenario = load_scenario(args.scenario)
    result = run_scenario(scenario, seed=args.seed, reps=args.reps)
    if args.out:
        for name, path in write_outputs(result, args.out).items():
            print(f"{name}: {path}")
    else:
        sys.stdout.write(aggregate_csv(aggregate(result.records)))
    return EXIT_OK


def _compare(args) -> int:
    scenario = load_scenario(args.scenario)
    pairs = compare_topologies(scenario, reps=args.reps)
    records = [r for pair in pairs for r in pair]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(records_csv(records))
    print(f"{'size':>6}{'billed':>8}{'billed+L':>10}{'node_s':>12}{'node_s+L':>12}{'wall':>10}{'wall+L':>10}")
    for row_e, row_x in zip(*(
        [r for r in aggregate(records) if r["mode"] == m] for m in ("embedded_lead", "external_launcher")
    )):
        print(f"{row_e['size']:>6}{row_e['billed_nodes_mean']:>8.0f}{row_x['billed_nodes_mean']:>10.0f}"
              f"{row_e['node_seconds_billed_mean']:>12.1f}{row_x['node_seconds_billed_mean']:>12.1f}"
              f"{row_e['wall_time_mean']:>10.2f}{row_x['wall_time_mean']:>10.2f}")
    return EXIT_OK


def _cost(args) -> int:
    report = cost_report(load_log(Path(args.eventlog).read_text()))
    print(report.table())
    return EXIT_OK


def _validate(args) -> int:
    scenario = load_scenario(args.scenario)
    sizes = ", ".join(map(str, scenario.size_list()))
    print(f"{args.scenario}: ok ({scenario.name}, sizes {sizes}, {scenario.reps} reps, {len(scenario.jobs)} jobs)")
    return EXIT_OK


def _serve(args) -> int:
    from .api import EngineDriver, TenancyApi, make_server

    scenario = load_scenario(args.scenario)
    engine = Engine(scenario.seed if args.seed is None else args.seed)
    cluster = scenario.build(engine, scenario.cluster.size)
    cluster.start()
    api = TenancyApi(cluster, inline=False)
    driver = EngineDriver(engine, speed=args.speed)
    server = make_server(api, args.host, args.port)
    driver.start()
    print(f"serving {cluster.spec.name} on http://{args.host}:{server.server_port} (ctrl-c to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        driver.halt.set()
        server.server_close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxsim", description="Simulate HPC MiniClusters on a Kubernetes-like substrate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every size, mode and repetition of a scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--out", help="directory for metrics.csv, aggregate.csv and events.jsonl")
    p.set_defaults(fn=_run)

    p = sub.add_parser("compare", help="embedded lead vs external launcher on the same seeds")
    p.add_argument("scenario")
    p.add_argument("--reps", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_compare)

    p = sub.add_parser("cost", help="one-time vs repeated cost table from an event log")
    p.add_argument("eventlog")
    p.set_defaults(fn=_cost)

    p = sub.add_parser("serve", help="run the REST API against a live simulation")
    p.add_argument("scenario")
    p.add_argument("--port", type=int, default=8050)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second")
    p.set_defaults(fn=_serve)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")
    p.set_defaults(fn=_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if args.command == "validate" else EXIT_RUNTIME
    except Exception as exc:
        logging.getLogger("fluxsim").debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
