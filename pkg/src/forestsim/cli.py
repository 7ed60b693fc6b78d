"""Command line: ``sim run``, ``sim replay``, ``sim matrix`` (plus internal ``serve``/``vehicle`` child commands)."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import protocol as P
from .config import ConfigError
from .experiments import Scenario, run_matrix
from .orchestrator import EXIT_CHILD, EXIT_CONFIG, EXIT_OK, READY_PREFIX, LaunchError, ReplayError, launch, replay
from .profiler import Profiler
from .runtime import RunError, WorldProcess, run_vehicle
from .session import PortInUse


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="Lockstep multi-vehicle forest simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{run,replay,matrix}")

    run = sub.add_parser("run", help="run one scenario as world-server plus vehicle processes")
    run.add_argument("scenario", type=Path)
    run.add_argument("--out", type=Path, help="run directory (default runs/<run id>)")
    run.add_argument("--seed", type=int, help="trial seed (overrides the scenario file)")
    run.add_argument("--profile", type=Path, help="write the per-tick profile CSV here")
    run.add_argument("--port", type=int, help="TCP port (default: $SIM_PORT or %d; 0 picks a free one)" % P.DEFAULT_PORT)
    run.add_argument("--timeout", type=float, default=900.0, help="wall-clock limit in seconds")

    rep = sub.add_parser("replay", help="recompute analysis outputs of a recorded run and compare them")
    rep.add_argument("directory", type=Path)

    mat = sub.add_parser("matrix", help="run the wind x altitude out-and-back matrix")
    mat.add_argument("scenario", type=Path)
    mat.add_argument("--out", type=Path, default=Path("matrix"))

    srv = sub.add_parser("serve")
    srv.add_argument("scenario", type=Path)
    srv.add_argument("--out", type=Path, required=True)
    srv.add_argument("--seed", type=int)
    srv.add_argument("--port", type=int, default=None)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--profile", type=Path)
    srv.add_argument("--stall-timeout", type=float, default=120.0)

    veh = sub.add_parser("vehicle")
    veh.add_argument("scenario", type=Path)
    veh.add_argument("--body", type=int, required=True)
    veh.add_argument("--out", type=Path, required=True)
    veh.add_argument("--seed", type=int)
    veh.add_argument("--port", type=int, required=True)
    veh.add_argument("--host", default="127.0.0.1")
    return ap


def _load(path: Path, seed: Optional[int]) -> Scenario:
    sc = Scenario.load(path)
    return sc if seed is None else sc.with_run(trial_seed=seed)


def _cmd_run(a) -> int:
    try:
        m = launch(a.scenario, a.out, a.seed, a.profile, a.port, a.timeout)
    except ConfigError as exc:
        print(f"sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LaunchError as exc:
        print(f"sim: run failed: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"run {m.run_id}: {m.status}")
    return EXIT_OK


def _cmd_replay(a) -> int:
    try:
        res = replay(a.directory)
    except ReplayError as exc:
        print(f"sim: replay failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in res.outputs:
        print(p)
    if not res.equivalent:
        for m in res.mismatches:
            print(f"mismatch: {m}", file=sys.stderr)
        return 1
    print("replay matches live analysis")
    return EXIT_OK


def _cmd_matrix(a) -> int:
    try:
        sc = Scenario.load(a.scenario)
    except ConfigError as exc:
        print(f"sim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(wind, alt, seed, res):
        print(f"{wind}-wind {alt}-alt seed {seed}: G={res.report.G:.3f} tracked={res.report.percent_correct:.1f}%", flush=True)

    rep = run_matrix(sc, a.out, progress)
    print(rep.table(), end="")
    for wind, alt, seed, why in rep.incomplete:
        print(f"incomplete: {wind}-wind {alt}-alt seed {seed}: {why}", file=sys.stderr)
    return EXIT_CHILD if rep.incomplete else EXIT_OK


def _cmd_serve(a) -> int:
    try:
        sc = _load(a.scenario, a.seed)
        scene, world_cfg, specs = sc.build()
    except (ConfigError, ValueError) as exc:
        print(f"serve: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    port = P.default_port() if a.port is None else a.port
    profiler = Profiler(a.profile) if a.profile is not None else None
    try:
        wp = WorldProcess(scene, world_cfg, specs, sc.run.ticks, a.host, port, a.out, sc.run.mode, profiler, a.stall_timeout)
    except PortInUse as exc:
        print(f"serve: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def ready(p: int) -> None:
        print(f"{READY_PREFIX}{p}", flush=True)

    try:
        wp.serve(ready)
    except RunError as exc:
        print(f"serve: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        if profiler is not None:
            profiler.close()
    return EXIT_OK


def _cmd_vehicle(a) -> int:
    try:
        sc = _load(a.scenario, a.seed)
        scene, world_cfg, specs = sc.build()
    except (ConfigError, ValueError) as exc:
        print(f"vehicle: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    spec = next((s for s in specs if s.body_id == a.body), None)
    if spec is None:
        print(f"vehicle: body {a.body} is not in the scenario", file=sys.stderr)
        return EXIT_CONFIG
    return run_vehicle(spec, world_cfg.dt, sc.run.ticks, a.host, a.port, a.out, scene)


_COMMANDS = {"run": _cmd_run, "replay": _cmd_replay, "matrix": _cmd_matrix, "serve": _cmd_serve, "vehicle": _cmd_vehicle}


def main(argv: Optional[Sequence[str]] = None) -> int:
    a = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return _COMMANDS[a.command](a)


if __name__ == "__main__":
    sys.exit(main())
