"""Process supervisor: one world-server and one process per vehicle, a run manifest, and replay of recorded runs."""
from __future__ import annotations

import json
import os
import selectors
import signal
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import protocol as P
from .config import ConfigError
from .experiments import ANALYSIS_GLOBS, Scenario, analyze_frames, write_summary

MANIFEST = "manifest.json"
SCENARIO_COPY = "scenario.cfg"
REPLAY_DIR = "replay"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHILD = 3
EXIT_TIMEOUT = 4

READY_PREFIX = "READY "


class LaunchError(RuntimeError):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class ReplayError(RuntimeError):
    pass


@dataclass
class ProcessEntry:
    role: str
    argv: list[str]
    pid: Optional[int] = None
    exit_status: Optional[int] = None
    body_id: Optional[int] = None


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    scenario: str
    seeds: dict
    processes: list[ProcessEntry] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    status: str = "pending"
    diagnostics: list[str] = field(default_factory=list)
    started: Optional[float] = None
    finished: Optional[float] = None
    port: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        raw = json.loads(text)
        raw["processes"] = [ProcessEntry(**p) for p in raw.get("processes", [])]
        return cls(**raw)

    def write(self, directory: Path) -> None:
        tmp = directory / (MANIFEST + ".tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, directory / MANIFEST)

    @classmethod
    def load(cls, directory: str | Path) -> "RunManifest":
        path = Path(directory) / MANIFEST
        try:
            return cls.from_json(path.read_text())
        except (OSError, ValueError, TypeError) as exc:
            raise ReplayError(f"cannot read {path}: {exc}") from exc


def run_id_for(scenario: Scenario, seed: int) -> str:
    """Deterministic id: identical inputs map to the same run directory name."""
    return f"{scenario.run.scenario}-{scenario.with_run(trial_seed=seed).config_hash()[:12]}-s{seed}"


def _child_argv(*args: str) -> list[str]:
    return [sys.executable, "-m", "forestsim.cli", *args]


def _child_env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def _stop(procs: list[subprocess.Popen], grace: float = 3.0) -> None:
    """Terminate every live child, escalating to SIGKILL after ``grace`` seconds."""
    for p in procs:
        if p.poll() is None:
            try:
                p.send_signal(signal.SIGTERM)
            except OSError:
                pass
    deadline = time.monotonic() + grace
    for p in procs:
        remaining = max(deadline - time.monotonic(), 0.0)
        try:
            p.wait(remaining)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def _wait_ready(proc: subprocess.Popen, timeout: float) -> int:
    sel = selectors.DefaultSelector()
    sel.register(proc.stdout, selectors.EVENT_READ)
    deadline = time.monotonic() + timeout
    try:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise LaunchError(f"world server not ready after {timeout:.0f} s", EXIT_TIMEOUT)
            if not sel.select(remaining):
                continue
            line = proc.stdout.readline()
            if not line:
                code = proc.wait()
                raise LaunchError(f"world server exited with status {code} before becoming ready", EXIT_CONFIG if code == EXIT_CONFIG else EXIT_CHILD)
            if line.startswith(READY_PREFIX):
                return int(line[len(READY_PREFIX):])
    finally:
        sel.close()


def launch(
    scenario_path: str | Path,
    out_dir: Optional[str | Path] = None,
    seed: Optional[int] = None,
    profile: Optional[str | Path] = None,
    port: Optional[int] = None,
    timeout: float = 900.0,
    runs_root: str | Path = "runs",
) -> RunManifest:
    """Run one scenario as separate processes and collect its logs.

    Raises ConfigError before any process starts if the scenario does not
    parse, and LaunchError (carrying the CLI exit code) if a child fails or
    the run exceeds ``timeout`` seconds. Children never outlive this call.
    """
    scenario = Scenario.load(scenario_path)
    seed = scenario.run.trial_seed if seed is None else seed
    scenario = scenario.with_run(trial_seed=seed)
    scenario.build(seed)  # reject configurations that cannot be instantiated
    rid = run_id_for(scenario, seed)
    out = Path(out_dir) if out_dir is not None else Path(runs_root) / rid
    out.mkdir(parents=True, exist_ok=True)
    (out / SCENARIO_COPY).write_text(scenario.source)
    port = P.default_port() if port is None else port
    _, _, specs = scenario.build(seed)

    manifest = RunManifest(
        run_id=rid,
        config_hash=scenario.config_hash(),
        scenario=scenario.run.scenario,
        seeds={"scene": scenario.run.scene_seed, "trial": seed, "gust": seed, "vehicles": {str(s.body_id): s.gust.seed for s in specs}},
        status="running",
        started=time.time(),
    )
    cfg = str(out / SCENARIO_COPY)
    server_args = ["serve", cfg, "--out", str(out), "--seed", str(seed), "--port", str(port)]
    if profile is not None:
        server_args += ["--profile", str(profile)]
    manifest.processes.append(ProcessEntry("world-server", _child_argv(*server_args)))
    for s in specs:
        manifest.processes.append(ProcessEntry("vehicle", [], body_id=s.body_id))
    manifest.write(out)

    env = _child_env()
    procs: list[subprocess.Popen] = []
    deadline = time.monotonic() + timeout
    try:
        server = subprocess.Popen(manifest.processes[0].argv, stdout=subprocess.PIPE, text=True, env=env)
        procs.append(server)
        manifest.processes[0].pid = server.pid
        actual = _wait_ready(server, max(deadline - time.monotonic(), 0.0))
        manifest.port = actual
        for entry in manifest.processes[1:]:
            entry.argv = _child_argv("vehicle", cfg, "--body", str(entry.body_id), "--out", str(out), "--seed", str(seed), "--port", str(actual))
            p = subprocess.Popen(entry.argv, env=env)
            procs.append(p)
            entry.pid = p.pid
        manifest.write(out)
        _supervise(procs, manifest, deadline)
    except LaunchError as exc:
        manifest.diagnostics.append(str(exc))
        manifest.status = "timeout" if exc.exit_code == EXIT_TIMEOUT else "failed"
        _stop(procs)
        _finalize(manifest, procs, out)
        raise
    except BaseException:
        manifest.status = "interrupted"
        _stop(procs)
        _finalize(manifest, procs, out)
        raise
    # drain stdout so the pipe is closed cleanly
    server.stdout.read()
    server.stdout.close()
    write_summary(out)
    manifest.status = "ok"
    _finalize(manifest, procs, out)
    return manifest


def _supervise(procs: list[subprocess.Popen], manifest: RunManifest, deadline: float) -> None:
    """Poll children until all exit 0; the first non-zero exit fails the run."""
    while True:
        codes = [p.poll() for p in procs]
        for entry, code in zip(manifest.processes, codes):
            if code not in (None, 0):
                what = entry.role if entry.body_id is None else f"vehicle {entry.body_id}"
                raise LaunchError(f"{what} exited with status {code}", EXIT_TIMEOUT if code == EXIT_TIMEOUT else EXIT_CHILD)
        if all(c == 0 for c in codes):
            return
        if time.monotonic() > deadline:
            raise LaunchError("run exceeded its time limit", EXIT_TIMEOUT)
        time.sleep(0.05)


def _finalize(manifest: RunManifest, procs: list[subprocess.Popen], out: Path) -> None:
    for entry, p in zip(manifest.processes, procs):
        entry.exit_status = p.returncode
    manifest.finished = time.time()
    manifest.outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name not in (MANIFEST, MANIFEST + ".tmp"))
    manifest.write(out)


@dataclass
class ReplayResult:
    directory: Path
    outputs: list[Path]
    mismatches: list[str]

    @property
    def equivalent(self) -> bool:
        return not self.mismatches


def replay(run_dir: str | Path) -> ReplayResult:
    """Recompute the analysis outputs of a finished run from its recorded frames into ``<run_dir>/replay``.

    Every output is compared byte-for-byte with the live run's file of the
    same name; differences are listed in ``mismatches``.
    """
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    try:
        scenario = Scenario.load(run_dir / SCENARIO_COPY)
    except ConfigError as exc:
        raise ReplayError(str(exc)) from exc
    scenario = scenario.with_run(trial_seed=int(manifest.seeds["trial"]))
    if not any(run_dir.glob("frames_cam*.ppm")):
        raise ReplayError(f"{run_dir} has no recorded frames")
    dest = run_dir / REPLAY_DIR
    try:
        outputs = analyze_frames(run_dir, dest, scenario)
    except (OSError, ValueError) as exc:
        raise ReplayError(f"corrupt or incomplete logs in {run_dir}: {exc}") from exc
    mismatches = []
    for path in outputs:
        live = run_dir / path.name
        if not live.exists():
            mismatches.append(f"{path.name}: no live counterpart")
        elif live.read_bytes() != path.read_bytes():
            mismatches.append(f"{path.name}: differs from live output")
    live_names = {p.name for g in ANALYSIS_GLOBS for p in run_dir.glob(g)}
    for name in sorted(live_names - {p.name for p in outputs}):
        mismatches.append(f"{name}: not reproduced by replay")
    return ReplayResult(dest, outputs, mismatches)
