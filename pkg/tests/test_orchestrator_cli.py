import os
import shutil
import socket
import threading

import pytest

from forestsim import protocol as P
from forestsim.cli import main
from forestsim.config import ConfigError
from forestsim.experiments import Scenario
from forestsim.orchestrator import EXIT_TIMEOUT, MANIFEST, LaunchError, ReplayError, RunManifest, launch, replay
from forestsim.runtime import RunError, WorldProcess
from forestsim.session import ClientConnection, connect

FOLLOW = """
scenario = follow
ticks = 30
width = 96
height = 72
log_frames = true
[scene]
area = -20, -20, 40, 20
tree_count = 6
bush_count = 4
rock_count = 2
grass_count = 4
"""


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    # a zombie still answers signal 0; check its state
    try:
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().split()[2] != "Z"
    except OSError:
        return False


@pytest.fixture(scope="module")
def follow_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("follow")
    cfg = root / "follow.cfg"
    cfg.write_text(FOLLOW)
    a = launch(cfg, root / "a", port=0, timeout=300)
    b = launch(cfg, root / "b", port=0, timeout=300)
    return root, a, b


def test_config_error_exits_before_launch(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    bad = tmp_path / "bad.cfg"
    bad.write_text("wind = gale\n")
    assert main(["run", str(bad)]) == 2
    assert not (tmp_path / "runs").exists()
    assert "config error" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg")]) == 2
    with pytest.raises(ConfigError):
        launch(bad, tmp_path / "x")
    assert not (tmp_path / "x").exists()


def test_port_in_use_exits_2(tmp_path):
    cfg = tmp_path / "f.cfg"
    cfg.write_text(FOLLOW)
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    try:
        port = blocker.getsockname()[1]
        assert main(["run", str(cfg), "--out", str(tmp_path / "run"), "--port", str(port)]) == 2
    finally:
        blocker.close()
    m = RunManifest.load(tmp_path / "run")
    assert m.status == "failed"
    assert all(not _alive(p.pid) for p in m.processes if p.pid)


def test_timeout_exits_4_and_reaps_children(tmp_path):
    cfg = tmp_path / "f.cfg"
    cfg.write_text(FOLLOW)
    with pytest.raises(LaunchError) as err:
        launch(cfg, tmp_path / "run", port=0, timeout=0.3)
    assert err.value.exit_code == EXIT_TIMEOUT
    m = RunManifest.load(tmp_path / "run")
    assert m.status == "timeout"
    assert all(not _alive(p.pid) for p in m.processes if p.pid)


def test_follow_topology(follow_runs):
    root, a, _ = follow_runs
    assert a.status == "ok"
    roles = [p.role for p in a.processes]
    assert roles == ["world-server", "vehicle", "vehicle"]
    assert sorted(p.body_id for p in a.processes[1:]) == [1, 2]
    assert all(p.exit_status == 0 for p in a.processes)
    assert all(not _alive(p.pid) for p in a.processes)
    run = root / "a"
    for name in ("poses.csv", "frames_cam1.ppm", "follow_cam1.csv", "summary.csv", "scenario.cfg"):
        assert (run / name).exists(), name
        assert name in a.outputs
    on_disk = RunManifest.load(run)
    assert on_disk.run_id == a.run_id and on_disk.config_hash == Scenario.load(root / "follow.cfg").config_hash()
    assert on_disk.seeds["trial"] == 1


def test_repeat_runs_are_byte_identical(follow_runs):
    root, a, b = follow_runs
    assert a.run_id == b.run_id
    files = sorted(a.outputs)
    assert files == sorted(b.outputs)
    for name in files:
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_replay_matches_then_detects_tampering(follow_runs, tmp_path, capsys):
    root, _, _ = follow_runs
    res = replay(root / "b")
    assert res.equivalent, res.mismatches
    assert main(["replay", str(root / "b")]) == 0
    copy = tmp_path / "copy"
    shutil.copytree(root / "b", copy)
    log = copy / "follow_cam1.csv"
    lines = log.read_text().splitlines()
    lines[1] = lines[1].split(",")[0] + ",0,,"
    log.write_text("\n".join(lines) + "\n")
    res = replay(copy)
    assert not res.equivalent and any("follow_cam1.csv" in m for m in res.mismatches)
    assert main(["replay", str(copy)]) == 1
    assert "mismatch" in capsys.readouterr().err


def test_replay_rejects_corrupt_logs(follow_runs, tmp_path):
    root, _, _ = follow_runs
    copy = tmp_path / "copy"
    shutil.copytree(root / "b", copy)
    ppm = copy / "frames_cam1.ppm"
    ppm.write_bytes(ppm.read_bytes()[:-100])
    with pytest.raises(ReplayError):
        replay(copy)
    assert main(["replay", str(copy)]) == 2
    (copy / MANIFEST).unlink()
    with pytest.raises(ReplayError):
        replay(copy)
    with pytest.raises(ReplayError):
        replay(tmp_path / "nowhere")


@pytest.fixture
def bare_server():
    sc = Scenario.parse(FOLLOW)
    scene, world_cfg, specs = sc.build()
    wp = WorldProcess(scene, world_cfg, specs, 5, port=0, stall_timeout=3.0)
    failure = []

    def run():
        try:
            wp.serve()
        except RunError as exc:
            failure.append(exc)

    th = threading.Thread(target=run, daemon=True)
    th.start()
    yield wp
    th.join(10)
    assert failure  # nobody completed the handshake, so the server gives up


def _exchange(port, msg):
    conn = ClientConnection(connect("127.0.0.1", port, 5.0))
    try:
        conn.send(msg)
        return conn.recv()
    finally:
        conn.close()


def test_session_handshake_rules(bare_server):
    port = bare_server.port
    reply = _exchange(port, P.Pose(1, 0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0))
    assert isinstance(reply, P.Error) and reply.code == P.ErrorCode.HANDSHAKE_VIOLATION
    reply = _exchange(port, P.Hello(P.PROTOCOL_VERSION + 1, 1))
    assert isinstance(reply, P.Error) and reply.code == P.ErrorCode.VERSION_MISMATCH
    reply = _exchange(port, P.Hello(P.PROTOCOL_VERSION, 99))
    assert isinstance(reply, P.Error) and reply.code == P.ErrorCode.UNKNOWN_BODY
    reply = _exchange(port, P.Hello(P.PROTOCOL_VERSION, 1))
    assert reply == P.HelloAck(1)


def test_cli_usage_errors():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["launch"])
