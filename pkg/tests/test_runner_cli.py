import json

import pytest
from click.testing import CliRunner

from evolvekit.cli import main
from evolvekit.errors import ConfigError, WorkspaceLocked
from evolvekit.governance import verify_audit_chain
from evolvekit.runner import RunConfig, RunReport, run_loop
from evolvekit.workspace import Workspace


@pytest.fixture
def wsdir(tmp_path, sandbox):
    Workspace.init(tmp_path / "ws", sandbox)
    return tmp_path / "ws"


def cfg(wsdir, **kw):
    return RunConfig.from_dict({"workspace": str(wsdir), **kw})


def test_zero_episodes(wsdir, sandbox):
    rep = run_loop(cfg(wsdir, episode_count=0), sandbox)
    assert rep.episodes_run == 0 and rep.evolution_steps == 0 and rep.metrics is None


def test_twenty_episodes_two_steps(wsdir, sandbox):
    rep = run_loop(cfg(wsdir, episode_count=20), sandbox)
    assert rep.episodes_run == 20 and rep.evolution_steps == 2
    assert rep.committed == 1 and rep.proposals == 1 and rep.verification_failures == 0
    ws = Workspace.open(wsdir)
    assert len(ws.evidence) == 20 and verify_audit_chain(ws.audit)
    assert rep.audit_head == ws.audit.head_digest


def test_report_reconciles_with_audit(wsdir, sandbox):
    rep = run_loop(cfg(wsdir, episode_count=30), sandbox)
    kinds = [r.record_kind for r in Workspace.open(wsdir).audit]
    assert rep.proposals == kinds.count("proposal")
    assert rep.committed == kinds.count("commit") and rep.rejected == kinds.count("rejection")


def test_locked_workspace(wsdir, sandbox):
    with Workspace.open(wsdir).lock():
        with pytest.raises(WorkspaceLocked):
            run_loop(cfg(wsdir, episode_count=1), sandbox)
    assert len(Workspace.open(wsdir).evidence) == 0


@pytest.mark.parametrize("doc", [
    {"episode_count": -1}, {"batch_size": 0}, {"gate_mode": "maybe"}, {"bogus": 1},
    {"episode_count": "3"}, {"env": {"suite": "nope"}}, {"evolver": {"backend_id": "psychic"}},
    {"env": {"drift_schedule": [[1, {"kind": "nest", "field": "ghost", "arg": "x"}]]}},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"workspace": "w", **doc})


def test_render_table_fixture():
    rep = RunReport(30, 3, 21, 4, 17, 2, None, "s" * 64, "a" * 64)
    text = rep.render()
    header, rule, row = text.splitlines()[-3:]
    assert [c.strip() for c in header.split("|")] == ["Proposals", "Committed", "Verification Failures"]
    assert [c.strip() for c in row.split("|")] == ["21", "4", "2"]


# ---- CLI

def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_cli_end_to_end(tmp_path):
    ws = tmp_path / "ws"
    assert invoke("init", "-w", ws).exit_code == 0
    assert invoke("init", "-w", ws).exit_code == 2
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"workspace": str(ws), "episode_count": 20}))
    res = invoke("run", "--config", conf)
    assert res.exit_code == 0 and "Proposals" in res.output
    assert invoke("audit", "verify", "-w", ws).output.startswith("ok:")
    snaps = invoke("snapshot", "list", "-w", ws).output.splitlines()
    assert len(snaps) >= 2
    first = snaps[0].split()[0] if not snaps[0].startswith("*") else snaps[0].split()[1]
    assert invoke("rollback", "--to", first, "-w", ws).exit_code == 0
    assert invoke("rollback", "--to", "f" * 64, "-w", ws).exit_code == 1
    assert "TGC" in invoke("metrics", "report", "-w", ws).output
    assert invoke("evolve", "--dry-run", "-w", ws).exit_code == 0


def test_cli_tampered_audit_exits_3(tmp_path):
    ws = tmp_path / "ws"
    invoke("init", "-w", ws)
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"workspace": str(ws), "episode_count": 20}))
    invoke("run", "--config", conf)
    log = ws / "audit" / "audit.jsonl"
    data = bytearray(log.read_bytes())
    data[40] ^= 1
    log.write_bytes(bytes(data))
    assert invoke("audit", "verify", "-w", ws).exit_code == 3


def test_cli_bad_config_exits_2(tmp_path):
    conf = tmp_path / "run.json"
    conf.write_text("{not json")
    assert invoke("run", "--config", conf).exit_code == 2
    assert invoke("audit", "verify", "-w", tmp_path / "missing").exit_code == 2


def test_cli_lock_exits_4(tmp_path):
    ws = tmp_path / "ws"
    invoke("init", "-w", ws)
    (ws / ".lock").write_text("")
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"workspace": str(ws), "episode_count": 1}))
    assert invoke("run", "--config", conf).exit_code == 4


def test_cli_review_flow(tmp_path):
    ws = tmp_path / "ws"
    invoke("init", "-w", ws)
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"workspace": str(ws), "episode_count": 20, "gate_mode": "human", "interactive": True}))
    res = invoke("run", "--config", conf, "--json")
    assert json.loads(res.output)["paused"] is True
    tickets = invoke("review", "list", "-w", ws).output.split()
    ticket = tickets[0]
    assert invoke("review", "approve", ticket, "--note", "ok", "-w", ws).exit_code == 0
    assert invoke("review", "reject", ticket, "--note", "late", "-w", ws).exit_code == 1
    assert invoke("review", "approve", "rev_9999_zz", "--note", "x", "-w", ws).exit_code == 1
    kinds = [r.record_kind for r in Workspace.open(ws).audit]
    assert kinds[-2:] == ["review", "commit"]
