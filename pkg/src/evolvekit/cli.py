"""Operator command line."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .canonical import canonical_text
from .errors import (
    ChainMismatch,
    ConfigError,
    NotFound,
    SandboxUnavailable,
    StaleCandidate,
    StorageFailure,
    UnknownSnapshot,
    WorkspaceLocked,
    AlreadyResolved,
)
from .evolver import (
    BudgetUsage,
    diagnose,
    finalize_review,
    plan as make_plan,
    run_evolution_step,
    synthesize_update,
)
from .governance import rollback, verify, verify_audit_chain
from .harness import ScalingConfig, compute_metrics, run_scaling_experiment, scaling_summary, write_frontier_csv, write_summary
from .runner import RunConfig, run_loop
from .workspace import Workspace

EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_LOCKED = 4
CONFIG_FILE = "run_config.json"


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except WorkspaceLocked as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_LOCKED)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (SandboxUnavailable, StorageFailure, StaleCandidate, ChainMismatch) as exc:
            click.echo(f"gate failure: {exc}", err=True)
            sys.exit(EXIT_GATE)
        except (UnknownSnapshot, NotFound, AlreadyResolved) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


workspace_option = click.option("--workspace", "-w", type=click.Path(file_okay=False), default=".",
                                show_default=True, help="Workspace directory.")


@click.group()
def main():
    """Governed, auditable evolution of an agent's knowledge, tools and tests."""


@main.command()
@workspace_option
@_guard
def init(workspace):
    """Create a workspace seeded with the initial artifact state."""
    ws = Workspace.init(workspace)
    click.echo(f"initialized {workspace} at snapshot {ws.registry.current_snapshot_id()}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gate", type=click.Choice(["auto", "human"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workspace", "-w", type=click.Path(file_okay=False), default=None)
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON.")
@_guard
def run(config_path, gate, seed, workspace, as_json):
    """Run the solve/evolve loop described by a config file."""
    doc = _read_json(config_path)
    if gate is not None:
        doc["gate_mode"] = gate
    if seed is not None:
        doc["seed"] = seed
    if workspace is not None:
        doc["workspace"] = workspace
    config = RunConfig.from_dict(doc)
    report = run_loop(config)
    (Path(config.workspace) / CONFIG_FILE).write_text(canonical_text(config.to_dict()), encoding="utf-8")
    click.echo(canonical_text(report.to_dict()) if as_json else report.render())


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None


def _stored_config(ws_path, config_path=None) -> RunConfig:
    if config_path is not None:
        doc = _read_json(config_path)
    elif (Path(ws_path) / CONFIG_FILE).exists():
        doc = _read_json(Path(ws_path) / CONFIG_FILE)
    else:
        doc = {}
    doc["workspace"] = str(ws_path)
    return RunConfig.from_dict(doc)


@main.command()
@click.option("--window", "W", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--dry-run", is_flag=True, help="Print candidate and report; commit nothing.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@workspace_option
@_guard
def evolve(W, dry_run, config_path, workspace):
    """Run one evolution step over the most recent W episodes."""
    config = _stored_config(workspace, config_path)
    ws = Workspace.open(workspace)
    if len(ws.evidence) == 0:
        raise ConfigError("the evidence log is empty; run some episodes first")
    end = len(ws.evidence) - 1
    backend = config.backend()
    with ws.lock():
        if not dry_run:
            out = run_evolution_step(ws, end, config.evolve_budget, backend, config.gate_mode, W,
                                     interactive=True, episode=end)
            click.echo(canonical_text(out.summary()))
            if out.ticket is not None:
                click.echo(f"review ticket: {out.ticket.ticket_id} ({out.ticket.status})")
            return
        usage = BudgetUsage(config.evolve_budget)
        snap = ws.registry.take_snapshot(end)
        diag = diagnose(ws.evidence.evidence_window(end, W), snap, backend, usage, ws.registry, W)
        click.echo("diagnosis: " + canonical_text(diag.to_dict()))
        if diag.is_noop():
            click.echo("no actionable failures; nothing to propose")
            return
        p = make_plan(diag, snap, backend, usage, ws.registry)
        cand = synthesize_update(p, snap, backend, usage, ws.registry)
        report = verify(cand, snap, ws.sandbox, ws.registry, usage.charge_sandbox)
        click.echo("candidate: " + canonical_text(cand.to_dict()))
        click.echo("report: " + canonical_text(report.to_dict()))
        click.echo("dry run: nothing committed")


@main.group()
def review():
    """Human review queue."""


@review.command("list")
@click.option("--all", "show_all", is_flag=True, help="Include resolved tickets.")
@workspace_option
@_guard
def review_list(show_all, workspace):
    ws = Workspace.open(workspace)
    tickets = ws.reviews.tickets(None if show_all else "pending")
    if not tickets:
        click.echo("no tickets")
    for t in tickets:
        click.echo(f"{t.ticket_id}\t{t.status}\t{t.update_ref[:16]}\t{t.reviewer_note}")


def _resolve(workspace, ticket, verdict, note):
    ws = Workspace.open(workspace)
    with ws.lock():
        out = finalize_review(ws, ticket, verdict, note, len(ws.evidence))
    click.echo(canonical_text(out.summary()))


@review.command("approve")
@click.argument("ticket")
@click.option("--note", required=True)
@workspace_option
@_guard
def review_approve(ticket, note, workspace):
    _resolve(workspace, ticket, "approved", note)


@review.command("reject")
@click.argument("ticket")
@click.option("--note", required=True)
@workspace_option
@_guard
def review_reject(ticket, note, workspace):
    _resolve(workspace, ticket, "rejected", note)


@main.group()
def audit():
    """Inspect and verify the audit log."""


@audit.command("show")
@click.option("--from", "start", type=click.IntRange(min=0), default=0)
@workspace_option
@_guard
def audit_show(start, workspace):
    ws = Workspace.open(workspace)
    for rec in list(ws.audit)[start:]:
        click.echo(canonical_text(rec.to_dict()))


@audit.command("verify")
@workspace_option
@_guard
def audit_verify(workspace):
    path = Path(workspace) / "audit" / "audit.jsonl"
    if not (Path(workspace) / "workspace.json").exists():
        raise ConfigError(f"{workspace} is not an initialized workspace")
    ok = verify_audit_chain(path)
    if not ok:
        click.echo("BROKEN: audit chain does not verify")
        sys.exit(EXIT_GATE)
    ws = Workspace.open(workspace)
    click.echo(f"ok: {len(ws.audit)} records, head {ws.audit.head_digest}")


@main.group()
def snapshot():
    """Registry snapshots."""


@snapshot.command("list")
@workspace_option
@_guard
def snapshot_list(workspace):
    ws = Workspace.open(workspace)
    current = ws.registry.current_snapshot_id()
    for s in ws.registry.snapshots():
        mark = "*" if s.snapshot_id == current else " "
        click.echo(f"{mark} {s.snapshot_id}\tepisode {s.episode_index}\t{len(s.heads)} artifacts")


@main.command("rollback")
@click.option("--to", "target", required=True)
@workspace_option
@_guard
def rollback_cmd(target, workspace):
    """Move every registry head back to a recorded snapshot."""
    ws = Workspace.open(workspace)
    with ws.lock():
        snap = rollback(ws.registry, ws.audit, target, {"source": "cli"}, len(ws.evidence))
    click.echo(f"restored {snap.snapshot_id}")


@main.group()
def metrics():
    """Metrics over the recorded episodes."""


@metrics.command("report")
@workspace_option
@_guard
def metrics_report(workspace):
    ws = Workspace.open(workspace)
    scores = [t.score for t in ws.evidence.all()]
    if not scores:
        click.echo("no episodes recorded")
        return
    m = compute_metrics(scores)
    click.echo(f"episodes: {m.n}\nTGC: {m.TGC:.4f}\nAPT: {m.APT:.4f}")


@main.group()
def experiment():
    """Experiment drivers."""


@experiment.command("scaling")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="results", show_default=True)
@_guard
def experiment_scaling(config_path, out_dir):
    """Sweep repair budget x evolution steps; write frontier.csv and summary.json."""
    doc = _read_json(config_path)
    name = doc.pop("name", "scaling")
    episodes = doc.pop("summary_episodes", 30)
    try:
        config = ScalingConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    points = run_scaling_experiment(config)
    target = Path(out_dir) / name
    write_frontier_csv(points, target / "frontier.csv")
    write_summary(scaling_summary(config, points, episodes), target / "summary.json")
    click.echo((target / "frontier.csv").read_text(encoding="utf-8"), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
