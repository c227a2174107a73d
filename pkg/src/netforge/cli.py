"""Command line interface.

Exit codes: 0 on success, 1 on usage errors, 2 on operation failures.
Operation failures print an UPPER_SNAKE error code and message to stderr.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import metrics, net_graph, project_store, session_engine
from .api_service import error_code
from .session_engine import SessionManager, SimulatedBackend


def _open(project_dir: str) -> project_store.Project:
    return project_store.open_project(project_dir)


def _manager(project: project_store.Project) -> SessionManager:
    return SessionManager(project.sessions_dir)


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2))


@click.group()
def cli() -> None:
    """Design, train, and monitor Caffe-style networks."""


@cli.command("new")
@click.argument("directory")
@click.option("--name", required=True)
@click.option("--schema", "schema_file", required=True,
              type=click.Path(exists=True, dir_okay=False))
def cmd_new(directory: str, name: str, schema_file: str) -> None:
    """Create a project directory around a caffe.proto schema."""
    project = project_store.create_project(directory, name, schema_file)
    click.echo(f"created project {project.name!r} in {project.project_dir}")


@cli.command("import-net")
@click.argument("directory")
@click.argument("prototxt", type=click.Path(exists=True, dir_okay=False))
def cmd_import_net(directory: str, prototxt: str) -> None:
    project = _open(directory)
    project = project_store.import_net(project, prototxt)
    project_store.save_project(project)
    click.echo(f"imported net with {len(project.net.layers)} layers")


@cli.command("import-solver")
@click.argument("directory")
@click.argument("prototxt", type=click.Path(exists=True, dir_okay=False))
def cmd_import_solver(directory: str, prototxt: str) -> None:
    project = _open(directory)
    project, diagnostics = project_store.import_solver(project, prototxt)
    project_store.save_project(project)
    for d in diagnostics:
        click.echo(f"{d.severity}: {d.message}", err=True)
    click.echo("imported solver")


@cli.command("validate")
@click.argument("directory")
@click.option("--phase", default="TRAIN", type=click.Choice(["TRAIN", "TEST"]))
@click.option("--json", "as_json", is_flag=True)
def cmd_validate(directory: str, phase: str, as_json: bool) -> None:
    """Check the net topology; exits 2 if any diagnostic is found."""
    project = _open(directory)
    diagnostics = net_graph.validate_topology(project.net, phase,
                                              project.layer_catalog)
    if as_json:
        _echo_json([{"kind": d.kind, "subjects": list(d.subjects),
                     "message": d.message} for d in diagnostics])
    else:
        for d in diagnostics:
            click.echo(f"{d.kind}: {d.message}")
        if not diagnostics:
            click.echo("topology ok")
    if diagnostics:
        raise OperationExit(2)


@cli.group("datasets")
def datasets() -> None:
    """Manage dataset references."""


@datasets.command("add")
@click.argument("directory")
@click.option("--format", "fmt", required=True)
@click.option("--path", "data_path", required=True)
@click.option("--host", "host_id", default="local")
def cmd_datasets_add(directory: str, fmt: str, data_path: str, host_id: str) -> None:
    project = _open(directory)
    ref = project_store.register_dataset(project, fmt, data_path, host_id)
    project_store.save_project(project)
    click.echo(ref.id)


@datasets.command("probe")
@click.argument("directory")
@click.argument("dataset_id")
@click.option("--json", "as_json", is_flag=True)
def cmd_datasets_probe(directory: str, dataset_id: str, as_json: bool) -> None:
    project = _open(directory)
    stats = project_store.probe_dataset(project, dataset_id)
    project_store.save_project(project)
    if as_json:
        _echo_json({"itemCount": stats.item_count, "dims": list(stats.dims)})
    else:
        dims = "x".join(str(d) for d in stats.dims)
        click.echo(f"{stats.item_count} items, dims {dims}")


@datasets.command("bind")
@click.argument("directory")
@click.argument("dataset_id")
@click.argument("layer_name")
@click.argument("phase", type=click.Choice(["TRAIN", "TEST"]))
def cmd_datasets_bind(directory: str, dataset_id: str, layer_name: str,
                      phase: str) -> None:
    project = _open(directory)
    project_store.bind_input(project, dataset_id, layer_name, phase)
    project_store.save_project(project)
    click.echo(f"bound {dataset_id} to {layer_name} [{phase}]")


@datasets.command("list")
@click.argument("directory")
@click.option("--json", "as_json", is_flag=True)
def cmd_datasets_list(directory: str, as_json: bool) -> None:
    project = _open(directory)
    rows = [{"id": d.id, "format": d.format, "path": d.path, "hostId": d.host_id}
            for d in project.datasets]
    if as_json:
        _echo_json(rows)
    else:
        for row in rows:
            click.echo(f"{row['id']}  {row['format']}  {row['path']}")


@cli.group("session")
def session() -> None:
    """Manage training sessions."""


@session.command("create")
@click.argument("directory")
def cmd_session_create(directory: str) -> None:
    project = _open(directory)
    manager = _manager(project)
    created = session_engine.create_session(project, manager)
    click.echo(str(created.id))


@session.command("start")
@click.argument("directory")
@click.argument("session_id", type=int)
@click.option("--seed", default=1, type=int)
@click.option("--step-delay", default=0.0, type=float)
@click.option("--resume", "is_resume", is_flag=True,
              help="Resume a paused session from its latest snapshot.")
def cmd_session_start(directory: str, session_id: int, seed: int,
                      step_delay: float, is_resume: bool) -> None:
    """Run a session synchronously until it leaves RUNNING."""
    project = _open(directory)
    manager = _manager(project)
    backend = SimulatedBackend(seed=seed, step_delay=step_delay)
    if is_resume:
        _, warnings = manager.resume(session_id, backend)
        for w in warnings:
            click.echo(f"warning: {w}", err=True)
    else:
        manager.start(session_id, backend)
    while manager.get(session_id).state == "RUNNING":
        time.sleep(0.05)
    final = manager.get(session_id)
    click.echo(f"session {session_id} {final.state} at iteration {final.iteration}")
    if final.state == "FAILED":
        raise OperationExit(2)


@session.command("resume")
@click.argument("directory")
@click.argument("session_id", type=int)
@click.option("--seed", default=1, type=int)
@click.option("--step-delay", default=0.0, type=float)
@click.pass_context
def cmd_session_resume(ctx, directory: str, session_id: int, seed: int,
                       step_delay: float) -> None:
    """Shorthand for `session start --resume`."""
    ctx.invoke(cmd_session_start, directory=directory, session_id=session_id,
               seed=seed, step_delay=step_delay, is_resume=True)


@session.command("pause")
@click.argument("directory")
@click.argument("session_id", type=int)
def cmd_session_pause(directory: str, session_id: int) -> None:
    project = _open(directory)
    _manager(project).pause(session_id)
    click.echo(f"session {session_id} PAUSED")


@session.command("delete")
@click.argument("directory")
@click.argument("session_id", type=int)
def cmd_session_delete(directory: str, session_id: int) -> None:
    project = _open(directory)
    _manager(project).delete(session_id)
    click.echo(f"session {session_id} deleted")


@session.command("list")
@click.argument("directory")
@click.option("--json", "as_json", is_flag=True)
def cmd_session_list(directory: str, as_json: bool) -> None:
    project = _open(directory)
    sessions = _manager(project).list_sessions()
    rows = [{"id": s.id, "state": s.state, "iteration": s.iteration,
             "maxIter": s.max_iter} for s in sessions]
    if as_json:
        _echo_json(rows)
    else:
        for row in rows:
            click.echo(f"{row['id']:>6}  {row['state']:<9} "
                       f"{row['iteration']}/{row['maxIter']}")


def _collect_bundles(project, manager, session_ids: list[int]):
    bundles = []
    for sid in session_ids:
        sess = manager.get(sid)
        text = sess.log_path.read_text("utf-8") if sess.log_path.exists() else ""
        bundles.append(metrics.bundle_from_events(f"session{sid}",
                                                  metrics.parse_log_text(text)))
    return bundles


@cli.command("export-csv")
@click.argument("directory")
@click.option("--sessions", "session_spec", required=True,
              help="Comma-separated session ids.")
@click.option("--keys", required=True, help="Comma-separated series keys.")
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False))
def cmd_export_csv(directory: str, session_spec: str, keys: str,
                   out_path: str | None) -> None:
    project = _open(directory)
    manager = _manager(project)
    ids = [int(s) for s in session_spec.split(",") if s]
    key_list = [k for k in keys.split(",") if k]
    bundles = _collect_bundles(project, manager, ids)
    text, warnings = metrics.export_csv(bundles, key_list)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    if out_path:
        Path(out_path).write_text(text, "utf-8")
        click.echo(f"wrote {out_path}")
    else:
        click.echo(text, nl=False)


@cli.command("report")
@click.argument("directory")
@click.option("--sessions", "session_spec", required=True,
              help="Comma-separated session ids.")
@click.option("--keys", default="train/loss",
              help="Comma-separated series keys.")
@click.option("--out", "-o", "out_dir", required=True,
              type=click.Path(file_okay=False))
def cmd_report(directory: str, session_spec: str, keys: str, out_dir: str) -> None:
    """Write a metrics CSV plus one PNG figure per series key."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    project = _open(directory)
    manager = _manager(project)
    ids = [int(s) for s in session_spec.split(",") if s]
    key_list = [k for k in keys.split(",") if k]
    bundles = _collect_bundles(project, manager, ids)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, warnings = metrics.export_csv(bundles, key_list)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    csv_path = out / "metrics.csv"
    csv_path.write_text(text, "utf-8")
    click.echo(f"wrote {csv_path}")

    for key in key_list:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for bundle in bundles:
            points = bundle.series.get(key, [])
            if points:
                xs, ys = zip(*points)
                ax.plot(xs, ys, label=bundle.label)
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
        ax.set_title(key)
        ax.legend(loc="best")
        fig.tight_layout()
        png_path = out / (key.replace("/", "_") + ".png")
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
        click.echo(f"wrote {png_path}")


@cli.command("serve")
@click.argument("directory")
@click.option("--bind", default="127.0.0.1:8000",
              help="host:port to listen on (plain HTTP, trusted network only).")
@click.option("--static", "static_dir", default=None,
              type=click.Path(file_okay=False, exists=True))
def cmd_serve(directory: str, bind: str, static_dir: str | None) -> None:
    """Run the HTTP workbench service for one project."""
    from .api_service import serve
    serve(directory, bind, static_dir)


@cli.command("agent")
@click.option("--root", "root_dir", required=True,
              type=click.Path(file_okay=False, exists=True))
@click.option("--bind", default="127.0.0.1:7700",
              help="host:port to listen on (plain TCP, trusted network only).")
@click.option("--seed", default=1, type=int)
@click.option("--step-delay", default=0.001, type=float)
def cmd_agent(root_dir: str, bind: str, seed: int, step_delay: float) -> None:
    """Run a remote trainer agent over a session root directory."""
    from .remote_agent import agent_serve
    from .session_engine import simulated_backend
    host, _, port = bind.rpartition(":")
    agent = agent_serve(
        root_dir, int(port), host or "127.0.0.1",
        backend_factory=lambda s: simulated_backend(s or seed, step_delay))
    click.echo(f"agent listening on {host or '127.0.0.1'}:{agent.port}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        agent.stop()


class OperationExit(Exception):
    """Raised by commands that complete but must report failure (exit 2)."""

    def __init__(self, code: int):
        self.code = code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except OperationExit as exc:
        return exc.code
    except Exception as exc:  # domain errors from the library modules
        click.echo(f"{error_code(exc)}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
