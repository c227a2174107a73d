"""Training-session lifecycle: frozen per-session config, the session state
machine, snapshot bookkeeping, and the trainer-backend contract with a
deterministic simulated trainer.

The simulated trainer writes Caffe-style log lines whose content depends only
on (seed, iteration), so interrupted and uninterrupted runs are byte-comparable.
"""

from __future__ import annotations

import datetime
import json
import math
import random
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import net_graph, project_store, prototext
from .net_graph import NetModel
from .prototext import Document, Scalar

STATES = ("WAITING", "RUNNING", "PAUSED", "FINISHED", "FAILED")
ACTIONS = ("start", "pause", "resume", "abort", "delete")

# (state, action) pairs that are legal; everything else raises IllegalTransition.
ALLOWED_TRANSITIONS = frozenset(
    {("WAITING", "start"), ("RUNNING", "pause"), ("RUNNING", "abort"),
     ("PAUSED", "resume")}
    | {(s, "delete") for s in STATES if s != "RUNNING"}
)

SOLVER_FIELDS = ("max_iter", "display", "test_interval", "test_iter",
                 "snapshot", "base_lr")


class SessionError(Exception):
    pass


class IllegalTransition(SessionError):
    def __init__(self, state: str, action: str):
        self.state = state
        self.action = action
        super().__init__(f"cannot {action} a {state} session")


class DeleteWhileRunning(IllegalTransition):
    def __init__(self):
        super().__init__("RUNNING", "delete")


class NoSuchSession(SessionError):
    pass


class TopologyInvalid(SessionError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("net topology is not trainable: "
                         + "; ".join(d.message for d in diagnostics))


class UnboundInputs(SessionError):
    def __init__(self, layer_names):
        self.layer_names = list(layer_names)
        super().__init__(f"data layers without bound datasets: {self.layer_names}")


class SolverInvalid(SessionError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("solver does not validate: "
                         + "; ".join(d.message for d in diagnostics))


class MissingSolverField(SessionError):
    def __init__(self, name: str):
        self.field = name
        super().__init__(f"frozen solver lacks required field {name!r}")


class BackendLaunchFailed(SessionError):
    pass


@dataclass(frozen=True)
class SnapshotRef:
    iteration: int
    state_path: Path
    weights_path: Path


@dataclass
class Session:
    id: int
    dir: Path
    state: str = "WAITING"
    iteration: int = 0
    max_iter: int = 0
    created_at: float = 0.0
    ended_at: float | None = None
    failure_reason: str | None = None

    @property
    def frozen_net(self) -> Path:
        return self.dir / "net.prototxt"

    @property
    def frozen_solver(self) -> Path:
        return self.dir / "solver.prototxt"

    @property
    def log_path(self) -> Path:
        return self.dir / "train.log"

    @property
    def snapshots(self) -> list[SnapshotRef]:
        refs = []
        for weights in sorted(self.dir.glob("snapshot_iter_*.caffemodel")):
            m = re.match(r"snapshot_iter_(\d+)\.caffemodel$", weights.name)
            if m:
                k = int(m.group(1))
                refs.append(SnapshotRef(k, weights.with_suffix(".solverstate"), weights))
        refs.sort(key=lambda r: r.iteration)
        return refs


# ---------------------------------------------------------------------------
# Deterministic simulated trainer

_LOSS_FLOOR = 0.05
_LOSS_START = 2.303  # ten-class uniform-prediction cross entropy
_ACC_CEIL = 0.98


def sim_noise(seed: int, i: int) -> float:
    """Deterministic pseudo-random value in [-1, 1]."""
    return random.Random((seed * 1_000_003) ^ i).uniform(-1.0, 1.0)


def sim_loss(seed: int, i: int, max_iter: int) -> float:
    decay = math.exp(-5.0 * i / max_iter)
    return _LOSS_FLOOR + (_LOSS_START - _LOSS_FLOOR) * decay + 0.01 * sim_noise(seed, i)


def sim_accuracy(seed: int, i: int, max_iter: int) -> float:
    rise = 1.0 - math.exp(-5.0 * i / max_iter)
    return _ACC_CEIL * rise + 0.005 * sim_noise(seed, i + 10**6)


_LOG_EPOCH = datetime.datetime(2026, 1, 1, 0, 0, 0)


def _log_prefix(iteration: int) -> str:
    # wall clock is synthesized from the iteration index so logs are
    # reproducible and resume continues the exact timestamp sequence
    stamp = _LOG_EPOCH + datetime.timedelta(milliseconds=10 * iteration)
    return (f"I{stamp.strftime('%m%d %H:%M:%S')}.{stamp.microsecond:06d}"
            f"  1234 solver.cpp:218]")


def read_solver_settings(solver: Document) -> dict[str, float]:
    settings = {}
    for name in SOLVER_FIELDS:
        value = solver.root.scalar(name)
        if value is None:
            raise MissingSolverField(name)
        settings[name] = value
    return settings


class SimulatedTrainerHandle:
    """One simulated training run; mimics an external trainer process."""

    def __init__(self, seed: int, session_dir: Path, solver: Document,
                 resume_from: SnapshotRef | None, step_delay: float,
                 fail_at: int | None):
        self.seed = seed
        self.session_dir = Path(session_dir)
        self.settings = read_solver_settings(solver)
        self.step_delay = step_delay
        self.fail_at = fail_at
        self.iteration = 0
        self.completed = False
        self.exit_code: int | None = None
        self._stop = threading.Event()
        self._stop_at: int | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        if resume_from is not None:
            payload = resume_from.weights_path.read_text("utf-8")
            m = re.search(r"iteration=(\d+)", payload)
            self.iteration = int(m.group(1)) if m else resume_from.iteration

    def start(self) -> None:
        self._thread.start()

    def request_stop(self, at_iteration: int | None = None) -> None:
        self._stop_at = at_iteration
        self._stop.set()

    def wait(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    def poll(self):
        if self._thread.is_alive():
            return ("running", None)
        return ("exited", self.exit_code)

    # -- training loop -------------------------------------------------------

    def _log(self, fh, iteration: int, body: str) -> None:
        fh.write(f"{_log_prefix(iteration)} {body}\n")
        fh.flush()

    def _write_snapshot(self, iteration: int) -> SnapshotRef:
        payload = f"seed={self.seed} iteration={iteration}\n"
        weights = self.session_dir / f"snapshot_iter_{iteration}.caffemodel"
        state = self.session_dir / f"snapshot_iter_{iteration}.solverstate"
        project_store.atomic_write(weights, payload)
        project_store.atomic_write(state, payload)
        return SnapshotRef(iteration, state, weights)

    def _run(self) -> None:
        s = self.settings
        max_iter = int(s["max_iter"])
        display = int(s["display"])
        test_interval = int(s["test_interval"])
        snapshot = int(s["snapshot"])
        base_lr = s["base_lr"]
        i = self.iteration
        with open(self.session_dir / "train.log", "a", encoding="utf-8") as fh:
            while i < max_iter:
                if self._stop.is_set() and (self._stop_at is None or i >= self._stop_at):
                    # pause snapshot: files only, no log line, so the log
                    # stream stays byte-identical to an uninterrupted run
                    self._write_snapshot(i)
                    self.iteration = i
                    self.exit_code = 0
                    return
                i += 1
                self.iteration = i
                if self.fail_at is not None and i >= self.fail_at:
                    self._log(fh, i, f"Simulated trainer failure at iteration {i}")
                    self.exit_code = 1
                    return
                if test_interval > 0 and i % test_interval == 0:
                    self._log(fh, i, f"Iteration {i}, Testing net (#0)")
                    acc = sim_accuracy(self.seed, i, max_iter)
                    self._log(fh, i, f"    Test net output #0: accuracy = {acc:.6g}")
                if display > 0 and i % display == 0:
                    loss = sim_loss(self.seed, i, max_iter)
                    rate = 100.0
                    self._log(fh, i,
                              f"Iteration {i} ({rate:g} iter/s, "
                              f"{display / rate:g}s/{display} iters), "
                              f"loss = {loss:.6g}")
                    self._log(fh, i, f"Iteration {i}, lr = {base_lr:g}")
                if snapshot > 0 and i % snapshot == 0:
                    ref = self._write_snapshot(i)
                    # file name only: logs stay byte-comparable across runs
                    # living in different session directories
                    self._log(fh, i, "Snapshotting to binary proto file "
                                     f"{ref.weights_path.name}")
                if self.step_delay:
                    time.sleep(self.step_delay)
            self._log(fh, max_iter, "Optimization Done.")
        self.completed = True
        self.exit_code = 0


class SimulatedBackend:
    """Trainer backend that fakes a training process deterministically."""

    name = "simulated"

    def __init__(self, seed: int = 1, step_delay: float = 0.0,
                 fail_at: int | None = None):
        self.seed = seed
        self.step_delay = step_delay
        self.fail_at = fail_at

    def launch(self, session_dir, frozen_net, frozen_solver,
               resume_from: SnapshotRef | None = None) -> SimulatedTrainerHandle:
        solver = prototext.parse_text_format(Path(frozen_solver).read_text("utf-8"))
        handle = SimulatedTrainerHandle(self.seed, session_dir, solver,
                                        resume_from, self.step_delay, self.fail_at)
        handle.start()
        return handle

    def request_stop(self, handle: SimulatedTrainerHandle,
                     at_iteration: int | None = None) -> None:
        handle.request_stop(at_iteration)

    def poll(self, handle: SimulatedTrainerHandle):
        return handle.poll()


def simulated_backend(seed: int, step_delay: float = 0.0) -> SimulatedBackend:
    return SimulatedBackend(seed=seed, step_delay=step_delay)


# ---------------------------------------------------------------------------
# Session manager

class SessionManager:
    """Owns the sessions directory of one project (or one remote agent root).

    All state mutations go through one lock; backend monitor threads report
    exits back through the same lock. Observers get (id, old, new) callbacks.
    """

    def __init__(self, sessions_root):
        self.root = Path(sessions_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._handles: dict[int, SimulatedTrainerHandle] = {}
        self._pending: dict[int, str] = {}  # session id -> requested action
        self._observers: list = []

    def subscribe(self, callback) -> None:
        self._observers.append(callback)

    def _emit(self, session_id: int, old: str, new: str) -> None:
        for cb in list(self._observers):
            cb(session_id, old, new)

    # -- bookkeeping ----------------------------------------------------------

    def _session_dir(self, session_id: int) -> Path:
        return self.root / f"{session_id:06d}"

    def _save(self, session: Session) -> None:
        payload = {
            "id": session.id,
            "state": session.state,
            "iteration": session.iteration,
            "maxIter": session.max_iter,
            "createdAt": session.created_at,
            "endedAt": session.ended_at,
            "failureReason": session.failure_reason,
        }
        project_store.atomic_write(session.dir / "session.json",
                                   json.dumps(payload, indent=2) + "\n")

    def get(self, session_id: int) -> Session:
        path = self._session_dir(session_id) / "session.json"
        if not path.is_file():
            raise NoSuchSession(str(session_id))
        data = json.loads(path.read_text("utf-8"))
        session = Session(
            id=data["id"], dir=self._session_dir(session_id),
            state=data["state"], iteration=data["iteration"],
            max_iter=data["maxIter"], created_at=data["createdAt"],
            ended_at=data.get("endedAt"), failure_reason=data.get("failureReason"),
        )
        handle = self._handles.get(session_id)
        if handle is not None and session.state == "RUNNING":
            session.iteration = handle.iteration
        return session

    def list_sessions(self) -> list[Session]:
        ids = sorted(int(p.name) for p in self.root.iterdir()
                     if p.is_dir() and p.name.isdigit())
        return [self.get(i) for i in ids]

    def _transition(self, session: Session, new_state: str,
                    failure_reason: str | None = None) -> Session:
        old = session.state
        session.state = new_state
        if failure_reason is not None:
            session.failure_reason = failure_reason
        if new_state in ("FINISHED", "FAILED"):
            session.ended_at = time.time()
        self._save(session)
        self._emit(session.id, old, new_state)
        return session

    def _check(self, session: Session, action: str) -> None:
        if (session.state, action) not in ALLOWED_TRANSITIONS:
            if session.state == "RUNNING" and action == "delete":
                raise DeleteWhileRunning()
            raise IllegalTransition(session.state, action)

    # -- creation -------------------------------------------------------------

    def create_from_documents(self, session_id: int, net_doc: Document,
                              solver_doc: Document) -> Session:
        with self._lock:
            directory = self._session_dir(session_id)
            directory.mkdir(parents=True)
            settings = read_solver_settings(solver_doc)
            project_store.atomic_write(
                directory / "net.prototxt", prototext.serialize_text_format(net_doc))
            project_store.atomic_write(
                directory / "solver.prototxt",
                prototext.serialize_text_format(solver_doc))
            (directory / "train.log").touch()
            session = Session(id=session_id, dir=directory,
                              max_iter=int(settings["max_iter"]),
                              created_at=time.time())
            self._save(session)
            return session

    # -- lifecycle actions -----------------------------------------------------

    def start(self, session_id: int, backend) -> Session:
        with self._lock:
            session = self.get(session_id)
            self._check(session, "start")
            handle = self._launch(session, backend, resume_from=None)
            self._handles[session_id] = handle
            session = self._transition(session, "RUNNING")
            self._watch(session_id, handle)
            return session

    def resume(self, session_id: int, backend) -> tuple[Session, list[str]]:
        with self._lock:
            session = self.get(session_id)
            self._check(session, "resume")
            warnings = []
            snapshots = session.snapshots
            resume_from = snapshots[-1] if snapshots else None
            if resume_from is None:
                warnings.append("no snapshot available; restarting from iteration 0")
            handle = self._launch(session, backend, resume_from)
            self._handles[session_id] = handle
            session = self._transition(session, "RUNNING")
            self._watch(session_id, handle)
            return session, warnings

    def _launch(self, session: Session, backend, resume_from):
        try:
            return backend.launch(session.dir, session.frozen_net,
                                  session.frozen_solver, resume_from)
        except SessionError:
            raise
        except Exception as exc:
            raise BackendLaunchFailed(str(exc)) from exc

    def pause(self, session_id: int, backend=None,
              at_iteration: int | None = None) -> Session:
        with self._lock:
            session = self.get(session_id)
            self._check(session, "pause")
            handle = self._handles[session_id]
            self._pending[session_id] = "pause"
        handle.request_stop(at_iteration)
        handle.wait()
        self._settle(session_id)
        return self.get(session_id)

    def abort(self, session_id: int) -> Session:
        with self._lock:
            session = self.get(session_id)
            self._check(session, "abort")
            handle = self._handles[session_id]
            self._pending[session_id] = "abort"
        handle.request_stop()
        handle.wait()
        self._settle(session_id)
        return self.get(session_id)

    def delete(self, session_id: int) -> None:
        with self._lock:
            session = self.get(session_id)
            self._check(session, "delete")
            directory = session.dir
            self._handles.pop(session_id, None)
        import shutil
        shutil.rmtree(directory)

    # -- backend exit handling --------------------------------------------------

    def _watch(self, session_id: int, handle) -> None:
        def monitor():
            handle.wait()
            self._settle(session_id)
        threading.Thread(target=monitor, daemon=True).start()

    def _settle(self, session_id: int) -> None:
        with self._lock:
            session = self.get(session_id)
            if session.state != "RUNNING":
                return
            handle = self._handles.get(session_id)
            pending = self._pending.pop(session_id, None)
            session.iteration = handle.iteration
            if pending == "abort":
                self._transition(session, "FAILED", failure_reason="aborted")
            elif pending == "pause":
                self._transition(session, "PAUSED")
            elif handle.completed:
                session.iteration = session.max_iter
                self._transition(session, "FINISHED")
            elif handle.exit_code not in (0, None):
                self._transition(
                    session, "FAILED",
                    failure_reason=f"trainer exited with code {handle.exit_code}")
            else:
                # graceful stop without a recorded request (external pause)
                self._transition(session, "PAUSED")


# ---------------------------------------------------------------------------
# Project-level operations

def _frozen_net_document(project) -> Document:
    """Net document with bound dataset paths substituted into data layers."""
    net = project.net
    bound = {(b.layer_name, b.phase): b.dataset_id for b in project.bindings}
    layers = []
    for layer in net.layers:
        new_layer = layer
        for phase in ("TRAIN", "TEST"):
            dataset_id = bound.get((layer.name, phase))
            if dataset_id is not None and phase in layer.phases:
                dataset = project.dataset(dataset_id)
                params_doc = Document(layer.params)
                params_doc = prototext.set_path(params_doc, "data_param.source",
                                                Scalar.of(dataset.path))
                new_layer = replace(new_layer, params=params_doc.root)
        layers.append(new_layer)
    frozen = replace(net, layers=tuple(layers))
    return net_graph.net_to_document(frozen)


def create_session(project, manager: SessionManager) -> Session:
    """Freeze the project's net and solver into a new session."""
    diagnostics = net_graph.validate_topology(project.net, "TRAIN",
                                              project.layer_catalog)
    if diagnostics:
        raise TopologyInvalid(diagnostics)

    solver_msg = project_store._find_message(project.schema, "SolverParameter")
    solver_diags = prototext.validate_against(project.solver, project.schema,
                                              solver_msg)
    errors = [d for d in solver_diags if d.severity == "error"]
    if errors:
        raise SolverInvalid(errors)
    read_solver_settings(project.solver)  # raises MissingSolverField

    bound = {(b.layer_name, b.phase) for b in project.bindings}
    unbound = []
    for layer in project.net.layers:
        kind = project.layer_catalog.find(layer.type_name)
        if kind is not None and kind.category == "data" and "TRAIN" in layer.phases:
            if (layer.name, "TRAIN") not in bound:
                unbound.append(layer.name)
    if unbound:
        raise UnboundInputs(unbound)

    project.session_counter += 1
    session_id = project.session_counter
    session = manager.create_from_documents(
        session_id, _frozen_net_document(project), project.solver)
    project_store.save_project(project)
    return session


def restore_to_project(project, manager: SessionManager, session_id: int):
    """Copy a session's frozen net and solver back into the project."""
    session = manager.get(session_id)
    net_doc = prototext.parse_text_format(session.frozen_net.read_text("utf-8"))
    solver = prototext.parse_text_format(session.frozen_solver.read_text("utf-8"))
    project.net = net_graph.net_from_document(net_doc)
    project.solver = solver
    project_store.save_project(project)
    return project
