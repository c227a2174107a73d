"""HTTP operator surface: REST endpoints over one opened project plus a
server-pushed event stream (SSE-style, id-resumable) for the UI.

One service instance owns one project; mutations are serialized through a
single lock, matching the one-writer project model.
"""

from __future__ import annotations

import json
import queue
import re
import threading
import time
from collections import deque
from dataclasses import replace
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse

from . import (metrics, net_graph, project_store, proto_schema, prototext,
               remote_agent, session_engine)
from .net_graph import NetModel
from .session_engine import SessionManager, SimulatedBackend

# ---------------------------------------------------------------------------
# Error mapping: every module error class maps to exactly one (status, code).

ERROR_TABLE: dict[type, int] = {
    # 422: semantically invalid operations
    session_engine.TopologyInvalid: 422,
    session_engine.UnboundInputs: 422,
    session_engine.SolverInvalid: 422,
    session_engine.MissingSolverField: 422,
    project_store.NotADataLayer: 422,
    # 404: missing things
    net_graph.NoSuchLayer: 404,
    session_engine.NoSuchSession: 404,
    project_store.UnknownDataset: 404,
    project_store.NotAProject: 404,
    prototext.PathNotFound: 404,
    proto_schema.UnknownMessage: 404,
    proto_schema.UnknownField: 404,
    metrics.UnknownKey: 404,
    # 409: conflicts
    net_graph.DuplicateLayerName: 409,
    project_store.DuplicateBinding: 409,
    session_engine.IllegalTransition: 409,
    session_engine.DeleteWhileRunning: 409,
    project_store.DirNotEmpty: 409,
    project_store.ProjectLocked: 409,
    # 400: parse/syntax and malformed requests
    proto_schema.SchemaSyntaxError: 400,
    proto_schema.DuplicateName: 400,
    proto_schema.UnresolvedTypeReference: 400,
    proto_schema.UnsupportedFeature: 400,
    proto_schema.MissingLayerParameterMessage: 400,
    prototext.TextSyntaxError: 400,
    prototext.UnterminatedString: 400,
    prototext.UnbalancedBraces: 400,
    prototext.UnknownRootMessage: 400,
    prototext.PathError: 400,
    prototext.PathShapeMismatch: 400,
    net_graph.NotANetDocument: 400,
    net_graph.LegacyFormatUnsupported: 400,
    net_graph.UnknownLayerType: 400,
    net_graph.IndexOutOfRange: 400,
    project_store.ParseFailed: 400,
    project_store.ManifestMalformed: 400,
    project_store.ProbeUnsupported: 400,
    project_store.SchemaParseFailed: 400,
    project_store.VersionMismatch: 400,
    project_store.CorruptManifest: 400,
    metrics.MetricsError: 400,
    remote_agent.ProtocolError: 400,
    remote_agent.RemoteError: 400,
    remote_agent.FrameTooLarge: 400,
    # module base classes: defaults for any subclass not listed above
    proto_schema.SchemaError: 400,
    prototext.PrototextError: 400,
    net_graph.NetGraphError: 400,
    project_store.ProjectError: 400,
    session_engine.SessionError: 409,
    # 500: infrastructure
    session_engine.BackendLaunchFailed: 500,
    remote_agent.ConnectionLost: 500,
    remote_agent.PortInUse: 500,
    remote_agent.RootDirMissing: 500,
    OSError: 500,
}


def error_status(exc: Exception) -> int:
    for klass in type(exc).__mro__:
        if klass in ERROR_TABLE:
            return ERROR_TABLE[klass]
    return 500


def error_code(exc: Exception) -> str:
    """Canonical UPPER_SNAKE code from the error class name."""
    name = type(exc).__name__
    name = re.sub(r"(.)([A-Z][a-z]+)", r"\1_\2", name)
    return re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", name).upper()


def error_payload(exc: Exception) -> dict:
    payload = {"code": type(exc).__name__, "detail": str(exc)}
    diagnostics = getattr(exc, "diagnostics", None)
    if diagnostics:
        payload["diagnostics"] = [
            {"severity": getattr(d, "severity", "error"),
             "path": getattr(d, "path", None),
             "kind": getattr(d, "kind", None),
             "subjects": list(getattr(d, "subjects", ()) or ()),
             "message": d.message}
            for d in diagnostics
        ]
    return payload


# ---------------------------------------------------------------------------
# Event bus

class EventBus:
    """Fan-out with a replay ring buffer; slow clients get disconnected."""

    def __init__(self, buffer_size: int = 10000, client_queue_size: int = 2000):
        self._lock = threading.Lock()
        self._buffer: deque = deque(maxlen=buffer_size)
        self._next_id = 1
        self._clients: list[queue.Queue] = []
        self._client_queue_size = client_queue_size

    def publish(self, name: str, payload: dict) -> int:
        with self._lock:
            event_id = self._next_id
            self._next_id += 1
            record = (event_id, name, payload)
            self._buffer.append(record)
            clients = list(self._clients)
        for q in clients:
            try:
                q.put_nowait(record)
            except queue.Full:
                self.unsubscribe(q)
                try:
                    q.put_nowait(None)  # disconnect marker
                except queue.Full:
                    pass
        return event_id

    def subscribe(self, last_event_id: int = 0) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=self._client_queue_size)
        with self._lock:
            for record in self._buffer:
                if record[0] > last_event_id:
                    q.put(record)
            self._clients.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._clients:
                self._clients.remove(q)


# ---------------------------------------------------------------------------
# Service

class WorkbenchService:
    """Opens one project and exposes it over HTTP."""

    def __init__(self, project_dir, backend: SimulatedBackend | None = None,
                 acquire_lock: bool = True, static_dir=None):
        self.project = project_store.open_project(project_dir)
        self.lock = project_store.ProjectLock(project_dir) if acquire_lock else None
        if self.lock is not None:
            self.lock.acquire()
        self.manager = SessionManager(self.project.sessions_dir)
        self.backend = backend or SimulatedBackend(seed=1, step_delay=0.0005)
        self.events = EventBus()
        self.mutex = threading.RLock()
        self.hosts: dict[str, remote_agent.RemoteHost] = {}
        self._ingest_offsets: dict[int, int] = {}
        self._last_diagnostics: list | None = None
        self._static_dir = Path(static_dir) if static_dir else None
        self.manager.subscribe(self._on_state_change)
        self.app = self._build_app()

    def close(self) -> None:
        if self.lock is not None:
            self.lock.release()

    # -- events ----------------------------------------------------------------

    def _on_state_change(self, session_id: int, old: str, new: str) -> None:
        self.events.publish("SessionStateChanged",
                            {"sessionId": session_id, "from": old, "to": new})
        if new == "RUNNING":
            self._start_ingest(session_id)

    def _start_ingest(self, session_id: int) -> None:
        session = self.manager.get(session_id)
        offset = self._ingest_offsets.get(session_id, 0)

        def terminal() -> bool:
            return self.manager.get(session_id).state != "RUNNING"

        follower = metrics.LogFollower(session.log_path, poll_interval=0.05,
                                       until=terminal, start_offset=offset)

        def run() -> None:
            for event in follower:
                key = metrics.series_key(event)
                if key is not None:
                    self.events.publish("MetricAppended", {
                        "sessionId": session_id, "key": key,
                        "iteration": event.iteration, "value": event.value,
                    })
            self._ingest_offsets[session_id] = follower.offset

        threading.Thread(target=run, daemon=True).start()

    def _after_mutation(self) -> None:
        project_store.save_project(self.project)
        self.events.publish("ProjectSaved", {})
        diagnostics = net_graph.validate_topology(
            self.project.net, "TRAIN", self.project.layer_catalog)
        payload = [{"kind": d.kind, "subjects": list(d.subjects),
                    "message": d.message} for d in diagnostics]
        if payload != self._last_diagnostics:
            self._last_diagnostics = payload
            self.events.publish("ValidationChanged", {"diagnostics": payload})

    # -- serialization helpers ---------------------------------------------------

    def _net_json(self) -> dict:
        net = self.project.net
        return {
            "name": net.net_name,
            "layers": [
                {
                    "name": l.name,
                    "typeName": l.type_name,
                    "bottoms": list(l.bottoms),
                    "tops": list(l.tops),
                    "phases": sorted(l.phases),
                    "position": [l.position[0], l.position[1]],
                    "paramsText": prototext.serialize_text_format(
                        prototext.Document(l.params)),
                }
                for l in net.layers
            ],
            "edges": [
                {
                    "producer": {"layer": e.producer[0], "topIndex": e.producer[1]},
                    "consumer": {"layer": e.consumer[0], "bottomIndex": e.consumer[1]},
                    "blobName": e.blob_name,
                    "isInPlace": e.is_in_place,
                }
                for e in net_graph.blob_edges(net)
            ],
            "uiState": {
                "hiddenEdgeBlobs": sorted(self.project.ui_state.hidden_edge_blobs),
                "zoom": self.project.ui_state.zoom,
                "pan": list(self.project.ui_state.pan),
            },
        }

    def _session_json(self, session) -> dict:
        return {
            "id": session.id,
            "state": session.state,
            "iteration": session.iteration,
            "maxIter": session.max_iter,
            "createdAt": session.created_at,
            "endedAt": session.ended_at,
            "failureReason": session.failure_reason,
            "snapshots": [s.iteration for s in session.snapshots],
        }

    def session_bundle(self, session_id: int, label: str | None = None) -> metrics.MetricBundle:
        session = self.manager.get(session_id)
        text = session.log_path.read_text("utf-8") if session.log_path.exists() else ""
        return metrics.bundle_from_events(label or f"session{session_id}",
                                          metrics.parse_log_text(text))

    # -- app ----------------------------------------------------------------------

    def _build_app(self) -> FastAPI:
        app = FastAPI(title="netforge workbench", docs_url=None, redoc_url=None)
        service = self

        @app.exception_handler(Exception)
        async def handle_error(request: Request, exc: Exception):
            if isinstance(exc, KeyError):
                return JSONResponse(status_code=400,
                                    content={"code": "BadRequest", "detail": str(exc)})
            return JSONResponse(status_code=error_status(exc),
                                content=error_payload(exc))

        # ---- net ----------------------------------------------------------

        @app.get("/api/net")
        def get_net():
            return service._net_json()

        @app.put("/api/net")
        async def put_net(request: Request):
            body = await request.json()
            with service.mutex:
                if "text" in body:
                    doc = prototext.parse_text_format(body["text"])
                    service.project.net = net_graph.net_from_document(doc)
                if "positions" in body:
                    layers = []
                    for layer in service.project.net.layers:
                        pos = body["positions"].get(layer.name)
                        if pos is not None:
                            layer = replace(layer,
                                            position=(float(pos[0]), float(pos[1])))
                        layers.append(layer)
                    service.project.net = replace(service.project.net,
                                                  layers=tuple(layers))
                if "hiddenEdgeBlobs" in body:
                    service.project.ui_state = replace(
                        service.project.ui_state,
                        hidden_edge_blobs=frozenset(body["hiddenEdgeBlobs"]))
                service._after_mutation()
            return service._net_json()

        @app.post("/api/net/layers", status_code=201)
        async def add_layer(request: Request):
            body = await request.json()
            position = body.get("position")
            with service.mutex:
                service.project.net = net_graph.add_layer(
                    service.project.net, body["typeName"], body.get("name"),
                    tuple(position) if position else None,
                    catalog=service.project.layer_catalog)
                service._after_mutation()
            return service._net_json()

        @app.delete("/api/net/layers/{name}")
        def delete_layer(name: str):
            with service.mutex:
                service.project.net = net_graph.remove_layer(service.project.net, name)
                service._after_mutation()
            return service._net_json()

        @app.post("/api/net/connect")
        async def connect(request: Request):
            body = await request.json()
            with service.mutex:
                if body.get("disconnect"):
                    service.project.net = net_graph.disconnect(
                        service.project.net, body["consumerLayer"],
                        int(body["bottomIndex"]))
                else:
                    service.project.net = net_graph.connect(
                        service.project.net, body["producerLayer"],
                        int(body.get("topIndex", 0)), body["consumerLayer"],
                        int(body.get("bottomIndex", 0)))
                service._after_mutation()
            return service._net_json()

        @app.post("/api/net/freeze")
        async def freeze(request: Request):
            body = await request.json()
            if "firstK" in body:
                selector = int(body["firstK"])
            elif "prefix" in body:
                selector = str(body["prefix"])
            else:
                selector = list(body["names"])
            with service.mutex:
                net, warnings = net_graph.freeze_layers(service.project.net, selector)
                service.project.net = net
                service._after_mutation()
            return {"warnings": warnings, "net": service._net_json()}

        @app.get("/api/net/validate")
        def validate(phase: str = "TRAIN"):
            diagnostics = net_graph.validate_topology(
                service.project.net, phase, service.project.layer_catalog)
            return {"diagnostics": [
                {"kind": d.kind, "subjects": list(d.subjects), "message": d.message}
                for d in diagnostics]}

        # ---- solver --------------------------------------------------------

        @app.get("/api/solver")
        def get_solver():
            return {"text": prototext.serialize_text_format(service.project.solver)}

        @app.put("/api/solver")
        async def put_solver(request: Request):
            body = await request.json()
            doc = prototext.parse_text_format(body["text"])
            solver_msg = project_store._find_message(service.project.schema,
                                                     "SolverParameter")
            diagnostics = prototext.validate_against(doc, service.project.schema,
                                                     solver_msg)
            errors = [d for d in diagnostics if d.severity == "error"]
            if errors:
                raise session_engine.SolverInvalid(errors)
            with service.mutex:
                service.project.solver = doc
                service._after_mutation()
            return {"text": prototext.serialize_text_format(doc),
                    "warnings": [d.message for d in diagnostics]}

        # ---- catalog --------------------------------------------------------

        @app.get("/api/catalog/layers")
        def catalog_layers():
            return [
                {"typeName": k.type_name, "parameterMessage": k.parameter_message,
                 "category": k.category, "commonFields": list(k.common_fields)}
                for k in service.project.layer_catalog.layers
            ]

        @app.get("/api/catalog/choices")
        def catalog_choices(message: str, field: str):
            return {"choices": proto_schema.enumerate_field_choices(
                service.project.schema, message, field)}

        # ---- datasets and bindings -------------------------------------------

        @app.get("/api/datasets")
        def get_datasets():
            return [
                {"id": d.id, "format": d.format, "path": d.path,
                 "hostId": d.host_id,
                 "stats": None if d.stats is None else
                 {"itemCount": d.stats.item_count, "dims": list(d.stats.dims)}}
                for d in service.project.datasets
            ]

        @app.post("/api/datasets", status_code=201)
        async def add_dataset(request: Request):
            body = await request.json()
            with service.mutex:
                ref = project_store.register_dataset(
                    service.project, body["format"], body["path"],
                    body.get("hostId", "local"))
                service.events.publish("ProjectSaved", {})
            return {"id": ref.id, "format": ref.format, "path": ref.path,
                    "hostId": ref.host_id}

        @app.post("/api/datasets/{dataset_id}/probe")
        def probe(dataset_id: str):
            with service.mutex:
                ref = service.project.dataset(dataset_id)
                if ref.host_id != "local":
                    host = service.hosts.get(ref.host_id)
                    if host is None:
                        raise project_store.UnknownDataset(
                            f"host {ref.host_id!r} is not registered")
                    with remote_agent.client_connect(host.address) as client:
                        stats = client.probe_dataset(ref.id)
                    return {"itemCount": stats["itemCount"], "dims": stats["dims"]}
                stats = project_store.probe_dataset(service.project, dataset_id)
                service.events.publish("ProjectSaved", {})
            return {"itemCount": stats.item_count, "dims": list(stats.dims)}

        @app.post("/api/bindings", status_code=201)
        async def bind(request: Request):
            body = await request.json()
            with service.mutex:
                project_store.bind_input(service.project, body["datasetId"],
                                         body["layerName"], body["phase"])
                service.events.publish("ProjectSaved", {})
            return {"datasetId": body["datasetId"], "layerName": body["layerName"],
                    "phase": body["phase"]}

        # ---- sessions ---------------------------------------------------------

        @app.get("/api/sessions")
        def list_sessions():
            return [service._session_json(s) for s in self.manager.list_sessions()]

        @app.post("/api/sessions", status_code=201)
        def create_session():
            with service.mutex:
                session = session_engine.create_session(service.project,
                                                        service.manager)
            return service._session_json(session)

        @app.get("/api/sessions/{session_id}")
        def get_session(session_id: int):
            return service._session_json(service.manager.get(session_id))

        @app.post("/api/sessions/{session_id}/start")
        def start_session(session_id: int):
            session = service.manager.start(session_id, service.backend)
            return service._session_json(session)

        @app.post("/api/sessions/{session_id}/pause")
        def pause_session(session_id: int):
            session = service.manager.pause(session_id)
            return service._session_json(session)

        @app.post("/api/sessions/{session_id}/resume")
        def resume_session(session_id: int):
            session, warnings = service.manager.resume(session_id, service.backend)
            payload = service._session_json(session)
            payload["warnings"] = warnings
            return payload

        @app.post("/api/sessions/{session_id}/abort")
        def abort_session(session_id: int):
            return service._session_json(service.manager.abort(session_id))

        @app.delete("/api/sessions/{session_id}")
        def delete_session(session_id: int):
            service.manager.delete(session_id)
            return {"deleted": session_id}

        @app.post("/api/sessions/{session_id}/restore")
        def restore_session(session_id: int):
            with service.mutex:
                session_engine.restore_to_project(service.project, service.manager,
                                                  session_id)
                service._after_mutation()
            return service._net_json()

        @app.get("/api/sessions/{session_id}/metrics")
        def session_metrics(session_id: int, keys: str = ""):
            bundle = service.session_bundle(session_id)
            wanted = [k for k in keys.split(",") if k] or bundle.keys()
            return {"series": {k: [[i, v] for i, v in bundle.series.get(k, [])]
                               for k in wanted}}

        @app.get("/api/export/csv")
        def export_csv(sessions: str, keys: str):
            key_list = [k for k in keys.split(",") if k]
            bundles = [service.session_bundle(int(s))
                       for s in sessions.split(",") if s]
            text, warnings = metrics.export_csv(bundles, key_list)
            headers = {"X-Warnings": "; ".join(warnings)} if warnings else {}
            return PlainTextResponse(text, media_type="text/csv", headers=headers)

        # ---- hosts --------------------------------------------------------------

        @app.get("/api/hosts")
        def get_hosts():
            return [
                {"hostId": h.host_id, "address": h.address,
                 "protocolVersion": h.protocol_version, "lastSeen": h.last_seen,
                 "datasets": h.datasets}
                for h in service.hosts.values()
            ]

        @app.post("/api/hosts", status_code=201)
        async def add_host(request: Request):
            body = await request.json()
            with remote_agent.client_connect(body["address"]) as client:
                client.list_datasets()
                host = client.host
            service.hosts[host.host_id] = host
            return {"hostId": host.host_id, "address": host.address,
                    "protocolVersion": host.protocol_version,
                    "datasets": host.datasets}

        # ---- events ----------------------------------------------------------------

        @app.get("/api/events")
        def events(request: Request, last_event_id: int = 0):
            header_id = request.headers.get("last-event-id")
            if header_id is not None:
                last_event_id = int(header_id)
            q = service.events.subscribe(last_event_id)

            def stream():
                try:
                    while True:
                        try:
                            record = q.get(timeout=15.0)
                        except queue.Empty:
                            yield ": keepalive\n\n"
                            continue
                        if record is None:  # kicked for being too slow
                            return
                        event_id, name, payload = record
                        yield (f"id: {event_id}\nevent: {name}\n"
                               f"data: {json.dumps(payload)}\n\n")
                finally:
                    service.events.unsubscribe(q)

            return StreamingResponse(stream(), media_type="text/event-stream")

        # ---- static UI bundle --------------------------------------------------------

        if self._static_dir and self._static_dir.is_dir():
            from fastapi.staticfiles import StaticFiles
            app.mount("/", StaticFiles(directory=self._static_dir, html=True),
                      name="ui")

        return app


def serve(project_dir, bind_address: str = "127.0.0.1:8000",
          static_dir=None) -> None:
    """Run the workbench service with uvicorn (blocking)."""
    import uvicorn
    host, _, port = bind_address.rpartition(":")
    if static_dir is None:
        default_static = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        if default_static.is_dir():
            static_dir = default_static
    service = WorkbenchService(project_dir, static_dir=static_dir)
    try:
        uvicorn.run(service.app, host=host or "127.0.0.1", port=int(port))
    finally:
        service.close()
