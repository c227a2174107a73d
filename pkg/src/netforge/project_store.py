"""Project folder lifecycle: manifest persistence, schema version, dataset
registry, input bindings, and import of external net/solver/weights files.

Everything inside the project directory is referenced relatively so a folder
can be copied between machines without breaking.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import net_graph, proto_schema, prototext
from .net_graph import NetModel, UiState
from .proto_schema import LayerCatalog, SchemaCatalog
from .prototext import Block, Document, Scalar

PROJECT_MANIFEST = "project.json"
PROJECT_FORMAT_VERSION = 1

DATASET_FORMATS = ("LMDB", "LEVELDB", "HDF5", "IMAGELIST", "MANIFEST")

SOLVER_DEFAULTS = [
    ("base_lr", Scalar("0.01", "float")),
    ("max_iter", Scalar("1000", "integer")),
    ("display", Scalar("10", "integer")),
    ("test_interval", Scalar("100", "integer")),
    ("test_iter", Scalar("10", "integer")),
    ("snapshot", Scalar("200", "integer")),
    ("lr_policy", Scalar("fixed", "string")),
    ("solver_mode", Scalar.identifier("CPU")),
]


class ProjectError(Exception):
    pass


class DirNotEmpty(ProjectError):
    pass


class SchemaParseFailed(ProjectError):
    pass


class NotAProject(ProjectError):
    pass


class VersionMismatch(ProjectError):
    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"project format version {found}, supported {supported}")


class CorruptManifest(ProjectError):
    pass


class ParseFailed(ProjectError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"parse failed: {diagnostics}")


class ManifestMalformed(ProjectError):
    pass


class ProbeUnsupported(ProjectError):
    def __init__(self, fmt: str):
        self.format = fmt
        super().__init__(f"local probing of {fmt} datasets is not supported")


class UnknownDataset(ProjectError):
    pass


class NotADataLayer(ProjectError):
    pass


class DuplicateBinding(ProjectError):
    pass


class ProjectLocked(ProjectError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    item_count: int
    dims: tuple[int, ...]


@dataclass(frozen=True)
class DatasetRef:
    id: str
    format: str
    path: str
    host_id: str = "local"
    stats: DatasetStats | None = None


@dataclass(frozen=True)
class InputBinding:
    dataset_id: str
    layer_name: str
    phase: str


@dataclass
class Project:
    project_dir: Path
    name: str
    schema_ref: str                 # project-relative path to the schema copy
    schema_source_id: str
    net: NetModel
    solver: Document
    datasets: list[DatasetRef] = field(default_factory=list)
    bindings: list[InputBinding] = field(default_factory=list)
    session_counter: int = 0
    ui_state: UiState = UiState()

    _schema: SchemaCatalog | None = None
    _catalog: LayerCatalog | None = None

    @property
    def schema(self) -> SchemaCatalog:
        if self._schema is None:
            text = (self.project_dir / self.schema_ref).read_text("utf-8")
            self._schema = proto_schema.parse_proto_schema(text)
        return self._schema

    @property
    def layer_catalog(self) -> LayerCatalog:
        if self._catalog is None:
            self._catalog = proto_schema.extract_layer_catalog(self.schema)
        return self._catalog

    def dataset(self, dataset_id: str) -> DatasetRef:
        for d in self.datasets:
            if d.id == dataset_id:
                return d
        raise UnknownDataset(dataset_id)

    @property
    def sessions_dir(self) -> Path:
        return self.project_dir / "sessions"


def atomic_write(path: Path, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex[:8]}.tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Create / open / save

def create_project(directory, name: str, schema_file) -> Project:
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        raise DirNotEmpty(str(directory))
    schema_text = Path(schema_file).read_text("utf-8")
    try:
        schema = proto_schema.parse_proto_schema(schema_text)
    except proto_schema.SchemaError as exc:
        raise SchemaParseFailed(str(exc)) from exc

    directory.mkdir(parents=True, exist_ok=True)
    (directory / "schema").mkdir()
    (directory / "sessions").mkdir()
    (directory / "weights").mkdir()
    (directory / "datasets").mkdir()
    atomic_write(directory / "schema" / "caffe.proto", schema_text)

    solver = Document(Block(tuple(SOLVER_DEFAULTS)))
    project = Project(
        project_dir=directory,
        name=name,
        schema_ref="schema/caffe.proto",
        schema_source_id=schema.source_id,
        net=NetModel(net_name=name),
        solver=solver,
    )
    save_project(project)
    return project


def save_project(project: Project) -> None:
    net_doc = net_graph.net_to_document(project.net)
    atomic_write(project.project_dir / "net.prototxt",
                 prototext.serialize_text_format(net_doc))
    atomic_write(project.project_dir / "solver.prototxt",
                 prototext.serialize_text_format(project.solver))
    manifest = {
        "formatVersion": PROJECT_FORMAT_VERSION,
        "name": project.name,
        "schemaRef": project.schema_ref,
        "schemaSourceId": project.schema_source_id,
        "sessionCounter": project.session_counter,
        "positions": {l.name: [l.position[0], l.position[1]]
                      for l in project.net.layers},
        "uiState": {
            "hiddenEdgeBlobs": sorted(project.ui_state.hidden_edge_blobs),
            "zoom": project.ui_state.zoom,
            "pan": list(project.ui_state.pan),
        },
        "datasets": [
            {
                "id": d.id,
                "format": d.format,
                "path": d.path,
                "hostId": d.host_id,
                "stats": None if d.stats is None else {
                    "itemCount": d.stats.item_count,
                    "dims": list(d.stats.dims),
                },
            }
            for d in project.datasets
        ],
        "bindings": [
            {"datasetId": b.dataset_id, "layerName": b.layer_name, "phase": b.phase}
            for b in project.bindings
        ],
    }
    atomic_write(project.project_dir / PROJECT_MANIFEST,
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def open_project(directory) -> Project:
    directory = Path(directory)
    manifest_path = directory / PROJECT_MANIFEST
    if not manifest_path.is_file():
        raise NotAProject(str(directory))
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except (ValueError, OSError) as exc:
        raise CorruptManifest(str(exc)) from exc
    version = manifest.get("formatVersion")
    if version != PROJECT_FORMAT_VERSION:
        raise VersionMismatch(version, PROJECT_FORMAT_VERSION)

    try:
        net_doc = prototext.parse_text_format(
            (directory / "net.prototxt").read_text("utf-8"))
        solver = prototext.parse_text_format(
            (directory / "solver.prototxt").read_text("utf-8"))
    except (OSError, prototext.PrototextError) as exc:
        raise CorruptManifest(str(exc)) from exc

    net = net_graph.net_from_document(net_doc)
    positions = manifest.get("positions", {})
    layers = []
    for layer in net.layers:
        pos = positions.get(layer.name)
        if pos is not None:
            layer = replace(layer, position=(float(pos[0]), float(pos[1])))
        layers.append(layer)
    ui = manifest.get("uiState", {})
    net = replace(net, layers=tuple(layers))

    datasets = [
        DatasetRef(
            id=d["id"], format=d["format"], path=d["path"],
            host_id=d.get("hostId", "local"),
            stats=None if d.get("stats") is None else DatasetStats(
                d["stats"]["itemCount"], tuple(d["stats"]["dims"])),
        )
        for d in manifest.get("datasets", [])
    ]
    bindings = [
        InputBinding(b["datasetId"], b["layerName"], b["phase"])
        for b in manifest.get("bindings", [])
    ]
    return Project(
        project_dir=directory,
        name=manifest["name"],
        schema_ref=manifest["schemaRef"],
        schema_source_id=manifest["schemaSourceId"],
        net=net,
        solver=solver,
        datasets=datasets,
        bindings=bindings,
        session_counter=manifest.get("sessionCounter", 0),
        ui_state=UiState(
            hidden_edge_blobs=frozenset(ui.get("hiddenEdgeBlobs", ())),
            zoom=float(ui.get("zoom", 1.0)),
            pan=tuple(ui.get("pan", (0.0, 0.0))),
        ),
    )


# ---------------------------------------------------------------------------
# Single-writer lock

class ProjectLock:
    """One writer per project dir; stale locks from dead pids are taken over."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"
        self.acquired = False

    def acquire(self) -> None:
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
            except ValueError:
                pid = -1
            if pid > 0 and _pid_alive(pid) and pid != os.getpid():
                raise ProjectLocked(f"project locked by pid {pid}")
            self.path.unlink(missing_ok=True)
        atomic_write(self.path, str(os.getpid()))
        self.acquired = True

    def release(self) -> None:
        if self.acquired:
            self.path.unlink(missing_ok=True)
            self.acquired = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# ---------------------------------------------------------------------------
# Imports

def import_net(project: Project, prototxt_path) -> Project:
    text = Path(prototxt_path).read_text("utf-8")
    try:
        doc = prototext.parse_text_format(text)
        net = net_graph.net_from_document(doc)
    except (prototext.PrototextError, net_graph.NetGraphError) as exc:
        raise ParseFailed([str(exc)]) from exc
    project.net = net_graph.auto_layout(net)
    save_project(project)
    return project


def import_solver(project: Project, path) -> tuple[Project, list[prototext.Diagnostic]]:
    text = Path(path).read_text("utf-8")
    try:
        doc = prototext.parse_text_format(text)
    except prototext.PrototextError as exc:
        raise ParseFailed([str(exc)]) from exc
    solver_msg = _find_message(project.schema, "SolverParameter")
    diagnostics = prototext.validate_against(doc, project.schema, solver_msg)
    if any(d.severity == "error" for d in diagnostics):
        raise ParseFailed(diagnostics)
    project.solver = doc
    save_project(project)
    return project, diagnostics


def import_weights(project: Project, caffemodel_path) -> tuple[Project, str]:
    data = Path(caffemodel_path).read_bytes()
    digest = _content_hash(data)
    target = project.project_dir / "weights" / f"{digest}.caffemodel"
    if not target.exists():
        atomic_write(target, data)
    return project, digest


def _find_message(schema: SchemaCatalog, suffix: str) -> str:
    for name in schema.messages:
        if name.rsplit(".", 1)[-1] == suffix:
            return name
    raise SchemaParseFailed(f"schema defines no {suffix} message")


# ---------------------------------------------------------------------------
# Datasets and bindings

def register_dataset(project: Project, fmt: str, path: str,
                     host_id: str = "local") -> DatasetRef:
    if fmt not in DATASET_FORMATS:
        raise ProjectError(f"unknown dataset format {fmt!r}")
    ref = DatasetRef(id=f"ds-{uuid.uuid4().hex[:12]}", format=fmt,
                     path=path, host_id=host_id)
    project.datasets.append(ref)
    save_project(project)
    return ref


def read_dataset_manifest(path) -> DatasetStats:
    """MANIFEST format: JSON with integer `count` and integer-list `dims`."""
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except (ValueError, OSError) as exc:
        raise ManifestMalformed(str(exc)) from exc
    count = data.get("count")
    dims = data.get("dims")
    if not isinstance(count, int) or count < 0:
        raise ManifestMalformed("`count` must be a non-negative integer")
    if not isinstance(dims, list) or not all(isinstance(d, int) for d in dims):
        raise ManifestMalformed("`dims` must be a list of integers")
    return DatasetStats(count, tuple(dims))


def probe_dataset(project: Project, dataset_id: str) -> DatasetStats:
    ref = project.dataset(dataset_id)
    if ref.host_id != "local":
        raise ProjectError("remote probing goes through the agent client")
    if ref.format != "MANIFEST":
        raise ProbeUnsupported(ref.format)
    path = Path(ref.path)
    if not path.is_absolute():
        path = project.project_dir / path
    stats = read_dataset_manifest(path)
    project.datasets = [replace(d, stats=stats) if d.id == dataset_id else d
                        for d in project.datasets]
    save_project(project)
    return stats


def bind_input(project: Project, dataset_id: str, layer_name: str, phase: str) -> Project:
    project.dataset(dataset_id)  # raises UnknownDataset
    layer = project.net.layer(layer_name)
    kind = project.layer_catalog.find(layer.type_name)
    if kind is None or kind.category != "data":
        raise NotADataLayer(layer_name)
    for b in project.bindings:
        if b.layer_name == layer_name and b.phase == phase:
            raise DuplicateBinding(f"{layer_name}/{phase}")
    project.bindings.append(InputBinding(dataset_id, layer_name, phase))
    save_project(project)
    return project
