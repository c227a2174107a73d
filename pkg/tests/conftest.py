import json
from pathlib import Path

import pytest

from netforge import project_store
from netforge.session_engine import SimulatedBackend

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"
CORPUS = FIXTURES / "corpus"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    return CORPUS


@pytest.fixture(scope="session")
def full_schema_text() -> str:
    return (FIXTURES / "caffe.proto").read_text("utf-8")


@pytest.fixture(scope="session")
def excerpt_schema_text() -> str:
    return (FIXTURES / "caffe_excerpt.proto").read_text("utf-8")


@pytest.fixture(scope="session")
def full_schema(full_schema_text):
    from netforge.proto_schema import parse_proto_schema
    return parse_proto_schema(full_schema_text)


@pytest.fixture(scope="session")
def full_catalog(full_schema):
    from netforge.proto_schema import extract_layer_catalog
    return extract_layer_catalog(full_schema)


@pytest.fixture
def fast_backend() -> SimulatedBackend:
    return SimulatedBackend(seed=1, step_delay=0.0)


def make_manifest(directory: Path, name: str = "mnist.manifest",
                  count: int = 60000, dims=(1, 28, 28)) -> Path:
    path = directory / name
    path.write_text(json.dumps({"count": count, "dims": list(dims)}), "utf-8")
    return path


def make_lenet_project(tmp_path: Path, bind: bool = True):
    """A ready-to-train project: LeNet net + solver + bound MNIST manifest."""
    project = project_store.create_project(tmp_path / "proj", "lenet",
                                           FIXTURES / "caffe.proto")
    project = project_store.import_net(
        project, CORPUS / "lenet_train_test.prototxt")
    project, _ = project_store.import_solver(
        project, CORPUS / "lenet_solver.prototxt")
    manifest = make_manifest(tmp_path)
    ref = project_store.register_dataset(project, "MANIFEST", str(manifest))
    if bind:
        project_store.bind_input(project, ref.id, "mnist", "TRAIN")
        project_store.bind_input(project, ref.id, "mnist", "TEST")
    project_store.save_project(project)
    return project


@pytest.fixture
def lenet_project(tmp_path):
    return make_lenet_project(tmp_path)


def wait_for(predicate, timeout: float = 30.0, interval: float = 0.02) -> None:
    import time
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError("condition not met within timeout")
