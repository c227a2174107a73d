import json
import shutil

import pytest

from conftest import make_lenet_project, make_manifest
from netforge import project_store
from netforge.project_store import (CorruptManifest, DirNotEmpty,
                                    DuplicateBinding, ManifestMalformed,
                                    NotADataLayer, NotAProject, ParseFailed,
                                    ProjectLock, ProjectLocked,
                                    ProbeUnsupported, UnknownDataset,
                                    VersionMismatch, atomic_write,
                                    bind_input, create_project, open_project,
                                    probe_dataset, register_dataset,
                                    save_project)


class TestCreateOpen:
    def test_create_copies_schema(self, tmp_path, fixtures_dir):
        project = create_project(tmp_path / "p", "demo",
                                 fixtures_dir / "caffe_excerpt.proto")
        assert (project.project_dir / "project.json").exists()
        assert project.session_counter == 0
        copied = project.project_dir / project.schema_ref
        assert copied.read_text() == (
            fixtures_dir / "caffe_excerpt.proto").read_text()

    def test_create_rejects_nonempty_dir(self, tmp_path, fixtures_dir):
        target = tmp_path / "p"
        target.mkdir()
        (target / "junk.txt").write_text("x")
        with pytest.raises(DirNotEmpty):
            create_project(target, "demo", fixtures_dir / "caffe_excerpt.proto")

    def test_open_empty_dir(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        with pytest.raises(NotAProject):
            open_project(empty)

    def test_open_round_trip(self, tmp_path):
        project = make_lenet_project(tmp_path)
        reopened = open_project(project.project_dir)
        assert reopened.name == project.name
        assert reopened.net == project.net
        assert reopened.solver == project.solver
        assert reopened.datasets == project.datasets
        assert reopened.bindings == project.bindings
        assert reopened.session_counter == project.session_counter

    def test_version_mismatch(self, tmp_path):
        project = make_lenet_project(tmp_path)
        manifest_path = project.project_dir / "project.json"
        data = json.loads(manifest_path.read_text())
        data["formatVersion"] = 99
        manifest_path.write_text(json.dumps(data))
        with pytest.raises(VersionMismatch) as exc:
            open_project(project.project_dir)
        assert exc.value.found == 99

    def test_corrupt_manifest(self, tmp_path):
        project = make_lenet_project(tmp_path)
        (project.project_dir / "project.json").write_text("{ not json")
        with pytest.raises(CorruptManifest):
            open_project(project.project_dir)

    def test_portability_copy_directory(self, tmp_path):
        project = make_lenet_project(tmp_path)
        copy_dir = tmp_path / "elsewhere" / "copy"
        copy_dir.parent.mkdir()
        shutil.copytree(project.project_dir, copy_dir)
        moved = open_project(copy_dir)
        assert moved.net == project.net
        assert moved.solver == project.solver
        assert moved.datasets == project.datasets
        assert moved.bindings == project.bindings
        assert moved.ui_state == project.ui_state
        assert [l.position for l in moved.net.layers] == [
            l.position for l in project.net.layers]


class TestAtomicWrite:
    def test_no_temp_residue(self, tmp_path):
        target = tmp_path / "out.json"
        atomic_write(target, "payload")
        assert target.read_text() == "payload"
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]

    def test_overwrite_is_complete(self, tmp_path):
        target = tmp_path / "out.json"
        atomic_write(target, "first version, quite long " * 10)
        atomic_write(target, "second")
        assert target.read_text() == "second"


class TestImports:
    def test_import_net_bad_text(self, tmp_path, fixtures_dir):
        project = create_project(tmp_path / "p", "demo",
                                 fixtures_dir / "caffe.proto")
        bad = tmp_path / "bad.prototxt"
        bad.write_text("layer { name: 'x'")
        with pytest.raises(ParseFailed):
            project_store.import_net(project, bad)

    def test_import_solver_rejects_unknown_field(self, tmp_path, fixtures_dir):
        project = create_project(tmp_path / "p", "demo",
                                 fixtures_dir / "caffe.proto")
        solver = tmp_path / "solver.prototxt"
        solver.write_text("base_lr: 0.01\nmax_iter: 100\nnot_a_field: 3\n")
        with pytest.raises(ParseFailed):
            project_store.import_solver(project, solver)

    def test_import_solver_clean(self, tmp_path, fixtures_dir, corpus_dir):
        project = create_project(tmp_path / "p", "demo",
                                 fixtures_dir / "caffe.proto")
        project, diagnostics = project_store.import_solver(
            project, corpus_dir / "lenet_solver.prototxt")
        assert diagnostics == []
        assert project.solver.root.scalar("max_iter") == 1000

    def test_import_weights_dedup(self, tmp_path, fixtures_dir):
        project = create_project(tmp_path / "p", "demo",
                                 fixtures_dir / "caffe.proto")
        weights = tmp_path / "w.caffemodel"
        weights.write_bytes(b"pretend-weights")
        project, digest1 = project_store.import_weights(project, weights)
        project, digest2 = project_store.import_weights(project, weights)
        assert digest1 == digest2
        stored = list((project.project_dir / "weights").glob("*.caffemodel"))
        assert len(stored) == 1


class TestDatasets:
    def test_register_distinct_ids(self, tmp_path, lenet_project):
        other = make_manifest(tmp_path, "cifar.manifest", count=50000)
        ref = register_dataset(lenet_project, "MANIFEST", str(other))
        ids = [d.id for d in lenet_project.datasets]
        assert len(ids) == len(set(ids)) == 2
        assert ref.id.startswith("ds-")

    def test_probe_manifest(self, lenet_project):
        ref = lenet_project.datasets[0]
        stats = probe_dataset(lenet_project, ref.id)
        assert stats.item_count == 60000
        assert tuple(stats.dims) == (1, 28, 28)

    def test_probe_unknown_dataset(self, lenet_project):
        with pytest.raises(UnknownDataset):
            probe_dataset(lenet_project, "ds-nope")

    def test_probe_malformed_manifest(self, tmp_path, lenet_project):
        bad = tmp_path / "bad.manifest"
        bad.write_text('{"rows": 3}')
        ref = register_dataset(lenet_project, "MANIFEST", str(bad))
        with pytest.raises(ManifestMalformed):
            probe_dataset(lenet_project, ref.id)

    def test_probe_unsupported_format(self, tmp_path, lenet_project):
        blob = tmp_path / "data.lmdb"
        blob.write_bytes(b"\x00")
        ref = register_dataset(lenet_project, "LMDB", str(blob))
        with pytest.raises(ProbeUnsupported):
            probe_dataset(lenet_project, ref.id)


class TestBindings:
    def test_duplicate_binding(self, lenet_project):
        ref = lenet_project.datasets[0]
        with pytest.raises(DuplicateBinding):
            bind_input(lenet_project, ref.id, "mnist", "TRAIN")

    def test_bind_non_data_layer(self, lenet_project):
        ref = lenet_project.datasets[0]
        with pytest.raises(NotADataLayer):
            bind_input(lenet_project, ref.id, "conv1", "TRAIN")

    def test_bind_unknown_dataset(self, lenet_project):
        with pytest.raises(UnknownDataset):
            bind_input(lenet_project, "ds-nope", "mnist", "TRAIN")


class TestLocking:
    def test_foreign_live_pid_blocks(self, lenet_project):
        lock_file = lenet_project.project_dir / ".lock"
        lock_file.write_text("1")  # init is alive and is not us
        with pytest.raises(ProjectLocked):
            ProjectLock(lenet_project.project_dir).acquire()

    def test_stale_lock_taken_over(self, lenet_project):
        lock_file = lenet_project.project_dir / ".lock"
        lock_file.write_text("999999999")  # no such pid
        with ProjectLock(lenet_project.project_dir):
            pass

    def test_release_allows_reacquire(self, lenet_project):
        with ProjectLock(lenet_project.project_dir):
            pass
        with ProjectLock(lenet_project.project_dir):
            pass


class TestSessionCounter:
    def test_counter_never_decreases_across_save(self, lenet_project):
        lenet_project.session_counter = 5
        save_project(lenet_project)
        assert open_project(lenet_project.project_dir).session_counter == 5
