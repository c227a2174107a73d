import json

import pytest

from conftest import CORPUS, FIXTURES, make_manifest
from netforge.cli import main


def run(capsys, *argv):
    capsys.readouterr()  # drop any output from earlier setup calls
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def workspace(tmp_path):
    """A project directory created and populated through the CLI itself."""
    project_dir = tmp_path / "proj"
    manifest = make_manifest(tmp_path, "mnist.manifest")
    assert main(["new", str(project_dir), "--name", "demo",
                 "--schema", str(FIXTURES / "caffe.proto")]) == 0
    assert main(["import-net", str(project_dir),
                 str(CORPUS / "lenet_train_test.prototxt")]) == 0
    assert main(["import-solver", str(project_dir),
                 str(CORPUS / "lenet_solver.prototxt")]) == 0
    return project_dir, manifest


def bind_dataset(capsys, project_dir, manifest):
    code, out, _ = run(capsys, "datasets", "add", str(project_dir),
                       "--format", "MANIFEST", "--path", str(manifest))
    assert code == 0
    ds_id = out.strip()
    for phase in ("TRAIN", "TEST"):
        assert main(["datasets", "bind", str(project_dir), ds_id,
                     "mnist", phase]) == 0
    return ds_id


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 1

    def test_missing_required_option_is_usage_error(self, capsys, tmp_path):
        code, _, _ = run(capsys, "new", str(tmp_path / "p"))
        assert code == 1

    def test_operation_error_prints_upper_snake_code(self, capsys, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(capsys, "validate", str(empty))
        assert code == 2
        assert err.startswith("NOT_A_PROJECT")

    def test_success_is_zero(self, capsys, tmp_path):
        code, out, _ = run(capsys, "new", str(tmp_path / "p"), "--name", "x",
                           "--schema", str(FIXTURES / "caffe.proto"))
        assert code == 0
        assert "created project" in out


class TestWorkflow:
    def test_validate_clean_net(self, capsys, workspace):
        project_dir, _ = workspace
        code, out, _ = run(capsys, "validate", str(project_dir))
        assert code == 0
        assert "topology ok" in out

    def test_validate_json_reports_diagnostics(self, capsys, workspace,
                                               tmp_path):
        project_dir, _ = workspace
        broken = tmp_path / "broken.prototxt"
        broken.write_text('layer { name: "a" type: "ReLU" bottom: "ghost" '
                          'top: "a" }\n')
        assert main(["import-net", str(project_dir), str(broken)]) == 0
        code, out, _ = run(capsys, "validate", str(project_dir), "--json")
        assert code == 2
        diags = json.loads(out)
        assert diags[0]["kind"] == "DanglingBottom"

    def test_datasets_probe_and_list(self, capsys, workspace):
        project_dir, manifest = workspace
        ds_id = bind_dataset(capsys, project_dir, manifest)
        code, out, _ = run(capsys, "datasets", "probe", str(project_dir),
                           ds_id, "--json")
        assert code == 0
        assert json.loads(out) == {"itemCount": 60000, "dims": [1, 28, 28]}
        code, out, _ = run(capsys, "datasets", "list", str(project_dir))
        assert code == 0 and ds_id in out

    def test_session_lifecycle_and_export(self, capsys, workspace, tmp_path):
        project_dir, manifest = workspace
        bind_dataset(capsys, project_dir, manifest)

        code, out, _ = run(capsys, "session", "create", str(project_dir))
        assert code == 0
        sid = out.strip()
        assert sid == "1"

        code, out, _ = run(capsys, "session", "start", str(project_dir), sid,
                           "--seed", "1")
        assert code == 0
        assert f"session {sid} FINISHED at iteration 1000" in out

        code, out, _ = run(capsys, "session", "list", str(project_dir),
                           "--json")
        assert code == 0
        rows = json.loads(out)
        assert rows == [{"id": 1, "state": "FINISHED", "iteration": 1000,
                         "maxIter": 1000}]

        out_csv = tmp_path / "metrics.csv"
        code, _, _ = run(capsys, "export-csv", str(project_dir),
                         "--sessions", sid, "--keys", "train/loss",
                         "-o", str(out_csv))
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "iteration,session1/train/loss"
        assert len(lines) == 101

        code, out, _ = run(capsys, "export-csv", str(project_dir),
                           "--sessions", sid, "--keys", "train/loss")
        assert code == 0
        assert out.splitlines()[0] == "iteration,session1/train/loss"

    def test_pause_on_finished_session_exits_two(self, capsys, workspace):
        project_dir, manifest = workspace
        bind_dataset(capsys, project_dir, manifest)
        run(capsys, "session", "create", str(project_dir))
        run(capsys, "session", "start", str(project_dir), "1")
        code, _, err = run(capsys, "session", "pause", str(project_dir), "1")
        assert code == 2
        assert err.startswith("ILLEGAL_TRANSITION")

    def test_session_delete(self, capsys, workspace):
        project_dir, manifest = workspace
        bind_dataset(capsys, project_dir, manifest)
        run(capsys, "session", "create", str(project_dir))
        code, _, _ = run(capsys, "session", "delete", str(project_dir), "1")
        assert code == 0
        code, out, _ = run(capsys, "session", "list", str(project_dir),
                           "--json")
        assert json.loads(out) == []


class TestReport:
    def test_report_writes_csv_and_figures(self, capsys, workspace, tmp_path):
        project_dir, manifest = workspace
        bind_dataset(capsys, project_dir, manifest)
        run(capsys, "session", "create", str(project_dir))
        run(capsys, "session", "start", str(project_dir), "1")

        out_dir = tmp_path / "report"
        code, out, _ = run(capsys, "report", str(project_dir),
                           "--sessions", "1",
                           "--keys", "train/loss,test0/accuracy",
                           "-o", str(out_dir))
        assert code == 0
        assert (out_dir / "metrics.csv").exists()
        loss_png = out_dir / "train_loss.png"
        accuracy_png = out_dir / "test0_accuracy.png"
        assert loss_png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert accuracy_png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        csv_header = (out_dir / "metrics.csv").read_text().splitlines()[0]
        assert csv_header == ("iteration,session1/train/loss,"
                              "session1/test0/accuracy")
