"""End-to-end acceptance gate: one test per criterion, so a verbose run
prints exactly one pass/fail line for each.
"""

import json
import random
import shutil
import threading
import time

from conftest import CORPUS, FIXTURES, make_lenet_project, wait_for
from faults import document_mutants, topology_mutants
from netforge import metrics, project_store
from netforge.metrics import (LogFollower, Unrecognized, bundle_from_events,
                              export_csv, parse_log_text)
from netforge.net_graph import net_from_document, validate_topology
from netforge.proto_schema import extract_layer_catalog, parse_proto_schema
from netforge.prototext import (parse_text_format, serialize_text_format,
                                validate_against)
from netforge.remote_agent import Agent, client_connect
from netforge.session_engine import SessionManager, SimulatedBackend
from test_metrics import events_equal, expected_golden_events
from test_session_engine import run_to_state

TINY_NET = (CORPUS / "tiny_relu_inplace.prototxt").read_text()
LENET_SOLVER = (CORPUS / "lenet_solver.prototxt").read_text()


def finish(manager, session_id):
    wait_for(lambda: manager.get(session_id).state == "FINISHED")


def session_csv(manager, session_id, keys=None):
    log = manager.get(session_id).log_path.read_text()
    bundle = bundle_from_events("s", parse_log_text(log))
    text, _ = export_csv([bundle], keys or sorted(bundle.keys()))
    return text, bundle


def test_criterion_1_schema_ingestion_catalog():
    started = time.perf_counter()
    schema = parse_proto_schema((FIXTURES / "caffe.proto").read_text())
    catalog = extract_layer_catalog(schema)
    elapsed = time.perf_counter() - started

    assert len(catalog.layers) >= 40
    names = {k.type_name for k in catalog.layers}
    assert {"Convolution", "Pooling", "InnerProduct", "ReLU",
            "Softmax"} <= names

    oracle = json.loads(
        (FIXTURES / "caffe_proto_expected_layers.json").read_text())["layers"]
    actual = {k.type_name:
              k.parameter_message.rsplit(".", 1)[-1]
              if k.parameter_message else None
              for k in catalog.layers}
    assert actual == oracle
    for kind in catalog.layers:
        if kind.parameter_message is not None:
            assert schema.find_message(kind.parameter_message) is not None
    assert elapsed < 1.0, f"schema ingestion took {elapsed:.3f}s"


def _random_prototxt(rng, depth=0):
    lines = []
    for _ in range(rng.randint(1, 5)):
        name = "".join(rng.choice("abcdefghijklmnop")
                       for _ in range(rng.randint(1, 8)))
        kind = rng.randrange(6 if depth < 3 else 5)
        if kind == 0:
            lines.append(f"{name}: {rng.randint(-10**6, 10**6)}")
        elif kind == 1:
            lines.append(f"{name}: {rng.uniform(-1e3, 1e3)!r}")
        elif kind == 2:
            lines.append(f"{name}: {rng.choice(['true', 'false'])}")
        elif kind == 3:
            text = "".join(rng.choice("abcXYZ 019_./-")
                           for _ in range(rng.randint(0, 12)))
            lines.append(f'{name}: "{text}"')
        elif kind == 4:
            enum = "".join(rng.choice("ABCDEFGH_")
                           for _ in range(rng.randint(1, 8)))
            lines.append(f"{name}: E{enum}")
        else:
            inner = _random_prototxt(rng, depth + 1)
            lines.append(name + " {")
            lines.extend("  " + l for l in inner.splitlines())
            lines.append("}")
    return "\n".join(lines) + "\n"


def test_criterion_2_text_format_round_trip():
    started = time.perf_counter()

    corpus = sorted(CORPUS.glob("*.prototxt"))
    assert len(corpus) == 10
    for path in corpus:
        once = serialize_text_format(parse_text_format(path.read_text()))
        assert serialize_text_format(parse_text_format(once)) == once, path

    for seed in range(1000):
        text = _random_prototxt(random.Random(seed))
        doc = parse_text_format(text)
        assert parse_text_format(serialize_text_format(doc)) == doc, seed

    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"round-trip suite took {elapsed:.3f}s"


def test_criterion_3_validation_fault_suite(full_schema, full_catalog):
    lenet_doc = parse_text_format(
        (CORPUS / "lenet_train_test.prototxt").read_text())
    lenet_net = net_from_document(lenet_doc)
    rng = random.Random(2026)

    detected = 0
    for mutant in topology_mutants(lenet_net, rng, 100):
        diags = validate_topology(mutant.net, "TRAIN", full_catalog)
        assert len(diags) == 1, (mutant.label, diags)
        assert diags[0].kind == mutant.expected_kind, mutant.label
        assert set(diags[0].subjects) == mutant.expected_subjects, mutant.label
        detected += 1
    for mutant in document_mutants(lenet_doc, rng, 100):
        errors = [d for d in validate_against(mutant.doc, full_schema,
                                              "caffe.NetParameter")
                  if d.severity == "error"]
        assert len(errors) == 1, (mutant.label, errors)
        assert errors[0].path == mutant.expected_path, mutant.label
        detected += 1
    assert detected == 200


def test_criterion_4_session_continuity(tmp_path):
    started = time.perf_counter()
    net = parse_text_format(TINY_NET)
    solver = parse_text_format(LENET_SOLVER)

    uninterrupted = SessionManager(tmp_path / "a")
    uninterrupted.create_from_documents(1, net, solver)
    uninterrupted.start(1, SimulatedBackend(seed=1, step_delay=0.0))
    finish(uninterrupted, 1)
    oracle_csv, bundle = session_csv(uninterrupted, 1)

    losses = bundle.series["train/loss"]
    assert len(losses) == 100
    assert losses[-1][0] == 1000
    assert abs(losses[-1][1] - 0.0653) <= 0.012

    resumed = SessionManager(tmp_path / "b")
    resumed.create_from_documents(1, net, solver)
    resumed.start(1, SimulatedBackend(seed=1, step_delay=0.0005))
    resumed.pause(1, at_iteration=200)  # a snapshot boundary
    assert resumed.get(1).state == "PAUSED"
    resumed.resume(1, SimulatedBackend(seed=1, step_delay=0.0))
    finish(resumed, 1)
    resumed_csv, _ = session_csv(resumed, 1)
    assert resumed_csv.encode() == oracle_csv.encode()

    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"continuity suite took {elapsed:.3f}s"


def test_criterion_5_state_machine_exhaustive(tmp_path):
    from netforge.session_engine import (ACTIONS, ALLOWED_TRANSITIONS, STATES,
                                         IllegalTransition, NoSuchSession)
    from test_session_engine import make_manager, make_session

    expected_after = {"start": "RUNNING", "pause": "PAUSED",
                      "resume": "RUNNING", "abort": "FAILED"}
    for state in sorted(STATES):
        for action in sorted(ACTIONS):
            manager = make_manager(tmp_path / f"{state}-{action}")
            make_session(manager)
            run_to_state(manager, 1, state)
            backend = SimulatedBackend(seed=1, step_delay=0.01)

            def apply():
                if action == "start":
                    manager.start(1, backend)
                elif action == "pause":
                    manager.pause(1)
                elif action == "resume":
                    manager.resume(1, backend)
                elif action == "abort":
                    manager.abort(1)
                else:
                    manager.delete(1)

            if (state, action) in ALLOWED_TRANSITIONS:
                apply()
                if action == "delete":
                    try:
                        manager.get(1)
                        raise AssertionError((state, action))
                    except NoSuchSession:
                        pass
                else:
                    assert manager.get(1).state == expected_after[action]
            else:
                try:
                    apply()
                    raise AssertionError(f"{state}x{action} did not raise")
                except IllegalTransition:
                    pass
                assert manager.get(1).state == state
            try:
                if manager.get(1).state == "RUNNING":
                    manager.abort(1)
            except NoSuchSession:
                pass


def test_criterion_6_log_parser_golden_and_streaming(tmp_path):
    text = (FIXTURES / "golden_train.log").read_text()
    batch = parse_log_text(text)
    expected = expected_golden_events(FIXTURES)
    assert len(batch) == len(expected) == 20
    assert not any(isinstance(e, Unrecognized) for e in batch)
    for got, want in zip(batch, expected):
        assert events_equal(got, want), (got, want)

    for seed in (0, 1, 2):
        rng = random.Random(seed)
        target = tmp_path / f"chunked_{seed}.log"
        target.touch()
        done = threading.Event()
        follower = LogFollower(target, poll_interval=0.005, until=done.is_set)

        def writer():
            data = text.encode()
            offset = 0
            while offset < len(data):
                step = rng.randint(1, 41)
                with open(target, "ab") as fh:
                    fh.write(data[offset:offset + step])
                offset += step
                time.sleep(0.001)
            done.set()

        thread = threading.Thread(target=writer)
        thread.start()
        streamed = list(follower)
        thread.join()
        assert len(streamed) == len(batch)
        for got, want in zip(streamed, batch):
            assert events_equal(got, want)


def test_criterion_7_remote_equivalence(tmp_path):
    started = time.perf_counter()
    root = tmp_path / "agent_root"
    root.mkdir()
    with Agent(root, port=0,
               backend_factory=lambda seed: SimulatedBackend(
                   seed=seed, step_delay=0.0)) as agent:
        address = f"127.0.0.1:{agent.port}"
        with client_connect(address) as client:
            sid = client.create_session(TINY_NET, LENET_SOLVER, seed=1)
            client.control(sid, "start", seed=1)
            wait_for(lambda: client.status(sid)["state"] == "FINISHED")
            remote_log = b""
            for offset, chunk, _ in client.subscribe_log(sid, 0):
                assert offset == len(remote_log)
                remote_log += chunk

        # forced disconnect mid-stream, then reconnect from the byte offset
        half = len(remote_log) // 2
        with client_connect(address) as client:
            first = b""
            for _, chunk, _ in client.subscribe_log(sid, 0):
                first += chunk
                if len(first) >= half:
                    break
        with client_connect(address) as client:
            rest = b""
            resumed_at = None
            for offset, chunk, _ in client.subscribe_log(sid, len(first)):
                if resumed_at is None:
                    resumed_at = offset
                rest += chunk
        assert resumed_at == len(first)
        assert first + rest == remote_log

    local = SessionManager(tmp_path / "local")
    local.create_from_documents(1, parse_text_format(TINY_NET),
                                parse_text_format(LENET_SOLVER))
    local.start(1, SimulatedBackend(seed=1, step_delay=0.0))
    finish(local, 1)
    local_csv, bundle = session_csv(local, 1)
    remote_bundle = bundle_from_events("s", parse_log_text(remote_log.decode()))
    remote_csv, _ = export_csv([remote_bundle], sorted(bundle.keys()))
    assert remote_csv.encode() == local_csv.encode()

    elapsed = time.perf_counter() - started
    assert elapsed < 15.0, f"remote suite took {elapsed:.3f}s"


def test_criterion_8_project_portability(tmp_path):
    project = make_lenet_project(tmp_path)
    manager = SessionManager(project.sessions_dir)
    from netforge.session_engine import create_session
    session = create_session(project, manager)
    manager.start(session.id, SimulatedBackend(seed=1, step_delay=0.0))
    finish(manager, session.id)
    project_store.save_project(project)

    copy_dir = tmp_path / "moved" / "proj"
    copy_dir.parent.mkdir()
    shutil.copytree(project.project_dir, copy_dir)
    moved = project_store.open_project(copy_dir)

    assert moved.name == project.name
    assert moved.net == project.net
    assert [l.position for l in moved.net.layers] == [
        l.position for l in project.net.layers]
    assert moved.solver == project.solver
    assert moved.datasets == project.datasets
    assert moved.bindings == project.bindings
    assert moved.ui_state == project.ui_state
    assert moved.session_counter == project.session_counter

    moved_sessions = SessionManager(moved.sessions_dir).list_sessions()
    originals = manager.list_sessions()
    assert [(s.id, s.state, s.iteration) for s in moved_sessions] == [
        (s.id, s.state, s.iteration) for s in originals]
    assert [[snap.iteration for snap in s.snapshots]
            for s in moved_sessions] == [
        [snap.iteration for snap in s.snapshots] for s in originals]


def test_criterion_9_csv_golden(tmp_path):
    manager = SessionManager(tmp_path / "golden")
    net = parse_text_format(TINY_NET)
    manager.create_from_documents(1, net, parse_text_format(LENET_SOLVER))
    manager.start(1, SimulatedBackend(seed=1, step_delay=0.0))
    finish(manager, 1)

    second_solver = ('base_lr: 0.02\nmax_iter: 600\ndisplay: 20\n'
                     'test_interval: 200\ntest_iter: 5\nsnapshot: 300\n'
                     'lr_policy: "fixed"\n')
    manager.create_from_documents(2, net, parse_text_format(second_solver))
    manager.start(2, SimulatedBackend(seed=2, step_delay=0.0))
    finish(manager, 2)

    bundles = [
        bundle_from_events(f"session{sid}", parse_log_text(
            manager.get(sid).log_path.read_text()))
        for sid in (1, 2)
    ]
    text, warnings = export_csv(bundles, ["train/loss", "test0/accuracy"])
    assert warnings == []
    golden = (FIXTURES / "golden_export.csv").read_bytes()
    assert text.encode() == golden
