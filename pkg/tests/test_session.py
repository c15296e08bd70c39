"""Session persistence, crash safety, and the HTTP service contract."""

import json
import os
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

import bnpreg.session as session_mod
from bnpreg.data import RoleAssignment, load_csv
from bnpreg.errors import NumericError, ValidationError
from bnpreg.models import ModelSpec
from bnpreg.priors import StickPriorSpec
from bnpreg.service import create_app
from bnpreg.session import (
    COMMANDS_FILE,
    DATA_FILE,
    DRAWS_FILE,
    MANIFEST_FILE,
    MODEL_FILE,
    RESIDUALS_FILE,
    STATES_FILE,
    Session,
    fingerprint,
    session_root,
)


def _write_csv(path, n=40, seed=3, censored=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 0.5 + 1.5 * x + rng.normal(scale=0.6, size=n)
    lines = ["y,x1"]
    for a, b in zip(y, x):
        lines.append("%r,%r" % (float(a), float(b)))
    path.write_text("\n".join(lines) + "\n")
    return path


def _linear_session(tmp_path, sid="s1", n=40, run=None):
    root = tmp_path / "root"
    s = Session.create(root, sid)
    s.set_table(load_csv(_write_csv(tmp_path / "d.csv", n=n)))
    s.set_roles(RoleAssignment(dependent="y", covariates=("x1",)))
    s.set_spec(ModelSpec("LinearNIG"))
    if run:
        s.run(**run)
    return root, s


# ---------------------------------------------------------------------------
# session root resolution
# ---------------------------------------------------------------------------

def test_session_root_precedence(monkeypatch):
    monkeypatch.delenv("BNPREG_SESSION_ROOT", raising=False)
    assert str(session_root("given")) == "given"
    assert str(session_root(None)).endswith("bnpreg_sessions")
    monkeypatch.setenv("BNPREG_SESSION_ROOT", "/tmp/envroot")
    assert str(session_root(None)) == "/tmp/envroot"
    assert str(session_root("explicit")) == "explicit"


# ---------------------------------------------------------------------------
# persist / restore round trips
# ---------------------------------------------------------------------------

class TestPersistRestore:
    def test_empty_session_round_trip(self, tmp_path):
        root = tmp_path / "root"
        s = Session.create(root, "empty")
        r = Session.restore(root, "empty")
        assert r.id == "empty"
        assert r.table is None and r.spec is None and r.store is None
        assert r.status == "idle"

    def test_unknown_session_is_refused(self, tmp_path):
        with pytest.raises(ValidationError, match="no session"):
            Session.restore(tmp_path, "ghost")

    def test_duplicate_create_is_refused(self, tmp_path):
        Session.create(tmp_path / "root", "dup")
        with pytest.raises(ValidationError, match="already exists"):
            Session.create(tmp_path / "root", "dup")

    def test_post_run_round_trip_keeps_draws(self, tmp_path):
        root, s = _linear_session(
            tmp_path, run=dict(iterations=60, burn_in=10, thin=2, seed=4))
        assert s.store.n_rows == 30
        r = Session.restore(root, "s1")
        assert r.store.n_rows == 30
        assert r.chain_state.iteration == 60
        assert np.array_equal(r.store.matrix(), s.store.matrix())
        assert r.settings == s.settings
        assert r.spec.family == "LinearNIG"

    def test_restore_rebuilds_transform_lineage(self, tmp_path):
        root = tmp_path / "root"
        s = Session.create(root, "tr")
        s.set_table(load_csv(_write_csv(tmp_path / "d.csv")))
        s.transform("zscore", {"column": "x1"})
        s.transform("interact", {"column_a": "x1", "column_b": "Z:x1"})
        r = Session.restore(root, "tr")
        assert list(r.table.columns) == list(s.table.columns)
        assert r.table.lineage == s.table.lineage
        assert np.allclose(r.table.values, s.table.values, equal_nan=True)

    def test_tampered_draw_file_is_refused(self, tmp_path):
        root, s = _linear_session(tmp_path, run=dict(iterations=20, seed=1))
        path = s.dir / DRAWS_FILE
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b"iteration", b"iterXtion", 1))
        with pytest.raises(ValidationError, match="fingerprint mismatch"):
            Session.restore(root, "s1")

    def test_tampered_model_record_is_refused(self, tmp_path):
        root, s = _linear_session(tmp_path)
        path = s.dir / MODEL_FILE
        record = json.loads(path.read_text())
        record["spec"]["hyper"]["v_beta"] = 7.0
        path.write_text(json.dumps(record, sort_keys=True,
                                   separators=(",", ":")))
        with pytest.raises(ValidationError, match="fingerprint mismatch"):
            Session.restore(root, "s1")

    def test_missing_committed_file_is_refused(self, tmp_path):
        root, s = _linear_session(tmp_path, run=dict(iterations=20, seed=1))
        (s.dir / DRAWS_FILE).unlink()
        with pytest.raises(ValidationError, match="missing committed file"):
            Session.restore(root, "s1")

    def test_crash_tail_on_append_only_file_is_truncated(self, tmp_path):
        root, s = _linear_session(tmp_path, run=dict(iterations=20, seed=1))
        path = s.dir / DRAWS_FILE
        committed = path.read_bytes()
        with open(path, "a") as f:
            f.write("999,0.1,0.2,0.3\n")   # crash after an uncommitted row
        r = Session.restore(root, "s1")
        assert path.read_bytes() == committed
        assert r.store.n_rows == s.store.n_rows

    def test_data_fingerprint_cross_check(self, tmp_path):
        root, s = _linear_session(tmp_path)
        # rewrite data.dat consistently with its own manifest entry but not
        # with the model record's stored data fingerprint
        (s.dir / DATA_FILE).write_text("y,x1\n1.0,2.0\n")
        manifest = json.loads((s.dir / MANIFEST_FILE).read_text())
        raw = (s.dir / DATA_FILE).read_bytes()
        manifest["files"][DATA_FILE] = {"bytes": len(raw),
                                        "fingerprint": fingerprint(raw)}
        (s.dir / MANIFEST_FILE).write_text(json.dumps(manifest))
        with pytest.raises(ValidationError, match="does not match the data"):
            Session.restore(root, "s1")


# ---------------------------------------------------------------------------
# append / determinism
# ---------------------------------------------------------------------------

class TestAppendDeterminism:
    def test_append_preserves_first_segment_bytes(self, tmp_path):
        root, s = _linear_session(
            tmp_path, run=dict(iterations=30, burn_in=5, thin=1, seed=9))
        first = (s.dir / DRAWS_FILE).read_bytes()
        r = Session.restore(root, "s1")
        r.run(iterations=30, append=True)
        combined = (r.dir / DRAWS_FILE).read_bytes()
        assert combined.startswith(first)
        assert r.store.n_rows == 60

    def test_append_equals_one_continuous_run(self, tmp_path):
        root, s = _linear_session(
            tmp_path, sid="split",
            run=dict(iterations=25, burn_in=5, thin=1, seed=9))
        s.run(iterations=35, append=True)
        root2, c = _linear_session(
            tmp_path, sid="whole",
            run=dict(iterations=60, burn_in=5, thin=1, seed=9))
        assert ((root / "split" / DRAWS_FILE).read_bytes()
                == (root2 / "whole" / DRAWS_FILE).read_bytes())

    def test_same_seed_reruns_are_byte_identical(self, tmp_path):
        root, s = _linear_session(
            tmp_path, run=dict(iterations=40, burn_in=10, thin=2, seed=5))
        a = (s.dir / DRAWS_FILE).read_bytes()
        s.run(iterations=40, burn_in=10, thin=2, seed=5)   # fresh rerun
        assert (s.dir / DRAWS_FILE).read_bytes() == a

    def test_append_keeps_original_thinning(self, tmp_path):
        root, s = _linear_session(
            tmp_path, run=dict(iterations=20, thin=2, seed=1))
        with pytest.raises(ValidationError, match="original thinning"):
            s.run(iterations=10, thin=3, append=True)

    def test_cancel_leaves_resumable_state(self, tmp_path):
        calls = [0]

        def cancel():
            calls[0] += 1
            return calls[0] > 20

        root, s = _linear_session(tmp_path, sid="cut")
        s.run(iterations=60, burn_in=5, thin=1, seed=9, cancel=cancel)
        stopped = s.chain_state.iteration
        assert 0 < stopped < 60
        assert s.settings["total_iterations"] == stopped
        assert s.status == "idle"
        s.run(iterations=60 - stopped, append=True)
        root2, c = _linear_session(
            tmp_path, sid="whole2",
            run=dict(iterations=60, burn_in=5, thin=1, seed=9))
        assert ((root / "cut" / DRAWS_FILE).read_bytes()
                == (root2 / "whole2" / DRAWS_FILE).read_bytes())

    def test_mixture_sidecar_round_trip_and_append(self, tmp_path):
        root = tmp_path / "root"

        def build(sid):
            s = Session.create(root, sid)
            s.set_table(load_csv(_write_csv(tmp_path / ("%s.csv" % sid))))
            s.set_roles(RoleAssignment(dependent="y", covariates=("x1",)))
            s.set_spec(ModelSpec(
                "DDPMixture", mixing_target="intercept_only",
                stick_prior=StickPriorSpec("dp", alpha=1.0)))
            return s

        split = build("split")
        split.run(iterations=20, seed=3)
        split.run(iterations=20, append=True)
        whole = build("whole")
        whole.run(iterations=40, seed=3)
        for name in (DRAWS_FILE, STATES_FILE):
            assert ((root / "split" / name).read_bytes()
                    == (root / "whole" / name).read_bytes())
        r = Session.restore(root, "whole")
        assert len(r.state_log) == 40
        assert len(r.posterior().records) == 40


# ---------------------------------------------------------------------------
# workflow gating and error paths
# ---------------------------------------------------------------------------

class TestWorkflowGuards:
    def test_roles_need_table(self, tmp_path):
        s = Session.create(tmp_path / "root", "g")
        with pytest.raises(ValidationError, match="upload a dataset"):
            s.set_roles(RoleAssignment(dependent="y"))

    def test_spec_needs_roles(self, tmp_path):
        s = Session.create(tmp_path / "root", "g")
        s.set_table(load_csv(_write_csv(tmp_path / "d.csv")))
        with pytest.raises(ValidationError, match="assign variable roles"):
            s.set_spec(ModelSpec("LinearNIG"))

    def test_run_needs_spec(self, tmp_path):
        s = Session.create(tmp_path / "root", "g")
        with pytest.raises(ValidationError, match="model spec"):
            s.run(iterations=10)

    def test_mutation_refused_while_sampling(self, tmp_path):
        root, s = _linear_session(tmp_path)
        s.status = "sampling"
        with pytest.raises(ValidationError, match="sampling run is active"):
            s.transform("zscore", {"column": "x1"})

    def test_new_table_resets_chain(self, tmp_path):
        root, s = _linear_session(tmp_path, run=dict(iterations=20, seed=1))
        assert (s.dir / DRAWS_FILE).is_file()
        s.set_table(load_csv(_write_csv(tmp_path / "d2.csv", seed=8)))
        assert s.spec is None and s.roles is None and s.store is None
        assert not (s.dir / DRAWS_FILE).is_file()
        assert Session.restore(root, "s1").store is None

    def test_summary_requires_draws(self, tmp_path):
        root, s = _linear_session(tmp_path)
        with pytest.raises(ValidationError, match="no retained draws"):
            s.require_draws()

    def test_numeric_abort_rolls_back_the_segment(self, tmp_path, monkeypatch):
        root, s = _linear_session(tmp_path, run=dict(iterations=20, seed=1))
        committed = (s.dir / DRAWS_FILE).read_bytes()
        rows_before = s.store.n_rows
        real = session_mod.run_chain

        def explode(spec, data, config, resume=None, progress=None,
                    on_draw=None, cancel=None):
            on_draw(21, [21.0, 0.1, 0.2, 0.3], None)
            raise NumericError("kernel variance collapsed")

        monkeypatch.setattr(session_mod, "run_chain", explode)
        with pytest.raises(NumericError):
            s.run(iterations=10, append=True)
        assert s.status == "error"
        assert "collapsed" in s.error
        assert s.store.n_rows == rows_before
        assert (s.dir / DRAWS_FILE).read_bytes() == committed
        monkeypatch.setattr(session_mod, "run_chain", real)
        r = Session.restore(root, "s1")
        assert r.store.n_rows == rows_before
        r.run(iterations=10, append=True)          # recovers cleanly
        assert r.store.n_rows == rows_before + 10


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------

def _csv_text(n=50, seed=5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 1.0 + 2.0 * x + rng.normal(scale=0.7, size=n)
    return "y,x1\n" + "\n".join("%r,%r" % (float(a), float(b))
                                for a, b in zip(y, x)) + "\n"


@pytest.fixture()
def client(tmp_path):
    app = create_app(tmp_path / "svc")
    with TestClient(app) as c:
        yield c


def _wait_idle(client, sid, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        st = client.get("/api/sessions/%s/status" % sid).json()
        if st["status"] != "sampling":
            return st
        time.sleep(0.02)
    raise AssertionError("sampler did not finish in time")


def _fitted_session(client, sid="w", iterations=300, burn_in=50, thin=1,
                    create=True):
    if create:
        assert client.post("/api/sessions",
                           json={"id": sid}).status_code == 200
    r = client.post("/api/sessions/%s/data?name=sim" % sid,
                    content=_csv_text())
    assert r.status_code == 200
    r = client.post("/api/sessions/%s/roles" % sid,
                    json={"dependent": "y", "covariates": ["x1"]})
    assert r.status_code == 200
    r = client.post("/api/sessions/%s/model" % sid,
                    json={"family": "LinearNIG"})
    assert r.status_code == 200
    r = client.post("/api/sessions/%s/run" % sid,
                    json={"iterations": iterations, "burn_in": burn_in,
                          "thin": thin, "seed": 11})
    assert r.status_code == 200
    st = _wait_idle(client, sid)
    assert st["status"] == "idle", st
    return st


class TestServiceWorkflow:
    def test_unknown_session_404(self, client):
        r = client.get("/api/sessions/ghost")
        assert r.status_code == 404
        assert r.json()["error"] == "unknown_session"

    def test_full_workflow_and_gating(self, client):
        assert client.post("/api/sessions", json={"id": "w"}).status_code == 200
        listed = client.get("/api/sessions").json()["sessions"]
        assert {"id": "w", "status": "idle"} in listed

        # model before roles -> 422 with machine-readable reason
        r = client.post("/api/sessions/w/model", json={"family": "LinearNIG"})
        assert r.status_code == 422
        assert r.json()["error"] == "validation"

        # run before model -> 422
        r = client.post("/api/sessions/w/run", json={"iterations": 10})
        assert r.status_code == 422

        st = _fitted_session(client, "w", create=False)
        assert st["retained"] == 300      # every draw kept; burn-in is a marker
        assert st["iteration"] == 300

        # summaries before any draws was a 422; now they render
        rows = client.get("/api/sessions/w/summaries").json()["rows"]
        names = [row["parameter"] for row in rows]
        assert "sigma2" in names
        assert any(n.startswith("beta.") for n in names)

        # fit + description
        fit = client.get("/api/sessions/w/fit").json()
        assert 0.5 < fit["r_squared"] <= 1.0
        desc = client.get("/api/sessions/w/model/description").json()
        assert desc["family"] == "LinearNIG" and desc["lines"]

    def test_bad_spec_and_roles_are_422(self, client):
        client.post("/api/sessions", json={"id": "b"})
        client.post("/api/sessions/b/data", content=_csv_text())
        r = client.post("/api/sessions/b/roles",
                        json={"dependent": "nope"})
        assert r.status_code == 422
        client.post("/api/sessions/b/roles",
                    json={"dependent": "y", "covariates": ["x1"]})
        r = client.post("/api/sessions/b/model",
                        json={"family": "DDPMixture"})   # missing target
        assert r.status_code == 422
        r = client.post("/api/sessions/b/model",
                        json={"family": "HLM2"})         # needs groups
        assert r.status_code == 422

    def test_run_while_sampling_409_then_cancel(self, client):
        _fitted_session(client, "busy", iterations=200)
        r = client.post("/api/sessions/busy/run",
                        json={"iterations": 500000, "append": True})
        assert r.status_code == 200
        r2 = client.post("/api/sessions/busy/run", json={"iterations": 10})
        assert r2.status_code == 409
        assert r2.json()["error"] == "busy"
        r3 = client.post("/api/sessions/busy/cancel")
        assert r3.status_code == 200
        st = _wait_idle(client, "busy")
        assert st["status"] == "idle"
        assert st["retained"] >= 200      # the first segment is never lost

    def test_trace_window_cap_and_endpoints(self, client):
        _fitted_session(client, "tr", iterations=400, burn_in=0)
        full = client.get("/api/sessions/tr/trace/sigma2?window=4096").json()
        assert len(full["values"]) == 400
        sub = client.get("/api/sessions/tr/trace/sigma2?window=50").json()
        assert len(sub["values"]) == 50
        assert sub["iterations"][0] == full["iterations"][0]
        assert sub["iterations"][-1] == full["iterations"][-1]
        r = client.get("/api/sessions/tr/trace/nope")
        assert r.status_code == 422

    def test_summaries_are_byte_stable(self, client):
        _fitted_session(client, "stable")
        a = client.get("/api/sessions/stable/summaries").content
        b = client.get("/api/sessions/stable/summaries").content
        assert a == b
        pa = client.post("/api/sessions/stable/predict",
                         json={"x": {"x1": [0.0, 1.0]},
                               "functionals": ["mean", "variance"]}).content
        pb = client.post("/api/sessions/stable/predict",
                         json={"x": {"x1": [0.0, 1.0]},
                               "functionals": ["mean", "variance"]}).content
        assert pa == pb

    def test_predict_grid_and_curves(self, client):
        _fitted_session(client, "pred")
        r = client.post("/api/sessions/pred/predict",
                        json={"x": {"x1": "-2:-0.5:2"},
                              "functionals": ["mean", "quantile", "pdf"],
                              "u": 0.9})
        assert r.status_code == 200, r.text
        body = r.json()
        assert len(body["grid"]) == 9
        assert len(body["scalars"]["mean"]) == 9
        assert len(body["curves"]["pdf"]) == 9
        assert body["scalar_csv"].splitlines()[0] == "x1,mean,quantile"
        assert body["curve_csv"]["pdf"].startswith("y,")
        r = client.post("/api/sessions/pred/cate", json={"treatment": "x1"})
        assert r.status_code == 200
        assert isinstance(r.json()["contrast"], float)

    def test_convergence_panel_payload(self, client):
        _fitted_session(client, "conv")
        body = client.get("/api/sessions/conv/convergence").json()
        assert body["hairiness_target"] == 0.5
        assert body["hairiness_band"] == 0.05
        row = body["rows"][0]
        assert set(row) == {"parameter", "mcci_mean", "mcci_median",
                            "mcci_sd", "hairiness"}
        assert 0.0 <= row["hairiness"] <= 1.0

    def test_descriptive_endpoints(self, client):
        client.post("/api/sessions", json={"id": "d"})
        client.post("/api/sessions/d/data", content=_csv_text())
        cols = client.get("/api/sessions/d/descriptive").json()["columns"]
        assert [c["name"] for c in cols] == ["y", "x1"]
        assert cols[0]["n"] == 50
        dist = client.get("/api/sessions/d/descriptive/x1").json()
        assert len(dist["kde"]["grid"]) == len(dist["kde"]["density"])
        assert sum(dist["histogram"]["count"]) == 50
        rel = client.get("/api/sessions/d/relation?x=x1&y=y").json()
        assert len(rel["fitted"]) == len(rel["grid"])
        prev = client.get("/api/sessions/d/data/preview?rows=7").json()
        assert len(prev["rows"]) == 7 and prev["columns"] == ["y", "x1"]

    def test_transform_endpoint(self, client):
        client.post("/api/sessions", json={"id": "t"})
        client.post("/api/sessions/t/data", content=_csv_text())
        r = client.post("/api/sessions/t/transform",
                        json={"op": "zscore", "args": {"column": "x1"}})
        assert r.status_code == 200
        assert "Z:x1" in r.json()["columns"]
        r = client.post("/api/sessions/t/transform",
                        json={"op": "nope", "args": {}})
        assert r.status_code == 422


class TestServiceArtifacts:
    def test_download_reupload_fingerprints_match(self, client):
        _fitted_session(client, "art")
        model = client.get("/api/sessions/art/artifacts/model").content
        mc1 = client.get("/api/sessions/art/artifacts/mc1").content
        manifest = json.loads(
            client.get("/api/sessions/art/artifacts/manifest").content)
        assert client.post("/api/sessions/art/artifacts/model",
                           content=model).status_code == 200
        assert client.post("/api/sessions/art/artifacts/mc1",
                           content=mc1).status_code == 200
        manifest2 = json.loads(
            client.get("/api/sessions/art/artifacts/manifest").content)
        for name in (MODEL_FILE, DRAWS_FILE):
            assert (manifest2["files"][name]["fingerprint"]
                    == manifest["files"][name]["fingerprint"])
        st = client.get("/api/sessions/art/status").json()
        assert st["retained"] == 300

    def test_inconsistent_upload_is_refused(self, client):
        _fitted_session(client, "bad")
        mc1 = client.get("/api/sessions/bad/artifacts/mc1").content
        broken = mc1.replace(b"iteration", b"iterXtion", 1)
        r = client.post("/api/sessions/bad/artifacts/mc1", content=broken)
        assert r.status_code == 422
        assert "header" in r.json()["reason"]

    def test_unknown_artifact_kind(self, client):
        client.post("/api/sessions", json={"id": "k"})
        assert client.get(
            "/api/sessions/k/artifacts/zip").status_code == 422
        assert client.get(
            "/api/sessions/k/artifacts/res").status_code == 422  # not yet

    def test_raw_download_matches_disk(self, client, tmp_path):
        _fitted_session(client, "raw")
        manager = client.app.state.manager
        on_disk = (manager.root / "raw" / DRAWS_FILE).read_bytes()
        assert client.get(
            "/api/sessions/raw/artifacts/mc1").content == on_disk
