"""Local HTTP + JSON service around analysis sessions.

Endpoints wrap the same delimited payloads the files hold; artifact routes
return the raw files themselves.  The numbers in a JSON envelope are emitted
with full ``repr`` precision and non-finite values become ``null`` (the
delimited payloads keep their textual ``inf``/``nan`` forms), so a fixed
session state always serializes to the same bytes.

The service binds to the loopback interface by default: it is a
single-analyst desktop tool, not a deployment target, and ships without
authentication.
"""

import io
import math
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .data import RoleAssignment, load_csv
from .descriptive import (
    histogram,
    kde,
    kernel_regression,
    scott_bivariate_binwidths,
    silverman_bandwidth,
    univariate_summary,
)
from .diagnostics import (
    HAIRINESS_BAND,
    HAIRINESS_TARGET,
    batch_means_mcci,
    cusum_hairiness,
    summarize,
    summary_table_csv,
    trace,
)
from .errors import NumericError, ValidationError
from .models import ModelSpec, describe_spec
from .predictive import PredictiveQuery, cate, parse_grid, pd_functional
from .session import (
    DATA_FILE,
    DRAWS_FILE,
    MANIFEST_FILE,
    MODEL_FILE,
    RESIDUALS_FILE,
    STATES_FILE,
    Session,
    session_root,
)

ARTIFACT_FILES = {
    "dat": DATA_FILE,
    "model": MODEL_FILE,
    "mc1": DRAWS_FILE,
    "res": RESIDUALS_FILE,
    "states": STATES_FILE,
    "manifest": MANIFEST_FILE,
}
TRACE_POINT_CAP = 4096          # plotting payload bound; endpoints preserved
DESCRIPTIVE_GRID = 200


class UnknownSessionError(Exception):
    pass


def _jsonsafe(obj):
    """Recursively make numpy/float payloads strict-JSON serializable."""
    if isinstance(obj, dict):
        return {k: _jsonsafe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonsafe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonsafe(v) for v in obj.tolist()]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


class _Entry:
    """A live session plus its sampling worker bookkeeping."""

    def __init__(self, session):
        self.session = session
        self.worker = None
        self.cancel = None


class SessionManager:
    """Owns the live Session objects the HTTP handlers operate on."""

    def __init__(self, root=None):
        self.root = Path(session_root(root))
        self._entries = {}
        self._lock = threading.Lock()

    def create(self, sid=None):
        with self._lock:
            session = Session.create(self.root, sid)
            entry = _Entry(session)
            self._entries[session.id] = entry
            return entry

    def get(self, sid):
        with self._lock:
            entry = self._entries.get(sid)
            if entry is None:
                if not Session.exists(self.root, sid):
                    raise UnknownSessionError(sid)
                entry = _Entry(Session.restore(self.root, sid))
                self._entries[sid] = entry
            return entry

    def listing(self):
        with self._lock:
            live = dict(self._entries)
        rows = []
        for sid in sorted(set(live) | set(Session.list_ids(self.root))):
            status = live[sid].session.status if sid in live else "idle"
            rows.append({"id": sid, "status": status})
        return rows


def _spawn_run(entry, payload):
    """Claim the session for sampling and start the worker thread.

    The claim happens under the session lock so two concurrent run requests
    cannot both pass the busy check; everything after the claim happens on
    the worker.
    """
    session = entry.session
    iterations = int(payload.get("iterations", 0))
    burn_in = payload.get("burn_in")
    thin = payload.get("thin")
    seed = payload.get("seed")
    append = bool(payload.get("append", False))
    session.check_run_request(iterations, thin=thin, append=append)
    session.status = "sampling"
    session.progress = 0.0
    session.error = None
    entry.cancel = threading.Event()

    def work():
        try:
            session.run(iterations, burn_in=burn_in, thin=thin, seed=seed,
                        append=append, cancel=entry.cancel.is_set)
        except NumericError:
            pass                      # status/error already recorded
        except Exception as exc:      # pre-flight surprises: report, don't die
            session.status = "error"
            session.error = str(exc)

    entry.worker = threading.Thread(target=work, daemon=True)
    entry.worker.start()


def _table_info(session):
    return session.info()


def _summary_rows(rows):
    return [{
        "parameter": r.name, "mean": r.mean, "median": r.median, "sd": r.sd,
        "q2.5": r.q025, "q25": r.q25, "q75": r.q75, "q97.5": r.q975,
        "mcci_mean": r.mcci_mean, "mcci_median": r.mcci_median,
        "mcci_sd": r.mcci_sd,
    } for r in rows]


def create_app(root=None, static_dir=None):
    """Build the FastAPI app; ``root`` overrides the session directory."""
    manager = SessionManager(root)
    app = FastAPI(title="bnpreg", docs_url=None, redoc_url=None)
    app.state.manager = manager

    @app.exception_handler(ValidationError)
    def _h_validation(request, exc):
        return JSONResponse(status_code=422,
                            content={"error": "validation", "reason": str(exc)})

    @app.exception_handler(NumericError)
    def _h_numeric(request, exc):
        return JSONResponse(status_code=500,
                            content={"error": "numeric", "reason": str(exc)})

    @app.exception_handler(UnknownSessionError)
    def _h_unknown(request, exc):
        return JSONResponse(
            status_code=404,
            content={"error": "unknown_session",
                     "reason": "no session %r" % (exc.args[0],)})

    # -- session lifecycle ---------------------------------------------------

    @app.post("/api/sessions")
    def create_session(payload: dict = None):
        entry = manager.create((payload or {}).get("id"))
        return _jsonsafe(_table_info(entry.session))

    @app.get("/api/sessions")
    def list_sessions():
        return {"sessions": manager.listing()}

    @app.get("/api/sessions/{sid}")
    def session_info(sid: str):
        entry = manager.get(sid)
        with entry.session.lock:
            return _jsonsafe(_table_info(entry.session))

    # -- data / transforms / roles / model ------------------------------------

    @app.post("/api/sessions/{sid}/data")
    async def upload_data(sid: str, request: Request, name: str = "data"):
        entry = manager.get(sid)
        body = (await request.body()).decode("utf-8")
        table = load_csv(io.StringIO(body), name=name)
        with entry.session.lock:
            entry.session.set_table(table)
            return _jsonsafe(_table_info(entry.session))

    @app.get("/api/sessions/{sid}/data/preview")
    def preview_data(sid: str, rows: int = Query(default=20, ge=1, le=1000)):
        entry = manager.get(sid)
        with entry.session.lock:
            t = entry.session.table
            if t is None:
                raise ValidationError("no dataset uploaded yet")
            k = min(rows, t.n_rows)
            body = [[None if t.missing[i, j] else float(t.values[i, j])
                     for j in range(t.n_cols)] for i in range(k)]
            return _jsonsafe({"name": t.name, "columns": list(t.columns),
                              "n_rows": t.n_rows, "rows": body})

    @app.post("/api/sessions/{sid}/transform")
    def apply_transform(sid: str, payload: dict):
        entry = manager.get(sid)
        with entry.session.lock:
            table = entry.session.transform(payload.get("op"),
                                            payload.get("args") or {})
            return _jsonsafe({"columns": list(table.columns),
                              "n_rows": table.n_rows})

    @app.post("/api/sessions/{sid}/roles")
    def assign_roles(sid: str, payload: dict):
        entry = manager.get(sid)
        if not payload.get("dependent"):
            raise ValidationError("role assignment needs a dependent column")
        roles = RoleAssignment(
            dependent=payload["dependent"],
            covariates=tuple(payload.get("covariates") or ()),
            group_level2=payload.get("group_level2"),
            weights=payload.get("weights"),
            censor_lb=payload.get("censor_lb"),
            censor_ub=payload.get("censor_ub"))
        with entry.session.lock:
            entry.session.set_roles(roles)
            return _jsonsafe(_table_info(entry.session))

    @app.post("/api/sessions/{sid}/model")
    def set_model(sid: str, payload: dict):
        entry = manager.get(sid)
        try:
            spec = ModelSpec.from_dict(payload)
        except (KeyError, TypeError) as exc:
            raise ValidationError("bad model spec: %s" % (exc,)) from None
        with entry.session.lock:
            entry.session.set_spec(spec)
            names = list(entry.session.regression_data().x_names)
            return _jsonsafe({"spec": spec.to_dict(),
                              "description": describe_spec(spec, names)})

    @app.get("/api/sessions/{sid}/model/description")
    def model_description(sid: str):
        entry = manager.get(sid)
        with entry.session.lock:
            s = entry.session
            if s.spec is None:
                raise ValidationError("no model spec set")
            names = (list(s.regression_data().x_names)
                     if s.roles is not None else None)
            return _jsonsafe(describe_spec(s.spec, names))

    # -- sampling ------------------------------------------------------------

    @app.post("/api/sessions/{sid}/run")
    def start_run(sid: str, payload: dict):
        entry = manager.get(sid)
        with entry.session.lock:
            if entry.session.status == "sampling":
                return JSONResponse(
                    status_code=409,
                    content={"error": "busy",
                             "reason": "a sampling run is active"})
            _spawn_run(entry, payload)
        return {"status": "sampling"}

    @app.get("/api/sessions/{sid}/status")
    def run_status(sid: str):
        entry = manager.get(sid)
        s = entry.session
        settings = s.settings or {}
        return _jsonsafe({
            "status": s.status, "progress": s.progress, "error": s.error,
            "retained": 0 if s.store is None else s.store.n_rows,
            "iteration": 0 if s.chain_state is None else s.chain_state.iteration,
            "total_iterations": settings.get("total_iterations"),
            "burn_in": settings.get("burn_in"),
            "thin": settings.get("thin"), "seed": settings.get("seed")})

    @app.post("/api/sessions/{sid}/cancel")
    def cancel_run(sid: str):
        entry = manager.get(sid)
        if entry.cancel is not None:
            entry.cancel.set()
        if entry.worker is not None:
            entry.worker.join(timeout=60.0)
        return {"status": entry.session.status}

    # -- posterior outputs ---------------------------------------------------

    @app.get("/api/sessions/{sid}/summaries")
    def summaries(sid: str):
        entry = manager.get(sid)
        with entry.session.lock:
            rows = summarize(entry.session.require_draws())
            return _jsonsafe({"rows": _summary_rows(rows),
                              "csv": summary_table_csv(rows)})

    @app.get("/api/sessions/{sid}/trace/{parameter}")
    def trace_series(sid: str, parameter: str,
                     window: int = Query(default=TRACE_POINT_CAP, ge=1)):
        entry = manager.get(sid)
        with entry.session.lock:
            store = entry.session.require_draws()
            if parameter not in store.columns:
                raise ValidationError("no sampled parameter %r" % (parameter,))
            its, vals = trace(store, parameter,
                              window=min(window, TRACE_POINT_CAP))
            return _jsonsafe({"parameter": parameter,
                              "iterations": its, "values": vals})

    @app.get("/api/sessions/{sid}/convergence")
    def convergence(sid: str):
        entry = manager.get(sid)
        with entry.session.lock:
            store = entry.session.require_draws()
            retained = store.column("iteration") > store.burn_in
            rows = []
            for name in store.columns:
                if name == "iteration":
                    continue
                v = store.column(name)[retained]
                if v.size == 0:
                    raise ValidationError("no draws retained after burn-in")
                cells = {"parameter": name}
                for estimand in ("mean", "median", "sd"):
                    try:
                        hw = batch_means_mcci(
                            v, "quantile" if estimand == "median" else estimand,
                            q=0.5)
                    except ValidationError:
                        hw = None
                    cells["mcci_%s" % estimand] = hw
                cells["hairiness"] = cusum_hairiness(v)
                rows.append(cells)
            return _jsonsafe({"rows": rows,
                              "hairiness_target": HAIRINESS_TARGET,
                              "hairiness_band": HAIRINESS_BAND})

    @app.get("/api/sessions/{sid}/fit")
    def fit(sid: str, obs_weight: float = 1.0):
        entry = manager.get(sid)
        with entry.session.lock:
            report = entry.session.fit(obs_weight=obs_weight)
            out = report.to_dict()
            out.update({
                "e_n": report.e_n, "v_n": report.v_n,
                "residuals": report.residuals,
                "outliers_2": report.outliers_2,
                "outliers_3": report.outliers_3})
            return _jsonsafe(out)

    # -- descriptive statistics ------------------------------------------------

    @app.get("/api/sessions/{sid}/descriptive")
    def descriptive(sid: str):
        entry = manager.get(sid)
        with entry.session.lock:
            t = entry.session.table
            if t is None:
                raise ValidationError("no dataset uploaded yet")
            cols = []
            for j, name in enumerate(t.columns):
                cell = {"name": name}
                try:
                    cell.update(univariate_summary(t.values[:, j]).as_dict())
                except ValidationError as exc:
                    cell["error"] = str(exc)
                cols.append(cell)
            return _jsonsafe({"columns": cols})

    @app.get("/api/sessions/{sid}/descriptive/{column}")
    def column_distribution(sid: str, column: str, width: float = None):
        entry = manager.get(sid)
        with entry.session.lock:
            t = entry.session.table
            if t is None:
                raise ValidationError("no dataset uploaded yet")
            values = t.column(column)[0]
            summary = univariate_summary(values)
            left, right, counts = histogram(values, width=width)
            h = silverman_bandwidth(values)
            grid = np.linspace(summary.min - 3 * h, summary.max + 3 * h,
                               DESCRIPTIVE_GRID)
            return _jsonsafe({
                "column": column, "summary": summary.as_dict(),
                "histogram": {"left": left, "right": right, "count": counts},
                "kde": {"grid": grid, "density": kde(values, grid, h),
                        "bandwidth": h}})

    @app.get("/api/sessions/{sid}/relation")
    def relation(sid: str, x: str, y: str):
        entry = manager.get(sid)
        with entry.session.lock:
            t = entry.session.table
            if t is None:
                raise ValidationError("no dataset uploaded yet")
            xv = t.column(x)[0]
            yv = t.column(y)[0]
            ok = ~(np.isnan(xv) | np.isnan(yv))
            if not ok.any():
                raise ValidationError("no rows observed on both columns")
            grid = np.linspace(float(xv[ok].min()), float(xv[ok].max()),
                               DESCRIPTIVE_GRID)
            wx, wy = scott_bivariate_binwidths(xv[ok], yv[ok])
            return _jsonsafe({
                "x": x, "y": y, "grid": grid,
                "fitted": kernel_regression(xv, yv, grid),
                "bin_width_x": wx, "bin_width_y": wy,
                "points": {"x": xv[ok], "y": yv[ok]}})

    # -- posterior predictive ---------------------------------------------------

    @app.post("/api/sessions/{sid}/predict")
    def predict(sid: str, payload: dict):
        entry = manager.get(sid)
        with entry.session.lock:
            s = entry.session
            posterior = s.posterior()
            data = s.regression_data()
            focal = payload.get("x") or payload.get("focal")
            if not isinstance(focal, dict) or not focal:
                raise ValidationError(
                    "predict needs a focal covariate map under 'x'")
            y_grid = payload.get("y_grid")
            if isinstance(y_grid, str):
                y_grid = parse_grid(y_grid)
            query = PredictiveQuery(
                focal=focal,
                functionals=list(payload.get("functionals") or ["mean"]),
                profile_method=payload.get("profile_method", "grand_mean"),
                y_grid=y_grid,
                u=float(payload.get("u", 0.5)),
                obs_weight=float(payload.get("obs_weight", 1.0)),
                k_clusters=payload.get("k_clusters"))
            rng = np.random.default_rng(
                (s.settings or {}).get("seed", 0))
            table = pd_functional(posterior, data, query, rng=rng)
            out = {
                "focal_names": list(table.focal_names),
                "grid": table.grid,
                "scalars": dict(table.scalars),
                "y_grid": table.y_grid,
                "curves": dict(table.curves),
            }
            if table.scalars:
                out["scalar_csv"] = table.scalar_csv()
            if table.curves:
                out["curve_csv"] = {name: table.curve_csv(name)
                                    for name in table.curves}
            return _jsonsafe(out)

    @app.post("/api/sessions/{sid}/cate")
    def treatment_contrast(sid: str, payload: dict):
        entry = manager.get(sid)
        with entry.session.lock:
            s = entry.session
            treatment = payload.get("treatment")
            if not treatment:
                raise ValidationError("cate needs a treatment column name")
            value = cate(
                s.posterior(), s.regression_data(), treatment,
                functional=payload.get("functional", "mean"),
                profile_method=payload.get("profile_method",
                                           "partial_dependence"),
                u=float(payload.get("u", 0.5)),
                rng=np.random.default_rng((s.settings or {}).get("seed", 0)))
            return _jsonsafe({"treatment": treatment, "contrast": value})

    # -- artifacts -------------------------------------------------------------

    @app.get("/api/sessions/{sid}/artifacts/{kind}")
    def download_artifact(sid: str, kind: str):
        entry = manager.get(sid)
        name = ARTIFACT_FILES.get(kind)
        if name is None:
            raise ValidationError(
                "unknown artifact kind %r; expected one of %s"
                % (kind, sorted(ARTIFACT_FILES)))
        path = entry.session.dir / name
        if not path.is_file():
            raise ValidationError("artifact %s not present yet" % (name,))
        media = ("application/json" if name.endswith((".model", ".json"))
                 else "text/plain; charset=utf-8")
        return Response(content=path.read_bytes(), media_type=media)

    @app.post("/api/sessions/{sid}/artifacts/{kind}")
    async def upload_artifact(sid: str, kind: str, request: Request):
        entry = manager.get(sid)
        name = ARTIFACT_FILES.get(kind)
        if name is None or name == MANIFEST_FILE:
            raise ValidationError("cannot upload artifact kind %r" % (kind,))
        body = await request.body()
        lock = entry.session.lock
        with lock:
            if entry.session.status == "sampling":
                raise ValidationError("a sampling run is active in this session")
            path = entry.session.dir / name
            previous = path.read_bytes() if path.is_file() else None
            path.write_bytes(body)
            entry.session._commit_manifest()
            try:
                restored = Session.restore(manager.root, sid)
            except ValidationError:
                # inconsistent upload: put the old artifact back untouched
                if previous is None:
                    path.unlink()
                else:
                    path.write_bytes(previous)
                entry.session._commit_manifest()
                raise
            restored.lock = lock          # waiting handlers keep their lock
            entry.session = restored
            return _jsonsafe(_table_info(restored))

    # -- static front-end -------------------------------------------------------

    ui_dir = Path(static_dir) if static_dir else Path("frontend") / "dist"
    if ui_dir.is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")
    else:
        @app.get("/")
        def index():
            return {"service": "bnpreg", "api": "/api/sessions"}

    return app


def serve(root=None, host="127.0.0.1", port=8711, static_dir=None):
    """Run the service on the loopback interface (blocking)."""
    import uvicorn

    uvicorn.run(create_app(root, static_dir=static_dir), host=host, port=port,
                log_level="warning")
