"""Analysis sessions: one directory per analysis binding data, model, chain,
and outputs, with fingerprinted persistence and crash-safe draw appending.

Layout of a session directory::

    data.dat       comma-delimited table (current, post-transform)
    model.model    JSON record: lineage, roles, model spec, sampler settings,
                   chain state - everything needed to resume bit-compatibly
    samples.mc1    retained draws, CSV, append-only
    states.jsonl   per-retained-draw parameter states, append-only
    residuals.res  per-observation predictive mean/variance/residual
    manifest.json  committed byte counts and 64-bit fingerprints

The manifest is the commit record: the append-only files (``samples.mc1``,
``states.jsonl``) may legitimately be longer on disk than their committed
length after a crash mid-append, in which case restore truncates them back
to the last committed byte.  Any other disagreement between the manifest
and the files is treated as tampering and refused.
"""

import hashlib
import io
import json
import os
import threading
import uuid
from pathlib import Path

import numpy as np

from .data import (
    DataTable,
    RoleAssignment,
    dummy_code,
    interact,
    lag,
    load_csv,
    parse_censoring,
    recode_missing,
    vectorize,
    write_csv,
    zscore,
)
from .errors import NumericError, ValidationError
from .mcmc import ChainState, SampleStore, SamplerConfig, make_sampler, run_chain
from .models import ModelSpec, build_design, validate_spec_for_data
from .predictive import PosteriorSample, fit_report

SESSION_ROOT_ENV = "BNPREG_SESSION_ROOT"
DEFAULT_ROOT = "bnpreg_sessions"

DATA_FILE = "data.dat"
MODEL_FILE = "model.model"
DRAWS_FILE = "samples.mc1"
STATES_FILE = "states.jsonl"
RESIDUALS_FILE = "residuals.res"
MANIFEST_FILE = "manifest.json"
COMMANDS_FILE = "commands.jsonl"

APPEND_ONLY = (DRAWS_FILE, STATES_FILE)
_STATE_FAMILIES = ("DDPMixture", "InfiniteProbits")

TRANSFORM_OPS = ("zscore", "dummy_code", "lag", "interact", "vectorize",
                 "recode_missing", "rename")


def session_root(explicit=None):
    """Resolve the session root directory: flag, then env var, then default."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(SESSION_ROOT_ENV, DEFAULT_ROOT))


def fingerprint(data):
    """64-bit content hash, hex-encoded."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _stable_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _fmt_value(v):
    return repr(float(v))


def apply_transform(table, op, args):
    """Dispatch one named transform; ``args`` is a plain dict."""
    if op not in TRANSFORM_OPS:
        raise ValidationError("unknown transform %r (one of %s)"
                              % (op, ", ".join(TRANSFORM_OPS)))
    if op == "zscore":
        return zscore(table, args["column"])
    if op == "dummy_code":
        return dummy_code(table, args["column"], args["reference"])
    if op == "lag":
        return lag(table, args["column"], int(args["k"]))
    if op == "interact":
        return interact(table, args["column_a"], args["column_b"])
    if op == "vectorize":
        return vectorize(table, list(args["response_columns"]),
                         args["id_column"])
    if op == "recode_missing":
        return recode_missing(table, args["column"], args["codes"])
    return table.rename(args["column"], args["to"])


class Session:
    """One analysis: data + roles + model + chain + retained draws."""

    def __init__(self, root, sid):
        self.id = sid
        self.dir = Path(root) / sid
        self.table = None
        self.roles = None
        self.spec = None
        self.chain_state = None
        self.store = None
        self.state_log = []          # mixture param states per retained row
        self.settings = None         # dict: total_iterations/burn_in/thin/seed
        self.status = "idle"
        self.progress = 0.0
        self.error = None
        # Serializes state mutation against readers when a service drives the
        # session from several threads; a lone CLI process never contends.
        self.lock = threading.RLock()

    # -- constructors --------------------------------------------------------

    @classmethod
    def create(cls, root, sid=None):
        sid = sid or uuid.uuid4().hex[:12]
        if not sid.replace("-", "").replace("_", "").isalnum():
            raise ValidationError("session id must be alphanumeric-_-")
        s = cls(root, sid)
        if s.dir.exists():
            raise ValidationError("session %r already exists" % sid)
        s.dir.mkdir(parents=True)
        s.persist()
        return s

    @classmethod
    def exists(cls, root, sid):
        return (Path(root) / sid / MANIFEST_FILE).is_file()

    @classmethod
    def list_ids(cls, root):
        root = Path(root)
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir()
                      if (p / MANIFEST_FILE).is_file())

    # -- persistence ---------------------------------------------------------

    def _model_record(self):
        rec = {"format": "bnpreg-session-1"}
        if self.table is not None:
            rec["table"] = {
                "name": self.table.name,
                "columns": list(self.table.columns),
                "lineage": [[op, list(inputs), params]
                            for op, inputs, params in self.table.lineage],
            }
            rec["data_fingerprint"] = fingerprint(self._data_text())
        rec["roles"] = None if self.roles is None else {
            "dependent": self.roles.dependent,
            "covariates": list(self.roles.covariates),
            "group_level2": self.roles.group_level2,
            "weights": self.roles.weights,
            "censor_lb": self.roles.censor_lb,
            "censor_ub": self.roles.censor_ub,
        }
        rec["spec"] = None if self.spec is None else self.spec.to_dict()
        rec["settings"] = self.settings
        rec["chain_state"] = (None if self.chain_state is None
                              else self.chain_state.to_jsonable(self.spec.family))
        rec["store_columns"] = None if self.store is None else self.store.columns
        return rec

    def _data_text(self):
        buf = io.StringIO()
        write_csv(self.table, buf)
        return buf.getvalue()

    def persist(self):
        """Write every artifact and commit the manifest."""
        if self.table is not None:
            (self.dir / DATA_FILE).write_text(self._data_text())
        (self.dir / MODEL_FILE).write_text(_stable_json(self._model_record()))
        self._commit_manifest()
        return self.dir

    def _commit_manifest(self):
        files = {}
        for name in (DATA_FILE, MODEL_FILE, DRAWS_FILE, STATES_FILE,
                     RESIDUALS_FILE):
            path = self.dir / name
            if path.is_file():
                raw = path.read_bytes()
                files[name] = {"bytes": len(raw), "fingerprint": fingerprint(raw)}
        manifest = {"session": self.id, "files": files}
        tmp = self.dir / (MANIFEST_FILE + ".tmp")
        tmp.write_text(_stable_json(manifest))
        tmp.replace(self.dir / MANIFEST_FILE)

    @classmethod
    def restore(cls, root, sid):
        """Rebuild a session from disk, verifying the manifest first."""
        s = cls(root, sid)
        mpath = s.dir / MANIFEST_FILE
        if not mpath.is_file():
            raise ValidationError("no session %r under %s" % (sid, root))
        manifest = json.loads(mpath.read_text())
        for name, entry in manifest["files"].items():
            path = s.dir / name
            if not path.is_file():
                raise ValidationError(
                    "session %r is missing committed file %s" % (sid, name))
            raw = path.read_bytes()
            if len(raw) > entry["bytes"] and name in APPEND_ONLY:
                # crash between appended rows: drop the uncommitted tail
                raw = raw[:entry["bytes"]]
                path.write_bytes(raw)
            if len(raw) != entry["bytes"] or fingerprint(raw) != entry["fingerprint"]:
                raise ValidationError(
                    "fingerprint mismatch for %s in session %r" % (name, sid))
        dpath = s.dir / DATA_FILE
        if dpath.is_file():
            s.table = load_csv(dpath)
        record = json.loads((s.dir / MODEL_FILE).read_text())
        if s.table is not None:
            if record.get("data_fingerprint") != fingerprint(s._data_text()):
                raise ValidationError(
                    "model record does not match the data file in %r" % sid)
            if record.get("table"):
                s.table = DataTable(
                    record["table"]["name"], s.table.columns, s.table.values,
                    lineage=tuple((op, tuple(inputs), params) for
                                  op, inputs, params in record["table"]["lineage"]))
        if record.get("roles"):
            r = record["roles"]
            s.roles = RoleAssignment(
                dependent=r["dependent"], covariates=tuple(r["covariates"]),
                group_level2=r.get("group_level2"), weights=r.get("weights"),
                censor_lb=r.get("censor_lb"), censor_ub=r.get("censor_ub"))
        if record.get("spec"):
            s.spec = ModelSpec.from_dict(record["spec"])
        s.settings = record.get("settings")
        if record.get("chain_state"):
            s.chain_state = ChainState.from_jsonable(record["chain_state"])
        if record.get("store_columns"):
            s.store = _read_draws(s.dir / DRAWS_FILE, record["store_columns"],
                                  s.settings)
            s.state_log = _read_states(s.dir / STATES_FILE)
        return s

    # -- workflow steps ------------------------------------------------------

    def _forbid_while_sampling(self):
        if self.status == "sampling":
            raise ValidationError("a sampling run is active in this session")

    def set_table(self, table, reset=True):
        self._forbid_while_sampling()
        self.table = table
        if reset:
            self.roles = None
            self.spec = None
            self._reset_chain()
        self.persist()

    def _reset_chain(self):
        self.chain_state = None
        self.store = None
        self.state_log = []
        self.settings = None
        self.error = None
        for name in (DRAWS_FILE, STATES_FILE, RESIDUALS_FILE):
            path = self.dir / name
            if path.is_file():
                path.unlink()

    def transform(self, op, args):
        self._forbid_while_sampling()
        if self.table is None:
            raise ValidationError("upload a dataset before transforming")
        self.table = apply_transform(self.table, op, args)
        self.persist()
        return self.table

    def set_roles(self, roles):
        self._forbid_while_sampling()
        if self.table is None:
            raise ValidationError("upload a dataset before assigning roles")
        roles.validate(self.table)
        build_design(self.table, roles)   # fail fast on degenerate designs
        self.roles = roles
        self._reset_chain()
        self.persist()

    def set_spec(self, spec):
        self._forbid_while_sampling()
        if self.roles is None:
            raise ValidationError("assign variable roles before the model")
        validate_spec_for_data(spec, self.regression_data())
        self.spec = spec
        self._reset_chain()
        self.persist()

    def regression_data(self):
        if self.table is None or self.roles is None:
            raise ValidationError("session needs data and roles first")
        return build_design(self.table, self.roles)

    # -- sampling ------------------------------------------------------------

    def _draws_path(self):
        return self.dir / DRAWS_FILE

    def check_run_request(self, iterations, thin=None, append=False):
        """Validate a run request without changing any state.

        Returns the design arrays so the caller can hand them to the
        sampler; services call this synchronously to reject bad requests
        before a worker thread is spawned.
        """
        if self.spec is None:
            raise ValidationError("set a model spec before running")
        if iterations < 1:
            raise ValidationError("iteration count must be positive")
        data = self.regression_data()
        if (append and self.chain_state is not None and self.settings
                and thin not in (None, self.settings["thin"])):
            raise ValidationError(
                "appended runs keep the original thinning interval")
        return data

    def run(self, iterations, burn_in=None, thin=None, seed=None, append=False,
            progress=None, cancel=None):
        """Advance the chain by ``iterations`` and commit the retained rows.

        A fresh run starts at the given seed; ``append=True`` continues the
        stored chain state (raising the global iteration target), which keeps
        the draw stream bit-identical to one longer uninterrupted run.
        Appended runs inherit the original thinning interval and seed.
        """
        with self.lock:
            data = self.check_run_request(iterations, thin=thin, append=append)
            if append and self.chain_state is not None:
                settings = dict(self.settings)
                settings["total_iterations"] = (self.chain_state.iteration
                                                + iterations)
                resume = self.chain_state
            else:
                if self.chain_state is not None or (self.store is not None
                                                    and self.store.n_rows):
                    self._reset_chain()
                    self.persist()  # commit the deletions before sampling
                settings = {"total_iterations": int(iterations),
                            "burn_in": 0 if burn_in is None else int(burn_in),
                            "thin": 1 if thin is None else int(thin),
                            "seed": 0 if seed is None else int(seed)}
                resume = None
            config = SamplerConfig(
                total_iterations=settings["total_iterations"],
                burn_in=settings["burn_in"], thin=settings["thin"],
                rng_seed=settings["seed"])
            columns = (["iteration"]
                       + make_sampler(self.spec, data, config).draw_names())
            if self.store is None:
                self.store = SampleStore(columns, thin=settings["thin"],
                                         burn_in=settings["burn_in"])
            keep_states = self.spec.family in _STATE_FAMILIES
            self.settings = settings
            self.status = "sampling"
            self.progress = 0.0
            self.error = None
            states_path = self.dir / STATES_FILE
            pre_draw_bytes = (self._draws_path().stat().st_size
                              if self._draws_path().is_file() else 0)
            pre_state_bytes = (states_path.stat().st_size
                               if states_path.is_file() else 0)
            # Draws stream to the files as they happen (crash safety comes
            # from the committed byte counts in the manifest), but the
            # in-memory store only absorbs the segment at the end: concurrent
            # readers keep seeing the last committed snapshot while sampling.
            seg_rows, seg_states = [], []
            draws_f = open(self._draws_path(), "a")
            states_f = open(states_path, "a") if keep_states else None
            if draws_f.tell() == 0:
                draws_f.write(",".join(columns) + "\n")
        try:
            def on_draw(iteration, row, state):
                # row = [iteration, <draw values...>] as stored in the delta
                draws_f.write(_format_row(iteration, row[1:]) + "\n")
                seg_rows.append(np.asarray(row, dtype=float))
                if keep_states:
                    entry = {"iteration": int(iteration),
                             "params": state.params.to_jsonable()}
                    if state.latent.z is not None:
                        entry["z"] = [int(k) for k in state.latent.z]
                    states_f.write(_stable_json(entry) + "\n")
                    seg_states.append(entry)

            def _progress(frac, iteration):
                self.progress = frac
                if progress is not None:
                    progress(frac, iteration)

            state, delta = run_chain(self.spec, data, config, resume=resume,
                                     progress=_progress, on_draw=on_draw,
                                     cancel=cancel)
        except NumericError as exc:
            # roll the uncommitted segment back so the stored draws stay
            # consistent with the last committed chain state
            with self.lock:
                draws_f.close()
                if states_f:
                    states_f.close()
                _truncate_or_remove(self._draws_path(), pre_draw_bytes)
                if keep_states:
                    _truncate_or_remove(states_path, pre_state_bytes)
                self.status = "error"
                self.error = str(exc)
                self.persist()
            raise
        with self.lock:
            draws_f.close()
            if states_f:
                states_f.close()
            for row in seg_rows:
                self.store.append(row)
            self.state_log.extend(seg_states)
            self.chain_state = state
            # a cancelled run stopped short of its target: record where the
            # chain actually is so appends and replays line up exactly
            self.settings["total_iterations"] = state.iteration
            self.status = "idle"
            self.progress = 1.0
            self.persist()
        return delta

    # -- derived outputs -----------------------------------------------------

    def require_draws(self):
        if self.store is None or self.store.n_rows == 0:
            raise ValidationError("no retained draws: run the sampler first")
        return self.store

    def posterior(self, include_burn_in=False):
        self.require_draws()
        burn = self.settings["burn_in"] if self.settings else 0
        if self.spec.family in _STATE_FAMILIES:
            return PosteriorSample.from_states(
                self.spec, self.state_log, burn_in=burn,
                include_burn_in=include_burn_in)
        return PosteriorSample.from_store(
            self.spec, self.store, burn_in=burn,
            include_burn_in=include_burn_in)

    def fit(self, obs_weight=1.0):
        """Fit statistics over all stored draws; writes the residual file."""
        report = fit_report(self.posterior(include_burn_in=True),
                            self.regression_data(), obs_weight=obs_weight)
        lines = ["row,e_n,v_n,residual"]
        for i in range(report.e_n.size):
            lines.append("%d,%s,%s,%s" % (
                i + 1, _fmt_value(report.e_n[i]), _fmt_value(report.v_n[i]),
                _fmt_value(report.residuals[i])))
        (self.dir / RESIDUALS_FILE).write_text("\n".join(lines) + "\n")
        self._commit_manifest()
        return report

    def info(self):
        d = {"id": self.id, "status": self.status,
             "progress": round(float(self.progress), 4), "error": self.error,
             "retained": 0 if self.store is None else self.store.n_rows,
             "iteration": 0 if self.chain_state is None
             else self.chain_state.iteration,
             "settings": self.settings,
             "table": None, "roles": None, "spec": None}
        if self.table is not None:
            d["table"] = {"name": self.table.name,
                          "columns": list(self.table.columns),
                          "n_rows": self.table.n_rows,
                          "lineage": [[op, list(inp), params]
                                      for op, inp, params in self.table.lineage]}
        if self.roles is not None:
            d["roles"] = {"dependent": self.roles.dependent,
                          "covariates": list(self.roles.covariates),
                          "group_level2": self.roles.group_level2,
                          "weights": self.roles.weights,
                          "censor_lb": self.roles.censor_lb,
                          "censor_ub": self.roles.censor_ub}
        if self.spec is not None:
            d["spec"] = self.spec.to_dict()
        return d


# ---------------------------------------------------------------------------
# draw-file helpers


def _truncate_or_remove(path, n_bytes):
    if not path.is_file():
        return
    if n_bytes <= 0:
        path.unlink()
    else:
        os.truncate(path, n_bytes)


def _format_row(iteration, row):
    return ",".join(["%d" % int(iteration)] + [_fmt_value(v) for v in row])


def _read_draws(path, columns, settings):
    store = SampleStore(columns,
                        thin=1 if not settings else settings.get("thin", 1),
                        burn_in=0 if not settings else settings.get("burn_in", 0))
    if not path.is_file():
        return store
    with open(path) as f:
        header = f.readline().strip()
        if header and header.split(",") != list(columns):
            raise ValidationError("draw file header does not match the model record")
        for line in f:
            line = line.strip()
            if line:
                store.append(np.array([float(v) for v in line.split(",")]))
    return store


def _read_states(path):
    if not path.is_file():
        return []
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
