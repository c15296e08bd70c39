"""Command-line driver for the full analysis workflow.

Each subcommand operates on a session directory, so a shell walks the same
steps the browser client does: ``import`` -> ``describe`` -> ``transform``
-> ``spec-model`` -> ``run`` -> ``summary`` -> ``diagnose`` -> ``predict``
-> ``fit``.  State-changing commands append a record to the session's
command log; ``replay`` re-executes a log into a fresh session, which
reproduces every artifact byte for byte.

Exit codes: 0 success, 2 validation failure, 3 numerical abort.  Failures
print one machine-parsable line ``error: <kind>: <reason>`` on stderr.
"""

import argparse
import json
import re
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from .data import RoleAssignment, load_csv
from .descriptive import univariate_summary
from .diagnostics import (
    batch_means_mcci,
    cusum_hairiness,
    summarize,
    summary_table_csv,
    summary_table_text,
    trace,
)
from .errors import NumericError, ValidationError
from .models import MODEL_FAMILIES, ModelSpec, describe_spec
from .predictive import PredictiveQuery, parse_grid, pd_functional
from .priors import FAMILIES as STICK_FAMILIES
from .priors import StickPriorSpec, draw_truncated
from .session import COMMANDS_FILE, Session, _stable_json, session_root

TRACE_POINT_CAP = 4096


# ---------------------------------------------------------------------------
# small parsers


def _parse_kv_pairs(text):
    """``k=v,k=v`` with numeric or true/false values."""
    out = {}
    for pair in filter(None, (text or "").split(",")):
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValidationError("expected key=value, got %r" % (pair,))
        value = value.strip()
        if value.lower() in ("true", "false"):
            out[key.strip()] = value.lower() == "true"
        else:
            try:
                out[key.strip()] = float(value)
            except ValueError:
                raise ValidationError(
                    "cannot parse %r as a number" % (value,)) from None
    return out


def _parse_stick(text):
    family, _, rest = text.partition(":")
    return StickPriorSpec(family.strip(), **_parse_kv_pairs(rest))


def _parse_focal(tokens):
    """``NAME=a:step:b`` / ``NAME=v1,v2`` / ``NAME=v`` pairs into a map."""
    focal = {}
    for tok in tokens:
        name, sep, gtext = tok.partition("=")
        if not sep or not name:
            raise ValidationError("focal syntax is NAME=GRID, got %r" % (tok,))
        gtext = gtext.strip()
        if ":" in gtext:
            focal[name] = gtext           # a:step:b handled downstream
        elif "," in gtext:
            focal[name] = [float(v) for v in gtext.split(",")]
        else:
            focal[name] = [float(gtext)]
    return focal


def _split_functionals(text):
    """Split on top-level commas so ``quantile(0.9)`` survives."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur).strip())
    return [p for p in parts if p]


def _parse_functionals(text, default_u):
    names, u = [], default_u
    for tok in _split_functionals(text):
        m = re.fullmatch(r"quantile\(([^)]+)\)", tok)
        if m:
            level = float(m.group(1))
            if "quantile" in names:
                raise ValidationError("one quantile level per query")
            names.append("quantile")
            u = level
        else:
            names.append(tok)
    return names, u


def _render_table(header, rows):
    """Aligned text: first column left-justified, the rest right-justified."""
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(header))]
    out = []
    for line in cells:
        out.append("  ".join(c.rjust(w) if i else c.ljust(w)
                             for i, (c, w) in enumerate(zip(line, widths))))
    return "\n".join(out)


def _fmt(v):
    if v is None:
        return "nan"
    return "%.6g" % v


# ---------------------------------------------------------------------------
# session plumbing


def _root(args):
    return session_root(getattr(args, "root", None))


def _restore(args):
    if not args.session:
        raise ValidationError("--session is required")
    root = _root(args)
    if not Session.exists(root, args.session):
        raise ValidationError("no session %r under %s" % (args.session, root))
    return Session.restore(root, args.session)


def _log_command(session, cmd, cmd_args):
    with open(session.dir / COMMANDS_FILE, "a") as f:
        f.write(_stable_json({"cmd": cmd, "args": cmd_args}) + "\n")


def _execute(session, cmd, a, progress=None, cancel=None):
    """Apply one state-changing command record (shared with ``replay``)."""
    if cmd == "import":
        table = load_csv(a["path"], name=a.get("name"))
        session.set_table(table)
    elif cmd == "transform":
        session.transform(a["op"], a["args"])
    elif cmd == "spec-model":
        r = a["roles"]
        session.set_roles(RoleAssignment(
            dependent=r["dependent"], covariates=tuple(r.get("covariates") or ()),
            group_level2=r.get("group_level2"), weights=r.get("weights"),
            censor_lb=r.get("censor_lb"), censor_ub=r.get("censor_ub")))
        session.set_spec(ModelSpec.from_dict(a["spec"]))
    elif cmd == "run":
        session.run(a["iterations"], burn_in=a.get("burn_in"),
                    thin=a.get("thin"), seed=a.get("seed"),
                    append=bool(a.get("append")), progress=progress,
                    cancel=cancel)
    elif cmd == "fit":
        session.fit(obs_weight=a.get("obs_weight", 1.0))
    else:
        raise ValidationError("unknown command record %r" % (cmd,))


# ---------------------------------------------------------------------------
# subcommands


def cmd_import(args, out):
    record = {"path": str(Path(args.path)), "name": args.name}
    load_csv(record["path"], name=record["name"])   # fail before creating
    root = _root(args)
    if args.session and Session.exists(root, args.session):
        session = Session.restore(root, args.session)
    else:
        session = Session.create(root, args.session)
    _execute(session, "import", record)
    _log_command(session, "import", record)
    t = session.table
    out.write("session %s: %s (%d rows, %d columns)\n"
              % (session.id, t.name, t.n_rows, t.n_cols))
    return 0


def cmd_describe(args, out):
    session = _restore(args)
    if session.table is None:
        raise ValidationError("no dataset uploaded yet")
    t = session.table
    header = ["column", "n", "mean", "sd", "min", "q2.5", "q25", "q50",
              "q75", "q97.5", "max"]
    rows = []
    for j, name in enumerate(t.columns):
        if args.column and name != args.column:
            continue
        try:
            s = univariate_summary(t.values[:, j])
        except ValidationError:
            rows.append([name] + ["nan"] * 10)
            continue
        d = s.as_dict()
        rows.append([name, str(d["n"])] + [
            _fmt(d[k]) for k in ("mean", "sd", "min", "q0.025", "q0.25",
                                 "q0.5", "q0.75", "q0.975", "max")])
    if args.column and not rows:
        raise ValidationError("no column %r" % (args.column,))
    if args.csv:
        out.write(",".join(header) + "\n")
        for row in rows:
            out.write(",".join(row) + "\n")
    else:
        out.write(_render_table(header, rows) + "\n")
    return 0


def cmd_transform(args, out):
    session = _restore(args)
    op = args.op
    pos = args.args
    if op == "zscore":
        record_args = {"column": _one(pos, op)}
    elif op == "dummy_code":
        record_args = {"column": _nth(pos, 0, op),
                       "reference": float(_nth(pos, 1, op))}
    elif op == "lag":
        record_args = {"column": _nth(pos, 0, op), "k": int(_nth(pos, 1, op))}
    elif op == "interact":
        record_args = {"column_a": _nth(pos, 0, op),
                       "column_b": _nth(pos, 1, op)}
    elif op == "vectorize":
        if len(pos) < 3:
            raise ValidationError(
                "vectorize needs >= 2 response columns and an id column")
        record_args = {"response_columns": pos[:-1], "id_column": pos[-1]}
    elif op == "recode_missing":
        if len(pos) < 2:
            raise ValidationError("recode_missing needs a column and codes")
        record_args = {"column": pos[0], "codes": [float(c) for c in pos[1:]]}
    elif op == "rename":
        record_args = {"column": _nth(pos, 0, op), "to": _nth(pos, 1, op)}
    else:
        raise ValidationError("unknown transform %r" % (op,))
    record = {"op": op, "args": record_args}
    _execute(session, "transform", record)
    _log_command(session, "transform", record)
    out.write("columns: %s\n" % ",".join(session.table.columns))
    return 0


def _one(pos, op):
    if len(pos) != 1:
        raise ValidationError("%s takes exactly one column" % op)
    return pos[0]


def _nth(pos, i, op):
    if len(pos) <= i:
        raise ValidationError("%s is missing argument %d" % (op, i + 1))
    return pos[i]


def cmd_spec_model(args, out):
    session = _restore(args)
    roles = {
        "dependent": args.y,
        "covariates": ([c for c in args.covariates.split(",") if c]
                       if args.covariates else []),
        "group_level2": args.group,
        "weights": args.weights,
        "censor_lb": args.censor_lb,
        "censor_ub": args.censor_ub,
    }
    stick = _parse_stick(args.stick) if args.stick else None
    spec = ModelSpec(
        family=args.family, link=args.link, mixing_target=args.mixing_target,
        stick_prior=stick, heteroscedastic=args.heteroscedastic,
        ssvs_kernel=args.ssvs_kernel, ssvs_weight=args.ssvs_weight)
    if args.hyper:
        d = spec.to_dict()
        overrides = _parse_kv_pairs(args.hyper)
        unknown = sorted(set(overrides) - set(d["hyper"]))
        if unknown:
            raise ValidationError(
                "unknown hyperparameter(s) for %s: %s"
                % (args.family, ", ".join(unknown)))
        d["hyper"].update(overrides)
        spec = ModelSpec.from_dict(d)
    record = {"roles": roles, "spec": spec.to_dict()}
    _execute(session, "spec-model", record)
    _log_command(session, "spec-model", record)
    desc = describe_spec(spec, list(session.regression_data().x_names))
    out.write(desc["title"] + "\n")
    for line in desc["lines"]:
        out.write("  " + line + "\n")
    return 0


def cmd_run(args, out):
    session = _restore(args)
    stop = threading.Event()
    previous = signal.getsignal(signal.SIGINT)

    def _sigint(signum, frame):
        stop.set()
        out.write("\nstopping after the current iteration...\n")

    last = [-1.0]

    def _progress(frac, iteration):
        if frac - last[0] >= 0.1 or frac >= 1.0:
            last[0] = frac
            out.write("progress %3.0f%%  iteration %d\n"
                      % (100 * frac, iteration))
            out.flush()

    start_iter = (session.chain_state.iteration
                  if args.append and session.chain_state is not None else 0)
    record = {"iterations": args.iterations, "burn_in": args.burnin,
              "thin": args.thin, "seed": args.seed, "append": args.append}
    signal.signal(signal.SIGINT, _sigint)
    try:
        _execute(session, "run", record, progress=_progress,
                 cancel=stop.is_set)
    finally:
        signal.signal(signal.SIGINT, previous)
    done = session.chain_state.iteration - start_iter
    if done > 0:
        record["iterations"] = done    # a cancelled run logs what it did
        _log_command(session, "run", record)
    if stop.is_set():
        out.write("cancelled at iteration %d; continue with --append\n"
                  % session.chain_state.iteration)
    out.write("retained %d rows (global iteration %d)\n"
              % (session.store.n_rows, session.chain_state.iteration))
    return 0


def cmd_summary(args, out):
    session = _restore(args)
    rows = summarize(session.require_draws())
    out.write(summary_table_csv(rows) if args.csv
              else summary_table_text(rows) + "\n")
    return 0


def cmd_diagnose(args, out):
    session = _restore(args)
    store = session.require_draws()
    if args.trace:
        if args.trace not in store.columns:
            raise ValidationError("no sampled parameter %r" % (args.trace,))
        its, vals = trace(store, args.trace,
                          window=min(args.window, TRACE_POINT_CAP))
        out.write("iteration,%s\n" % args.trace)
        for i, v in zip(its, vals):
            out.write("%d,%s\n" % (int(i), repr(float(v))))
        return 0
    retained = store.column("iteration") > store.burn_in
    header = ["parameter", "mcci_mean", "mcci_median", "mcci_sd", "hairiness"]
    rows = []
    for name in store.columns:
        if name == "iteration":
            continue
        v = store.column(name)[retained]
        cells = [name]
        for estimand in ("mean", "median", "sd"):
            try:
                hw = batch_means_mcci(
                    v, "quantile" if estimand == "median" else estimand, q=0.5)
            except ValidationError:
                hw = None
            cells.append(_fmt(hw))
        cells.append(_fmt(cusum_hairiness(v)))
        rows.append(cells)
    if args.csv:
        out.write(",".join(header) + "\n")
        for row in rows:
            out.write(",".join(row) + "\n")
    else:
        out.write(_render_table(header, rows) + "\n")
    return 0


def cmd_predict(args, out):
    session = _restore(args)
    focal = _parse_focal(args.x)
    functionals, u = _parse_functionals(args.functional, args.u)
    y_grid = parse_grid(args.y_grid) if args.y_grid else None
    query = PredictiveQuery(
        focal=focal, functionals=functionals,
        profile_method=args.profile, y_grid=y_grid, u=u,
        obs_weight=args.obs_weight, k_clusters=args.k)
    rng = np.random.default_rng((session.settings or {}).get("seed", 0))
    table = pd_functional(session.posterior(), session.regression_data(),
                          query, rng=rng)
    if args.out:
        target = Path(args.out)
        target.mkdir(parents=True, exist_ok=True)
        written = []
        if table.scalars:
            (target / "scalars.csv").write_text(table.scalar_csv())
            written.append("scalars.csv")
        for name in sorted(table.curves):
            (target / ("%s.csv" % name)).write_text(table.curve_csv(name))
            written.append("%s.csv" % name)
        out.write("wrote %s under %s\n" % (", ".join(written), target))
        return 0
    if table.scalars:
        out.write(table.scalar_csv())
    for name in sorted(table.curves):
        out.write("# curve %s\n" % name)
        out.write(table.curve_csv(name))
    return 0


def cmd_fit(args, out):
    session = _restore(args)
    report = session.fit(obs_weight=args.obs_weight)
    _log_command(session, "fit", {"obs_weight": args.obs_weight})
    out.write("r_squared,%s\n" % repr(float(report.r_squared)))
    out.write("d_m,%s\n" % repr(float(report.d_m)))
    out.write("outliers_over_2,%d\n" % int(report.outliers_2.sum()))
    out.write("outliers_over_3,%d\n" % int(report.outliers_3.sum()))
    return 0


def cmd_prior_sim(args, out):
    kwargs = {}
    for key in ("alpha", "a", "b", "c"):
        value = getattr(args, key)
        if value is not None:
            kwargs[key] = value
    spec = StickPriorSpec(args.family, **kwargs)
    rng = np.random.default_rng(args.seed)
    out.write("draw,index,weight,truncation_mass\n")
    for d in range(args.draws):
        seq = draw_truncated(spec, rng, mass_tol=args.mass_tol)
        for j, w in enumerate(seq.weights, start=1):
            out.write("%d,%d,%s,%s\n"
                      % (d + 1, j, repr(float(w)),
                         repr(float(seq.truncation_mass))))
    return 0


def cmd_serve(args, out):
    from .service import serve
    out.write("serving on http://%s:%d (session root %s)\n"
              % (args.host, args.port, _root(args)))
    out.flush()
    serve(root=getattr(args, "root", None), host=args.host, port=args.port,
          static_dir=args.ui)
    return 0


def cmd_replay(args, out):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise ValidationError("no command log at %s" % (manifest,))
    records = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not args.session:
        raise ValidationError("--session is required")
    root = _root(args)
    if Session.exists(root, args.session):
        raise ValidationError(
            "session %r already exists; replay targets a fresh id"
            % (args.session,))
    session = Session.create(root, args.session)
    for rec in records:
        _execute(session, rec["cmd"], rec["args"])
        _log_command(session, rec["cmd"], rec["args"])
    out.write("replayed %d commands into session %s\n"
              % (len(records), session.id))
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bnpreg",
        description="Bayesian regression workbench (sessions, MCMC, "
                    "posterior predictive exploration)")
    parser.add_argument("--root", help="session root directory "
                        "(default: $BNPREG_SESSION_ROOT or ./bnpreg_sessions)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_session(p):
        p.add_argument("--session", "-s", help="session id")
        return p

    p = with_session(sub.add_parser("import", help="load a CSV dataset"))
    p.add_argument("path")
    p.add_argument("--name", help="table name (default: file stem)")
    p.set_defaults(func=cmd_import)

    p = with_session(sub.add_parser("describe", help="descriptive statistics"))
    p.add_argument("--column")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_describe)

    p = with_session(sub.add_parser("transform", help="derive columns"))
    p.add_argument("op", choices=["zscore", "dummy_code", "lag", "interact",
                                  "vectorize", "recode_missing", "rename"])
    p.add_argument("args", nargs="*")
    p.set_defaults(func=cmd_transform)

    p = with_session(sub.add_parser(
        "spec-model", help="assign roles and set the model"))
    p.add_argument("--y", required=True, help="dependent column")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--weights")
    p.add_argument("--group", help="level-2 group column (HLM2)")
    p.add_argument("--censor-lb", help="lower censoring bound column")
    p.add_argument("--censor-ub", help="upper censoring bound column")
    p.add_argument("--family", required=True, choices=list(MODEL_FAMILIES))
    p.add_argument("--link", default="identity",
                   choices=["identity", "binary_probit"])
    p.add_argument("--mixing-target",
                   choices=["intercept_only", "coefficients",
                            "coefficients_and_variance"])
    p.add_argument("--stick", help="stick prior, e.g. dp:alpha=1 or "
                                   "pitman_yor:a=0.3,b=1")
    p.add_argument("--heteroscedastic", action="store_true")
    p.add_argument("--ssvs-kernel", action="store_true")
    p.add_argument("--ssvs-weight", action="store_true")
    p.add_argument("--hyper", help="hyperparameter overrides, k=v,k=v")
    p.set_defaults(func=cmd_spec_model)

    p = with_session(sub.add_parser("run", help="advance the MCMC chain"))
    p.add_argument("--S", dest="iterations", type=int, required=True,
                   help="iterations to add")
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--append", action="store_true",
                   help="continue the stored chain")
    p.set_defaults(func=cmd_run)

    p = with_session(sub.add_parser("summary", help="posterior summary table"))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_summary)

    p = with_session(sub.add_parser(
        "diagnose", help="convergence table or a trace series"))
    p.add_argument("--csv", action="store_true")
    p.add_argument("--trace", help="emit iteration,value series for one "
                                   "parameter instead of the table")
    p.add_argument("--window", type=int, default=TRACE_POINT_CAP)
    p.set_defaults(func=cmd_diagnose)

    p = with_session(sub.add_parser(
        "predict", help="posterior predictive functionals over a focal grid"))
    p.add_argument("--x", action="append", required=True,
                   help="focal covariate grid, NAME=a:step:b (repeatable)")
    p.add_argument("--functional", default="mean",
                   help="comma list: mean, variance, quantile(u), "
                        "prob_y_ge_0, pdf, cdf, survival, hazard, cumhaz")
    p.add_argument("--profile", default="grand_mean",
                   choices=["grand_mean", "zero_center", "partial_dependence",
                            "k_cluster"])
    p.add_argument("--u", type=float, default=0.5, help="quantile level")
    p.add_argument("--obs-weight", type=float, default=1.0)
    p.add_argument("--k", type=int, help="cluster count for k_cluster")
    p.add_argument("--y-grid", help="response grid a:step:b for curves")
    p.add_argument("--out", help="directory for the delimited outputs")
    p.set_defaults(func=cmd_predict)

    p = with_session(sub.add_parser("fit", help="fit statistics + residual file"))
    p.add_argument("--obs-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("prior-sim",
                       help="truncated stick-breaking weight draws")
    p.add_argument("--family", required=True, choices=list(STICK_FAMILIES))
    p.add_argument("--alpha", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mass-tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_prior_sim)

    p = sub.add_parser("serve", help="run the local HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8711)
    p.add_argument("--ui", help="static front-end directory "
                               "(default: ./frontend/dist if present)")
    p.set_defaults(func=cmd_serve)

    p = with_session(sub.add_parser(
        "replay", help="re-execute a command log into a fresh session"))
    p.add_argument("--manifest", required=True,
                   help="path to a session's commands.jsonl")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except ValidationError as exc:
        print("error: validation: %s" % exc, file=sys.stderr)
        return 2
    except NumericError as exc:
        print("error: numeric: %s" % exc, file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
