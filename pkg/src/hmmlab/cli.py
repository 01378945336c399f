"""``lab`` command line: run declarative experiments and write CSV reports."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from importlib import resources

import jsonschema
import numpy as np

from . import ergodicity, finite, gaussian, mle, nonlinear, separation
from .core import Init, ModelSpec, ParameterBox, simulate
from .errors import ConfigError, LabError, ModelError
from .rng import RngStream

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
NAN = "nan"

DEFAULTS = {
    "replicates": 1,
    "per_dim": 33,
    "tol": 1e-4,
    "sweeps": 3,
    "s": 0,
    "calibration_samples": 100_000,
    "mean_steps": 10_000_000,
}


def load_schema() -> dict:
    with resources.files("hmmlab").joinpath("schema/config.schema.json").open() as fh:
        return json.load(fh)


# -- config handling ------------------------------------------------------------

def build_model(desc: dict) -> ModelSpec:
    name, params = desc["name"], dict(desc.get("params", {}))
    try:
        if name == "remark13":
            if params:
                raise ConfigError("remark13 takes no parameters")
            return finite.remark13_model()
        if name == "gaussian_2state":
            return finite.gaussian_2state(**params)
        if name == "scalar_gaussian":
            return gaussian.scalar_gaussian(**params)
        if name == "linear_gaussian":
            return gaussian.scaled_linear_gaussian(**params)
        if name == "stochvol":
            return nonlinear.stochastic_volatility(**params)
        if name == "observed_chain":
            return ergodicity.observed_chain(**params)
        if name == "finite":
            payload = finite.categorical_hmm(params.pop("trans"), params.pop("emit"))
            if params:
                raise ConfigError(f"unknown finite-model parameters {sorted(params)}")
            return ModelSpec("finite", payload, ParameterBox([0.0], [1.0]), np.array([0.0]), name="finite")
    except TypeError as exc:
        raise ConfigError(f"bad parameters for model {name!r}: {exc}") from exc
    except KeyError as exc:
        raise ConfigError(f"model {name!r} needs parameter {exc}") from exc
    raise ConfigError(f"unknown model {name!r}")


def build_init(desc: dict | None, default: Init) -> Init:
    if desc is None:
        return default
    kind = desc["kind"]
    if kind == "point":
        return Init.point_mass(desc.get("point", 0))
    if kind == "lambda":
        return Init.improper()
    if kind == "stationary":
        return Init.stationary(desc.get("burn_in", 10_000))
    if kind == "weights":
        return Init.from_weights(desc["weights"])
    return Init.gaussian(desc["mean"], desc["cov"])


def _parse(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc


def diagnostics(config) -> list[str]:
    """Schema and semantic problems of a parsed config; empty when valid."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errs = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    out = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errs]
    if out:
        return out
    schedule = config.get("schedule")
    if schedule is not None and any(b <= a for a, b in zip(schedule, schedule[1:])):
        out.append("schedule: must be strictly increasing")
    try:
        spec = build_model(config["model"])
    except (ConfigError, ModelError, ValueError) as exc:
        return out + [f"model: {exc}"]
    for key in ("theta_star",):
        if key in config:
            try:
                spec.box.check(config[key])
            except ModelError as exc:
                out.append(f"{key}: {exc}")
    opts = config.get("options", {})
    if "theta" in opts:
        try:
            spec.box.check(opts["theta"])
        except ModelError as exc:
            out.append(f"options/theta: {exc}")
    grid = opts.get("grid")
    if grid is not None and not grid["lo"] < grid["hi"]:
        out.append("options/grid: lo must be below hi")
    if config["command"] in ("consistency", "mle", "entropy-rate", "separation", "concentration") \
            and schedule is None:
        out.append(f"schedule: required by command {config['command']!r}")
    if config["command"] == "concentration" and "t_grid" not in opts:
        out.append("options/t_grid: required by command 'concentration'")
    return out


def validate(path: str) -> list[str]:
    try:
        return diagnostics(_parse(path))
    except ConfigError as exc:
        return [str(exc)]


# -- CSV ----------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return NAN
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return NAN if math.isnan(v) else "%.17g" % float(v)
    return str(v)


def to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise LabError("report row does not match the header")
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_atomic(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".lab-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- commands -----------------------------------------------------------------

def _theta_cols(prefix: str, k: int) -> list[str]:
    return [prefix] if k == 1 else [f"{prefix}{i}" for i in range(k)]


def _grid(opts) -> nonlinear.Grid | None:
    g = opts.get("grid")
    return None if g is None else nonlinear.Grid(float(g["lo"]), float(g["hi"]), int(g["m"]))


def _opt(opts, key):
    return opts.get(key, DEFAULTS.get(key))


def cmd_simulate(cfg, spec, theta_star, root, parallelism):
    opts = cfg.get("options", {})
    init = build_init(opts.get("init"), Init.stationary())
    n = (cfg.get("schedule") or [100])[-1]
    rows = []
    header = None
    for r in range(cfg.get("replicates", 1)):
        x, y = simulate(spec, theta_star, init, n, root.child(r).generator())
        x = np.asarray(x, dtype=float).reshape(n + 1, -1)
        y = np.asarray(y, dtype=float).reshape(n + 1, -1)
        if header is None:
            header = ["experiment", "replicate", "n"] + _theta_cols("x", x.shape[1]) + _theta_cols("y", y.shape[1])
        for k in range(n + 1):
            rows.append([cfg["_id"], r, k, *x[k], *y[k]])
    return header, rows


def cmd_loglik(cfg, spec, theta_star, root, parallelism):
    opts = cfg.get("options", {})
    init = build_init(opts.get("init"), Init.stationary())
    data_init = build_init(opts.get("data_init"), Init.stationary())
    theta = spec.box.check(opts.get("theta", theta_star))
    schedule = cfg.get("schedule") or [100]
    rows = []
    for r in range(cfg.get("replicates", 1)):
        y = mle.simulate_path(spec, theta_star, data_init, schedule[-1], root.child(r))
        cum = mle.loglik_path(spec, theta, init, y, _grid(opts))
        # +inf marks horizons too short for the improper likelihood to exist
        rows += [[cfg["_id"], r, n, *theta, math.nan if cum[n] == math.inf else cum[n]] for n in schedule]
    return ["experiment", "replicate", "n"] + _theta_cols("theta", theta.size) + ["loglik"], rows


def _consistency(cfg, spec, theta_star, root, parallelism, data_init):
    opts = cfg.get("options", {})
    init = build_init(opts.get("init"), Init.stationary())
    return mle.consistency_experiment(
        spec, theta_star, init, cfg["schedule"], cfg.get("replicates", 1), root,
        data_init=data_init, per_dim=_opt(opts, "per_dim"), tol=_opt(opts, "tol"),
        sweeps=_opt(opts, "sweeps"), parallelism=parallelism, grid=_grid(opts))


def cmd_consistency(cfg, spec, theta_star, root, parallelism, with_distance=True):
    opts = cfg.get("options", {})
    rep = _consistency(cfg, spec, theta_star, root, parallelism,
                       build_init(opts.get("data_init"), Init.stationary()))
    k = spec.box.dims
    header = ["experiment", "replicate", "n"] + _theta_cols("theta_hat", k) + ["value"]
    if with_distance:
        header.append("distance")
    rows = []
    for i, n in enumerate(rep.schedule):
        for r in range(rep.distances.shape[1]):
            row = [cfg["_id"], r, n, *rep.theta_hats[i, r], rep.values[i, r]]
            if with_distance:
                row.append(rep.distances[i, r])
            rows.append(row)
    return header, rows


def cmd_mle(cfg, spec, theta_star, root, parallelism):
    return cmd_consistency(cfg, spec, theta_star, root, parallelism, with_distance=False)


def cmd_entropy_rate(cfg, spec, theta_star, root, parallelism):
    opts = cfg.get("options", {})
    init = build_init(opts.get("init"), Init.stationary())
    data_init = build_init(opts.get("data_init"), Init.stationary())
    rows = []
    for r in range(cfg.get("replicates", 1)):
        pairs = mle.entropy_rate(spec, theta_star, init, cfg["schedule"], root.child(r),
                                 data_init=data_init, grid=_grid(opts))
        rows += [[cfg["_id"], r, n, v] for n, v in pairs]
    return ["experiment", "replicate", "n", "rate"], rows


def cmd_counterexample(cfg, spec, theta_star, root, parallelism):
    """Remark-type periodic counterexample: nu = delta at the first state, X_0 fixed per branch."""
    opts = cfg.get("options", {})
    schedule = cfg.get("schedule") or [100_000]
    replicates = cfg.get("replicates", 20)
    rows = []
    for x0 in opts.get("x0", [1, 2]):
        cfg_b = dict(cfg, schedule=schedule, replicates=replicates)
        rep = _consistency(cfg_b, spec, theta_star, root.child(x0), parallelism,
                           Init.point_mass(x0 - 1))
        for i, n in enumerate(rep.schedule):
            rows += [[cfg["_id"], r, x0, n, rep.theta_hats[i, r, 0]] for r in range(replicates)]
    return ["experiment", "replicate", "x0", "n", "theta_hat"], rows


def cmd_concentration(cfg, spec, theta_star, root, parallelism):
    opts = cfg.get("options", {})
    state = int(opts.get("indicator_state", 0))
    s = int(_opt(opts, "s"))
    init = build_init(opts.get("init"), Init.stationary())
    rows = []
    for n in cfg["schedule"]:
        tab = ergodicity.empirical_tail(
            spec, theta_star, lambda w: (w[..., 0] == state).astype(float), s, n, opts["t_grid"],
            cfg.get("replicates", 10_000), root.child(n), mean_steps=_opt(opts, "mean_steps"), init=init)
        bound = tab.bound(2.0 * tab.K_hat)
        rows += [[cfg["_id"], 0, n, t, p, c, tab.K_hat, b]
                 for t, p, c, b in zip(tab.t, tab.tail, tab.count, bound)]
    return ["experiment", "replicate", "n", "t", "tail", "count", "k_hat", "bound_2k"], rows


def cmd_separation(cfg, spec, theta_star, root, parallelism):
    opts = cfg.get("options", {})
    if "theta" not in opts:
        raise ConfigError("options/theta: separation needs a competing parameter")
    theta = spec.box.check(opts["theta"])
    init = build_init(opts.get("init"), Init.stationary())
    w = separation.build_witness(spec, theta_star, theta, int(_opt(opts, "s")),
                                 int(_opt(opts, "calibration_samples")), root.child(0), init)
    rep = separation.separation_test(separation.model_sampler(spec, theta_star, init),
                                     separation.model_sampler(spec, theta, init), w,
                                     cfg["schedule"], cfg.get("replicates", 10_000), root.child(1))
    return (["experiment", "replicate", "n", "p_star", "p_theta", "theta_upper_bound", "slope", "slope_se"],
            [[cfg["_id"], 0, n, ps, pt, z, rep.slope, rep.slope_se]
             for n, ps, pt, z in zip(rep.schedule, rep.p_star, rep.p_theta, rep.zero_theta)])


def assumption_report(spec: ModelSpec, theta_star, root: RngStream):
    if spec.family == "finite":
        return finite.check_assumptions_F(spec, theta_star, rng=root.child(0))
    if spec.family == "linear-gaussian":
        return gaussian.check_assumptions_L(spec.payload, theta_star, spec.box, rng=root.child(0))
    return nonlinear.check_assumptions_NL(spec, rng=root.child(0))


def cmd_check_assumptions(cfg, spec, theta_star, root, parallelism):
    rep = assumption_report(spec, theta_star, root)
    return (["experiment", "replicate", "n", "item", "status", "value", "detail"],
            [[cfg["_id"], 0, NAN, k, v.status, v.value, v.detail] for k, v in rep.items.items()])


COMMANDS = {
    "simulate": cmd_simulate,
    "loglik": cmd_loglik,
    "mle": cmd_mle,
    "consistency": cmd_consistency,
    "entropy-rate": cmd_entropy_rate,
    "concentration": cmd_concentration,
    "separation": cmd_separation,
    "counterexample": cmd_counterexample,
    "check-assumptions": cmd_check_assumptions,
}


def execute(cfg: dict, parallelism: int = 1, strict: bool = False, warn=None) -> str:
    """Run a validated config and return the CSV text."""
    problems = diagnostics(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    spec = build_model(cfg["model"])
    theta_star = spec.box.check(cfg.get("theta_star", spec.true_theta))
    root = RngStream(int(cfg["seed"]))
    cfg = dict(cfg, _id=cfg.get("experiment", cfg["command"]))
    if strict:
        rep = assumption_report(spec, theta_star, root.child(2 ** 32))
        for name in rep.indeterminate:
            (warn or _stderr)(f"warning: assumption {name} is indeterminate")
        if rep.failures:
            raise LabError(f"assumption checks failed: {', '.join(rep.failures)}")
    header, rows = COMMANDS[cfg["command"]](cfg, spec, theta_star, root, parallelism)
    return to_csv(header, rows)


def _stderr(msg: str):
    print(msg, file=sys.stderr)


def _default_parallelism() -> int:
    raw = os.environ.get("LAB_DEFAULT_PARALLELISM")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LAB_DEFAULT_PARALLELISM must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError("LAB_DEFAULT_PARALLELISM must be positive")
    return value


def run(config_path: str, out_path: str, parallelism: int | None = None, strict: bool = False) -> int:
    try:
        cfg = _parse(config_path)
        par = parallelism if parallelism is not None else _default_parallelism()
        if par < 1:
            raise ConfigError("parallelism must be positive")
        text = execute(cfg, par, strict)
    except ConfigError as exc:
        _stderr(f"config error: {exc}")
        return EXIT_CONFIG
    except LabError as exc:
        _stderr(f"error: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any crash is a runtime failure
        _stderr(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    try:
        write_atomic(out_path, text)
    except OSError as exc:
        _stderr(f"error: cannot write output: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lab", description="HMM likelihood and consistency lab")
    sub = parser.add_subparsers(dest="action", required=True)
    p_run = sub.add_parser("run", help="run an experiment config and write CSV")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--parallelism", type=int, default=None)
    p_run.add_argument("--strict", action="store_true",
                       help="exit nonzero when an assumption check fails")
    p_val = sub.add_parser("validate", help="check a config against the schema")
    p_val.add_argument("--config", required=True)
    args = parser.parse_args(argv)
    if args.action == "run":
        return run(args.config, args.out, args.parallelism, args.strict)
    problems = validate(args.config)
    for line in problems:
        print(line)
    return EXIT_CONFIG if problems else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
