"""End-to-end command line: generate | fit | predict | report | bench.

Configuration is a flat ``section.key=value`` text file; every schema key
is mirrored by a ``--section-key`` flag and flags win over the file.  Keys
outside the static schema (per-component prior bounds, fixed values) are
set with repeatable ``--set key=value`` flags.  Data files are delimited
text with a header row; empty outcome cells mean missing.  Numeric output
uses 17 significant digits so files round-trip exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import pickle
import sys
import time
from pathlib import Path

import numpy as np

from .covariance import CovarianceError, CovParams, FactorizationError
from .gibbs import (ConfigError, McmcConfig, PriorSpec, RegressionData,
                    GibbsSampler)
from .mesh import MeshError, build_cubic_mesh
from .mgp import MeshedModel
from .predict import PredictionError, effective_sample_size, metrics, predict_at
from .synth import SynthSpec, apply_clouds, generate
from .tessellation import TessellationError, build_partition, split_reference

BUNDLE_VERSION = 1
FLOAT_FMT = "%.17g"


class DataError(RuntimeError):
    """Malformed or inconsistent input data."""


class UsageError(RuntimeError):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def _int_list(s):
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).split(",") if v != ""]


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).split(",") if v != ""]


def _str_list(s):
    if isinstance(s, (list, tuple)):
        return list(s)
    return [v.strip() for v in str(s).split(",") if v.strip() != ""]


# key -> (converter, default, help)
SCHEMA = {
    "data.path": (str, "", "input table for fit"),
    "data.coords": (_str_list, [], "coordinate column names, in axis order"),
    "data.outcomes": (_str_list, [], "outcome column names (empty cell = missing)"),
    "data.x": (_str_list, [], "static covariate columns (single outcome only)"),
    "data.z": (str, "const", "varying design: const | identity | column list"),
    "tess.intervals": (_int_list, [], "intervals per axis"),
    "tess.policy": (str, "cover", "reference policy: observed | cover | lattice"),
    "tess.split": (str, "width", "breakpoint rule: width | quantile"),
    "cov.family": (str, "gneiting-spacetime", "covariance family tag"),
    "cov.sigma2": (float, 1.0, "marginal variance (start value)"),
    "cov.c": (float, 1.0, "spatial decay (start value)"),
    "cov.a1": (float, 1.0, "temporal scale (start value)"),
    "cov.beta1": (float, 0.5, "space-time interaction (start value)"),
    "cov.a2": (float, 1.0, "variable scale (start value)"),
    "cov.beta2": (float, 0.5, "variable interaction (start value)"),
    "cov.psi2": (float, 0.0, "direct variable decay for q=2 (0 = unset)"),
    "cov.delta": (_float_list, [], "upper-triangle latent dissimilarities for q>2"),
    "cov.squared_lags": (_bool, True, "use squared lags inside the decays"),
    "prior.beta_var": (float, 100.0, "Gaussian prior variance on beta"),
    "prior.tau_a": (float, 2.0, "inverse-gamma shape for noise variances"),
    "prior.tau_b": (float, 1.0, "inverse-gamma rate for noise variances"),
    "mcmc.iterations": (int, 1000, "total Gibbs iterations"),
    "mcmc.burn": (int, 500, "burn-in iterations"),
    "mcmc.thin": (int, 1, "keep every k-th post-burn-in draw"),
    "mcmc.seed": (int, 0, "root RNG seed"),
    "mcmc.step": (float, 0.1, "proposal step on the working scale"),
    "mcmc.threads": (int, 1, "worker threads for block updates"),
    "mcmc.caching": (_bool, True, "reuse factorizations across congruent blocks"),
    "mcmc.adapt": (_bool, True, "adapt proposal scale during burn-in"),
    "mcmc.w_storage": (str, "draws", "latent storage: draws | summary | none"),
    "mcmc.budget_mb": (float, 1024.0, "memory budget for stored latent draws"),
    "mcmc.checkpoint_every": (int, 0, "checkpoint period in iterations (0 = off)"),
    "mcmc.progress_every": (int, 0, "progress-line period (0 = auto)"),
    "predict.locations": (str, "fill-missing",
                          "locations file, or fill-missing for unobserved rows"),
    "predict.level": (float, 0.95, "credible-interval level"),
    "report.truth": (str, "", "truth table for accuracy metrics"),
    "gen.grid": (_int_list, [40, 40, 10], "grid shape for generate"),
    "gen.tau2": (float, 0.05, "noise variance for generate"),
    "gen.seed": (int, 0, "generation seed"),
    "gen.clouds": (_bool, True, "apply the cloud-mask protocol"),
    "gen.cloud_times": (int, 6, "time slices hidden behind discs"),
    "gen.blank_times": (int, 2, "time slices blanked except a few points"),
    "gen.blank_keep": (int, 10, "observations kept per blanked slice"),
    "gen.radius": (float, float(np.sqrt(0.1)), "cloud disc radius"),
    "out.dir": (str, "out", "output directory"),
    "out.dag_dump": (str, "", "write the DAG edge list to this file"),
}


def parse_config_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="set any configuration key (repeatable)")
    for key, (_, default, help_text) in SCHEMA.items():
        common.add_argument(_flag(key), dest=key, default=None,
                            help=f"{help_text} (default: {default})")
    parser = argparse.ArgumentParser(
        prog="meshgp",
        description="meshed Gaussian process fitting and gap-filling")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("generate", "simulate a lattice dataset with synthetic clouds"),
            ("fit", "run the Gibbs sampler and write model artifacts"),
            ("predict", "posterior prediction from fitted artifacts"),
            ("report", "metrics and posterior summary tables"),
            ("bench", "scaling and caching timing suites")):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def merge_config(args: argparse.Namespace) -> dict:
    cfg = {key: default for key, (_, default, _) in SCHEMA.items()}
    raw: dict = {}
    if args.config:
        raw.update(parse_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if key in SCHEMA and value is not None:
            raw[key] = value
    extras = {}
    for key, value in raw.items():
        if key in SCHEMA:
            conv = SCHEMA[key][0]
            try:
                cfg[key] = conv(value)
            except (ValueError, TypeError) as exc:
                raise UsageError(f"bad value for {key}: {value!r} ({exc})")
        else:
            extras[key] = value
    cfg["_extras"] = extras
    return cfg


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k != "_extras"}
    payload.update(cfg.get("_extras", {}))
    text = "\n".join(f"{k}={payload[k]}" for k in sorted(payload))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# table io

def write_table(path, header, columns) -> None:
    columns = [np.asarray(c) for c in columns]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        n = len(columns[0]) if columns else 0
        for t in range(n):
            cells = []
            for col in columns:
                v = col[t]
                if isinstance(v, (float, np.floating)):
                    cells.append("" if np.isnan(v) else FLOAT_FMT % v)
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")


def read_table(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        rows = list(reader)
    return [h.strip() for h in header], rows


def ingest(path, coord_cols, outcome_cols, x_cols=(), z_spec="const"):
    """Parse a delimited table into aligned coordinate/outcome/design arrays.

    Outcome cells may be empty (missing); coordinates and covariates must
    parse as finite numbers.  Duplicate locations are accepted with a
    warning.  Returns ``(coords, y, x, z, report)``.
    """
    header, rows = read_table(path)
    col_of = {name: i for i, name in enumerate(header)}
    for name in list(coord_cols) + list(outcome_cols) + list(x_cols):
        if name not in col_of:
            raise DataError(f"{path}: missing column {name!r}")
    z_cols = []
    if z_spec not in ("const", "identity"):
        z_cols = _str_list(z_spec)
        for name in z_cols:
            if name not in col_of:
                raise DataError(f"{path}: missing column {name!r}")
    n = len(rows)
    if n == 0:
        raise DataError(f"{path}: no data rows")

    def parse_cell(row, name, lineno, allow_empty):
        cell = row[col_of[name]].strip()
        if cell == "":
            if allow_empty:
                return np.nan
            raise DataError(f"{path}:{lineno}: empty value in column {name!r}")
        try:
            v = float(cell)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad number {cell!r} in {name!r}")
        if not (np.isfinite(v) or (allow_empty and np.isnan(v))):
            raise DataError(f"{path}:{lineno}: non-finite value in {name!r}")
        return v

    coords = np.empty((n, len(coord_cols)))
    y = np.empty((n, len(outcome_cols)))
    x = np.empty((n, len(x_cols)))
    z = np.empty((n, len(z_cols))) if z_cols else None
    for t, row in enumerate(rows):
        lineno = t + 2
        if len(row) < len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, "
                            f"got {len(row)}")
        for a, name in enumerate(coord_cols):
            coords[t, a] = parse_cell(row, name, lineno, False)
        for a, name in enumerate(outcome_cols):
            y[t, a] = parse_cell(row, name, lineno, True)
        for a, name in enumerate(x_cols):
            x[t, a] = parse_cell(row, name, lineno, False)
        for a, name in enumerate(z_cols):
            z[t, a] = parse_cell(row, name, lineno, False)

    uniq = len({tuple(np.round(c, 12)) for c in coords})
    if uniq < n:
        print(f"warning: {n - uniq} duplicate locations in {path}", file=sys.stderr)
    report = {
        "n": n,
        "missing_fraction": {name: float(np.isnan(y[:, a]).mean())
                             for a, name in enumerate(outcome_cols)},
    }
    for name, frac in report["missing_fraction"].items():
        print(f"{path}: outcome {name}: {frac:.1%} missing", file=sys.stderr)
    return coords, y, x, z, report


# ---------------------------------------------------------------------------
# model construction shared by fit

def _cov_template(cfg: dict, q: int) -> CovParams:
    fam = cfg["cov.family"]
    kw = dict(family=fam, q=q, squared_lags=cfg["cov.squared_lags"])
    if fam != "latent-distance-multivariate":
        kw.update(sigma2=cfg["cov.sigma2"], c=cfg["cov.c"], a1=cfg["cov.a1"],
                  beta1=cfg["cov.beta1"], a2=cfg["cov.a2"], beta2=cfg["cov.beta2"])
        if q == 2 and cfg["cov.psi2"] > 0:
            kw["psi2"] = cfg["cov.psi2"]
        elif q > 1:
            vals = cfg["cov.delta"]
            need = q * (q - 1) // 2
            if len(vals) != need:
                raise UsageError(f"cov.delta needs {need} entries for q={q}")
            delta = np.zeros((q, q))
            k = 0
            for i in range(q):
                for j in range(i + 1, q):
                    delta[i, j] = delta[j, i] = vals[k]
                    k += 1
            kw["delta"] = delta
    else:
        raise UsageError("latent-distance fits are library-only for now")
    return CovParams(**kw)


def _priors_from_cfg(cfg: dict, p: int) -> PriorSpec:
    bounds = {}
    fixed = {}
    for key, value in cfg.get("_extras", {}).items():
        if key.startswith("prior.fix."):
            fixed[key[len("prior.fix."):]] = float(value)
        elif key.startswith("prior."):
            lo, hi = _float_list(value)
            bounds[key[len("prior."):]] = (lo, hi if np.isfinite(hi) else np.inf)
    return PriorSpec(
        mu_beta=np.zeros(p) if p else None,
        sigma_beta=np.eye(p) * cfg["prior.beta_var"] if p else None,
        a_tau=cfg["prior.tau_a"], b_tau=cfg["prior.tau_b"],
        theta_bounds=bounds, theta_fixed=fixed)


def build_model(cfg: dict, coords, y, x, z):
    intervals = cfg["tess.intervals"]
    if not intervals:
        raise UsageError("tess.intervals is required")
    part = build_partition(coords, intervals, method=cfg["tess.split"])
    observed_rows = ~np.all(np.isnan(y), axis=1)
    asg = split_reference(coords, observed_rows, part, policy=cfg["tess.policy"])
    n_extra = asg.coords.shape[0] - coords.shape[0]
    if n_extra:
        if x.shape[1]:
            raise DataError("lattice completion cannot invent covariate values; "
                            "drop data.x or use another policy")
        y = np.vstack([y, np.full((n_extra, y.shape[1]), np.nan)])
        if z is not None:
            z = np.vstack([z, np.ones((n_extra, z.shape[1]))])
        x = np.zeros((asg.coords.shape[0], 0))
    mesh = build_cubic_mesh(part.shape, [len(m) > 0 for m in asg.ref_members],
                            [len(m) > 0 for m in asg.other_members])
    z_mode = cfg["data.z"]
    if z_mode == "identity":
        q = y.shape[1]
        z_arr = None
    elif z_mode == "const":
        q = 1
        z_arr = np.ones((asg.coords.shape[0], 1))
    else:
        q = z.shape[1]
        z_arr = z
    model = MeshedModel(asg, mesh, q=q)
    data = RegressionData(coords=asg.coords, y=y, x=x, z=z_arr, observed=None)
    return model, data


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(cfg: dict) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    grid = tuple(cfg["gen.grid"])
    template = _cov_template(cfg, q=1)
    intervals = tuple(cfg["tess.intervals"]) if cfg["tess.intervals"] else None
    spec = SynthSpec(grid_shape=grid, params=template, tau2=cfg["gen.tau2"],
                     seed=cfg["gen.seed"], intervals=intervals,
                     cloud_radius=cfg["gen.radius"],
                     n_cloud_times=cfg["gen.cloud_times"],
                     n_blank_times=cfg["gen.blank_times"],
                     blank_keep=cfg["gen.blank_keep"])
    ds = generate(spec)
    observed = apply_clouds(ds, spec) if cfg["gen.clouds"] and len(grid) >= 3 \
        else ds.observed
    ndim = ds.coords.shape[1]
    coord_names = [f"c{a + 1}" for a in range(ndim)]
    l_out = ds.y.shape[1]
    y_masked = np.where(observed, ds.y, np.nan)
    header = coord_names + [f"y{a + 1}" for a in range(l_out)]
    cols = [ds.coords[:, a] for a in range(ndim)]
    cols += [y_masked[:, a] for a in range(l_out)]
    write_table(out / "data.csv", header, cols)
    theader = coord_names + [f"y{a + 1}" for a in range(l_out)] \
        + [f"w{a + 1}" for a in range(ds.w_true.shape[1])]
    tcols = [ds.coords[:, a] for a in range(ndim)]
    tcols += [ds.y[:, a] for a in range(l_out)]
    tcols += [ds.w_true[:, a] for a in range(ds.w_true.shape[1])]
    write_table(out / "truth.csv", theader, tcols)
    print(f"wrote {ds.n} rows to {out / 'data.csv'} "
          f"({1 - observed.mean():.1%} masked)", file=sys.stderr)
    return 0


def _write_fit_outputs(out: Path, cfg, model, data, result, template, timings):
    names = (["iter"]
             + [f"beta{k + 1}" for k in range(result.beta_draws.shape[1])]
             + [f"tau2_{k + 1}" for k in range(result.tau2_draws.shape[1])]
             + result.theta_names)
    kept = result.theta_draws.shape[0]
    it_col = result.n_burn + result.thin * (1 + np.arange(kept))
    cols = [it_col]
    cols += [result.beta_draws[:, k] for k in range(result.beta_draws.shape[1])]
    cols += [result.tau2_draws[:, k] for k in range(result.tau2_draws.shape[1])]
    cols += [result.theta_draws[:, k] for k in range(result.theta_draws.shape[1])]
    write_table(out / "trace.csv", names, cols)

    q = model.q
    pos = model.row_positions()
    ndim = model.coords.shape[1]
    rows_latent = np.repeat(pos * q, q) + np.tile(np.arange(q), len(pos))
    header = [f"c{a + 1}" for a in range(ndim)] + ["variable", "mean", "sd",
                                                   "lower", "upper"]
    cols = [np.repeat(model.coords[:, a], q) for a in range(ndim)]
    cols.append(np.tile(np.arange(1, q + 1), len(pos)))
    for arr in (result.w_mean, result.w_sd, result.w_lower, result.w_upper):
        cols.append(arr[rows_latent])
    write_table(out / "w_summary.csv", header, cols)

    if result.w_draws is not None:
        np.save(out / "w_draws.npy", result.w_draws)
    with open(out / "model.pkl", "wb") as fh:
        pickle.dump({"version": BUNDLE_VERSION, "model": model, "data": data,
                     "result": result, "template": template,
                     "config": {k: v for k, v in cfg.items() if k != "_extras"}},
                    fh)
    manifest = {
        "seed": result.seed,
        "config_hash": config_hash(cfg),
        "config": {k: repr(v) for k, v in cfg.items() if k != "_extras"},
        "extras": cfg.get("_extras", {}),
        "n_rows": int(data.n),
        "n_reference": int(model.n_ref),
        "n_other": int(model.n_other),
        "n_regions": int(model.mesh.n_regions),
        "n_colors": int(model.mesh.n_colors),
        "accept_rate": result.accept_rate,
        "cache_hit_rate": result.cache_hit_rate,
        "time_per_iter_s": result.time_per_iter,
        "fit_seconds": timings,
        "kept_draws": kept,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def cmd_fit(cfg: dict) -> int:
    if not cfg["data.path"]:
        raise UsageError("data.path is required")
    if not cfg["data.coords"] or not cfg["data.outcomes"]:
        raise UsageError("data.coords and data.outcomes are required")
    coords, y, x, z, _ = ingest(cfg["data.path"], cfg["data.coords"],
                                cfg["data.outcomes"], cfg["data.x"],
                                cfg["data.z"])
    model, data = build_model(cfg, coords, y, x, z)
    template = _cov_template(cfg, model.q)
    priors = _priors_from_cfg(cfg, data.p)
    mcfg = McmcConfig(
        n_iter=cfg["mcmc.iterations"], n_burn=cfg["mcmc.burn"],
        thin=cfg["mcmc.thin"], seed=cfg["mcmc.seed"],
        step_size=cfg["mcmc.step"], n_threads=cfg["mcmc.threads"],
        caching=cfg["mcmc.caching"], adapt_steps=cfg["mcmc.adapt"],
        w_storage=cfg["mcmc.w_storage"], w_draw_budget_mb=cfg["mcmc.budget_mb"],
        checkpoint_every=cfg["mcmc.checkpoint_every"],
        progress_every=cfg["mcmc.progress_every"],
        interval_level=cfg["predict.level"],
        sample_beta=data.p > 0)
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    if mcfg.checkpoint_every:
        mcfg.checkpoint_path = str(out / "checkpoint.pkl")
    if cfg["out.dag_dump"]:
        model.mesh.dump_edges(cfg["out.dag_dump"])
    sampler = GibbsSampler(model, data, priors, mcfg, template)
    t0 = time.perf_counter()
    result = sampler.run()
    elapsed = time.perf_counter() - t0
    _write_fit_outputs(out, cfg, model, data, result, template, elapsed)
    print(f"fit complete in {elapsed:.1f}s "
          f"({result.time_per_iter * 1e3:.1f} ms/iter)", file=sys.stderr)
    return 0


def _load_bundle(out_dir):
    path = Path(out_dir) / "model.pkl"
    if not path.exists():
        raise DataError(f"no fitted model at {path}")
    with open(path, "rb") as fh:
        bundle = pickle.load(fh)
    if bundle.get("version") != BUNDLE_VERSION:
        raise DataError("model bundle version mismatch")
    return bundle


def cmd_predict(cfg: dict) -> int:
    bundle = _load_bundle(cfg["out.dir"])
    model, data = bundle["model"], bundle["data"]
    result, template = bundle["result"], bundle["template"]
    where = cfg["predict.locations"]
    if where == "fill-missing":
        rows = np.flatnonzero(~data.observed.all(axis=1))
        if rows.size == 0:
            raise DataError("no rows with missing outcomes to fill")
        locs = model.coords[rows]
        x_new = data.x[rows] if data.p else None
        z_new = data.z[rows] if data.z is not None else None
        row_ids = rows
    else:
        coord_cols = bundle["config"]["data.coords"]
        header, _ = read_table(where)
        x_cols = bundle["config"]["data.x"]
        if x_cols and not all(c in header for c in x_cols):
            raise DataError(f"{where}: the fitted model needs covariate "
                            f"columns {x_cols}")
        z_spec = bundle["config"]["data.z"]
        locs, _, x_new, z_new, _ = ingest(
            where, coord_cols, [], x_cols,
            z_spec if z_spec not in ("const", "identity") else "const")
        if not x_cols:
            x_new = None
        row_ids = np.arange(locs.shape[0])
    pred = predict_at(locs, result, model, template, x_new=x_new, z_new=z_new,
                      level=cfg["predict.level"])
    out = Path(cfg["out.dir"])
    ndim = locs.shape[1]
    header = ["row"] + [f"c{a + 1}" for a in range(ndim)] \
        + ["variable", "mean", "sd", "lower", "upper"]
    l_out = pred.mean.size // locs.shape[0]
    cols = [np.repeat(row_ids, l_out)]
    cols += [pred.coords[:, a] for a in range(ndim)]
    cols += [pred.variable + 1, pred.mean, pred.sd, pred.lower, pred.upper]
    write_table(out / "predictions.csv", header, cols)
    print(f"wrote {pred.mean.size} predictions "
          f"({pred.n_draws} draws)", file=sys.stderr)
    return 0


def cmd_report(cfg: dict) -> int:
    out = Path(cfg["out.dir"])
    bundle = _load_bundle(out)
    result = bundle["result"]
    with open(out / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    # posterior summaries with ESS, one row per sampled quantity
    names, draws = [], []
    for k in range(result.beta_draws.shape[1]):
        names.append(f"beta{k + 1}")
        draws.append(result.beta_draws[:, k])
    for k in range(result.tau2_draws.shape[1]):
        names.append(f"tau2_{k + 1}")
        draws.append(result.tau2_draws[:, k])
    for k, nm in enumerate(result.theta_names):
        names.append(nm)
        draws.append(result.theta_draws[:, k])
    means, sds, lows, highs, esses = [], [], [], [], []
    for d in draws:
        means.append(d.mean())
        sds.append(d.std(ddof=1) if len(d) > 1 else 0.0)
        lows.append(np.quantile(d, 0.025))
        highs.append(np.quantile(d, 0.975))
        esses.append(float(effective_sample_size(d)) if len(d) >= 100
                     else float("nan"))
    write_table(out / "params.csv",
                ["param", "mean", "sd", "lower", "upper", "ess"],
                [np.array(names), np.array(means), np.array(sds),
                 np.array(lows), np.array(highs), np.array(esses)])

    rows = [("time_per_iter_s", manifest["time_per_iter_s"]),
            ("kept_draws", manifest["kept_draws"]),
            ("cache_hit_rate", manifest["cache_hit_rate"]),
            ("accept_rate", manifest["accept_rate"]),
            ("interval_level", cfg["predict.level"])]
    pred_path = out / "predictions.csv"
    if cfg["report.truth"] and pred_path.exists():
        header, prows = read_table(pred_path)
        col = {n: i for i, n in enumerate(header)}
        rid = np.array([int(r[col["row"]]) for r in prows])
        variable = np.array([int(r[col["variable"]]) for r in prows])
        pmean = np.array([float(r[col["mean"]]) for r in prows])
        plo = np.array([float(r[col["lower"]]) for r in prows])
        phi = np.array([float(r[col["upper"]]) for r in prows])
        tcfg = bundle["config"]
        theader, _ = read_table(cfg["report.truth"])
        outcome_cols = [c for c in theader if c.startswith("y")] \
            if not tcfg["data.outcomes"] else tcfg["data.outcomes"]
        _, ty, _, _, _ = ingest(cfg["report.truth"], tcfg["data.coords"],
                                outcome_cols, (), "const")
        truth = ty[rid, variable - 1]
        ok = ~np.isnan(truth)
        m = metrics(pmean, truth, mask=ok, lower=plo, upper=phi)
        rows += [("mae", m["mae"]), ("rmse", m["rmse"]),
                 ("coverage", m["coverage"]), ("n_eval", m["n"])]
        base = metrics(np.zeros_like(pmean), truth, mask=ok)
        rows += [("baseline_zero_mae", base["mae"]),
                 ("baseline_zero_rmse", base["rmse"])]
    write_table(out / "report.csv", ["name", "value"],
                [np.array([r[0] for r in rows]),
                 np.array([float(r[1]) for r in rows])])
    for name, value in rows:
        print(f"{name} = {value}", file=sys.stderr)
    return 0


def cmd_bench(cfg: dict) -> int:
    from .bench import caching_benchmark, scaling_benchmark
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    scale = scaling_benchmark(seed=cfg["mcmc.seed"])
    cache = caching_benchmark(seed=cfg["mcmc.seed"])
    names, values = [], []
    for row in scale:
        print(f"n={row['n']:6d} per_iter={row['per_iter'] * 1e3:8.2f} ms",
              file=sys.stderr)
        names.append(f"scaling_per_iter_n{row['n']}")
        values.append(row["per_iter"])
    print(f"caching on: {cache['cached'] * 1e3:.2f} ms/iter, "
          f"off: {cache['uncached'] * 1e3:.2f} ms/iter "
          f"(x{cache['uncached'] / cache['cached']:.2f})", file=sys.stderr)
    names += ["caching_on_per_iter", "caching_off_per_iter"]
    values += [cache["cached"], cache["uncached"]]
    write_table(out / "bench.csv", ["name", "value"],
                [np.array(names), np.array(values)])
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "report": cmd_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = merge_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, CovarianceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, TessellationError, MeshError, PredictionError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FactorizationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
