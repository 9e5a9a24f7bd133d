"""Posterior prediction at arbitrary locations, accuracy metrics, ESS.

Predictions at locations already carrying a latent block (reference or
other) reuse the retained draws directly.  New locations are assigned to
their region and sampled from the conditional on the region's parent
blocks, once per retained draw, after which the outcome draw adds the
noise and fixed-effect layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .covariance import CovParams, cov_matrix, robust_cholesky
from .gibbs import ChainResult, _PREDICT, substream
from .mesh import parents_for_other
from .mgp import MeshedModel
from .tessellation import assign_regions

MATCH_DECIMALS = 10


class PredictionError(RuntimeError):
    """Prediction is impossible with the artifacts at hand."""


@dataclass
class PredictionResult:
    """Per location/variable predictive summaries."""

    coords: np.ndarray
    variable: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    n_draws: int


def _theta_for_draw(result: ChainResult, template: CovParams, k: int,
                    theta_map) -> CovParams:
    values = dict(zip(result.theta_names, result.theta_draws[k]))
    return theta_map.with_values(template, values)


def _row_lookup(model: MeshedModel):
    table = {}
    pos = model.row_positions()
    for t, coord in enumerate(model.coords):
        table[tuple(np.round(coord, MATCH_DECIMALS))] = pos[t]
    return table


def predict_at(locations, result: ChainResult, model: MeshedModel,
               template: CovParams, x_new=None, z_new=None,
               beta_draws=None, level: float | None = None) -> PredictionResult:
    """Posterior predictive summaries of the outcome at given locations.

    With retained latent draws this samples the predictive distribution
    draw by draw (exact quantile intervals); with summary-only chains it
    falls back to a Gaussian approximation built from the stored latent
    mean and variance.  ``x_new``/``z_new`` supply designs at the new
    locations; they default to no fixed effects and an intercept design.
    """
    from .gibbs import ThetaMap, PriorSpec

    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n_loc = locations.shape[0]
    q = model.q
    level = result.level if level is None else level
    alpha = 0.5 * (1.0 - level)
    tmap = ThetaMap(template, PriorSpec())
    l_out = result.tau2_draws.shape[1] if result.tau2_draws.size else 1
    identity_design = z_new is None and l_out == q and q > 1
    if beta_draws is None and result.beta_draws.size:
        beta_draws = result.beta_draws

    lookup = _row_lookup(model)
    found = np.array([lookup.get(tuple(np.round(c, MATCH_DECIMALS)), -1)
                      for c in locations])

    if z_new is None and not identity_design:
        z_new = np.ones((n_loc, q))
    if x_new is None:
        x_new = np.zeros((n_loc, 0))
    x_new = np.asarray(x_new, dtype=float).reshape(n_loc, -1)

    if result.w_draws is None:
        return _predict_from_summary(locations, found, result, model, x_new, z_new,
                                     beta_draws, level, identity_design)

    k_draws = result.w_draws.shape[0]
    if k_draws == 0:
        raise PredictionError("no retained draws to predict from")
    _, region_flat = assign_regions(locations, model.assignment.part)
    mesh = model.mesh
    new_mask = found < 0
    y_draws = np.empty((k_draws, n_loc, l_out))

    # per-draw conditionals grouped by region so each region factors once
    from collections import defaultdict
    by_region = defaultdict(list)
    for i in np.flatnonzero(new_mask):
        by_region[int(region_flat[i])].append(i)

    for k in range(k_draws):
        theta_k = _theta_for_draw(result, template, k, tmap)
        tau_k = result.tau2_draws[k] if result.tau2_draws.size else np.zeros(l_out)
        beta_k = beta_draws[k] if beta_draws is not None and len(beta_draws) else None
        w_loc = np.empty((n_loc, q))
        hit = ~new_mask
        if hit.any():
            w_loc[hit] = result.w_draws[k].reshape(-1, q)[found[hit]]
        for j, rows in by_region.items():
            plist = mesh.other_parents[j] if mesh.has_other[j] else \
                parents_for_other(j, mesh.shape, mesh.nonempty)
            par = model.parent_coords(plist)
            chol_par = robust_cholesky(cov_matrix(par, par, theta_k),
                                       theta_k.marginal_variance())
            idx = np.concatenate([model.ref_idx[p] for p in plist])
            w_par = result.w_draws[k][idx]
            pts = locations[rows]
            c_cross = cov_matrix(pts, par, theta_k)
            reg = scipy.linalg.cho_solve((chol_par, True), c_cross.T).T
            resid = cov_matrix(pts, pts, theta_k) - reg @ c_cross.T
            chol_r = robust_cholesky(0.5 * (resid + resid.T),
                                     theta_k.marginal_variance())
            rng = substream(result.seed, k, j, _PREDICT)
            z = rng.standard_normal(len(rows) * q)
            w_loc[rows] = (reg @ w_par + chol_r @ z).reshape(len(rows), q)
        mean_fixed = x_new @ beta_k if beta_k is not None and x_new.shape[1] else 0.0
        if identity_design:
            signal = w_loc
        else:
            signal = np.einsum("tq,tq->t", z_new, w_loc)[:, None]
        rng = substream(result.seed, k, 1 << 41, _PREDICT)
        noise = rng.standard_normal((n_loc, l_out)) * np.sqrt(tau_k)[None, :]
        y_draws[k] = signal + noise
        if np.ndim(mean_fixed):
            y_draws[k] += mean_fixed[:, None]
        else:
            y_draws[k] += mean_fixed

    mean = y_draws.mean(axis=0)
    sd = y_draws.std(axis=0, ddof=1) if k_draws > 1 else np.zeros_like(mean)
    lower = np.quantile(y_draws, alpha, axis=0)
    upper = np.quantile(y_draws, 1.0 - alpha, axis=0)
    coords_rep = np.repeat(locations, l_out, axis=0)
    variable = np.tile(np.arange(l_out), n_loc)
    return PredictionResult(
        coords=coords_rep, variable=variable,
        mean=mean.reshape(-1), sd=sd.reshape(-1),
        lower=lower.reshape(-1), upper=upper.reshape(-1),
        level=level, n_draws=k_draws)


def _predict_from_summary(locations, found, result, model, x_new, z_new,
                          beta_draws, level, identity_design):
    """Gaussian fallback when only latent summaries were stored."""
    if np.any(found < 0):
        raise PredictionError(
            "summary-only chains can predict only at fitted locations; "
            "store draws to predict at new ones")
    q = model.q
    n_loc = locations.shape[0]
    l_out = result.tau2_draws.shape[1] if result.tau2_draws.size else 1
    w_mean = result.w_mean.reshape(-1, q)[found]
    w_var = (result.w_sd.reshape(-1, q)[found]) ** 2
    tau_mean = result.tau2_draws.mean(axis=0) if result.tau2_draws.size \
        else np.zeros(l_out)
    beta_mean = (np.mean(beta_draws, axis=0)
                 if beta_draws is not None and len(beta_draws) else None)
    fixed = x_new @ beta_mean if beta_mean is not None and x_new.shape[1] else 0.0
    if identity_design:
        mean = w_mean + 0.0
        var = w_var + tau_mean[None, :]
    else:
        mean = (np.einsum("tq,tq->t", z_new, w_mean) + fixed)[:, None]
        var = (np.einsum("tq,tq->t", z_new ** 2, w_var))[:, None] + tau_mean[None, :]
    zq = float(ndtri(0.5 + level / 2.0))
    sd = np.sqrt(var)
    coords_rep = np.repeat(locations, l_out, axis=0)
    variable = np.tile(np.arange(l_out), n_loc)
    return PredictionResult(
        coords=coords_rep, variable=variable,
        mean=mean.reshape(-1), sd=sd.reshape(-1),
        lower=(mean - zq * sd).reshape(-1), upper=(mean + zq * sd).reshape(-1),
        level=level, n_draws=0)


def metrics(pred_mean, truth, mask=None, lower=None, upper=None) -> dict:
    """MAE, RMSE, and (when bounds are given) empirical interval coverage."""
    pred_mean = np.asarray(pred_mean, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    err = pred_mean[mask] - truth[mask]
    out = {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "n": int(mask.sum()),
    }
    if lower is not None and upper is not None:
        lower = np.asarray(lower, dtype=float).reshape(-1)[mask]
        upper = np.asarray(upper, dtype=float).reshape(-1)[mask]
        t = truth[mask]
        out["coverage"] = float(np.mean((t >= lower) & (t <= upper)))
    return out


def effective_sample_size(draws, min_draws: int = 100) -> np.ndarray:
    """ESS per coordinate via the initial-positive-sequence estimator.

    Autocovariances are computed by FFT; the integrated autocorrelation
    time sums consecutive lag pairs while their sum stays positive.  The
    result is clipped to ``[1, N]`` and a constant sequence returns 1.
    """
    x = np.asarray(draws, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    if n < min_draws:
        raise ValueError(f"need at least {min_draws} draws, got {n}")
    out = np.empty(x.shape[1])
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    for col in range(x.shape[1]):
        a = x[:, col] - x[:, col].mean()
        var0 = float(a @ a) / n
        if var0 <= 0:
            out[col] = 1.0
            continue
        f = np.fft.rfft(a, nfft)
        acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n] / n
        rho = acov / acov[0]
        tau = -1.0
        for k in range(0, n // 2):
            pair = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
            if pair <= 0:
                break
            tau += 2.0 * pair
        tau = max(tau, 1.0 / n)
        out[col] = min(max(n / tau, 1.0), float(n))
    return out[0] if squeeze else out
