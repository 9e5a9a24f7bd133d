"""Colored-parallel block Gibbs sampler with prototype-cached factorizations.

One iteration runs: Metropolis step on the covariance parameters (moments
rebuilt, prototype-cached), reference-block updates color class by color
class (blocks within a class are mutually independent given the rest and
may run on a thread pool), all non-reference blocks at once, then the
conjugate draws for the regression coefficients and noise variances.

Randomness comes from counter-based streams keyed by (iteration, block,
purpose), so results are bit-identical for any thread count and runs can
resume from a checkpoint without storing generator state.
"""

from __future__ import annotations

import os
import pickle
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .covariance import CovParams, FactorizationError, robust_cholesky
from .mgp import BlockMomentSet, MeshedModel

CHECKPOINT_VERSION = 1

# substream purposes
_W_REF, _W_OTHER, _THETA, _BETA, _TAU2, _RESERVOIR, _PREDICT = range(7)
_GLOBAL = 1 << 40


def substream(seed: int, iteration: int, block: int, purpose: int) -> np.random.Generator:
    """Independent generator for one (iteration, block, purpose) cell."""
    bg = np.random.Philox(key=seed, counter=[0, iteration, block, purpose])
    return np.random.Generator(bg)


class ConfigError(ValueError):
    """Invalid sampler configuration."""


@dataclass
class RegressionData:
    """Observed outcomes, designs, and missingness flags, row-aligned to coords.

    Two design modes are supported: a single outcome with covariate row
    ``z`` per location (``z`` is an ``(n, q)`` array, ``l = 1``), or a
    ``q``-variate outcome with identity design (``z is None``, ``l = q``).
    Static covariates ``x`` are only available in the single-outcome mode.
    """

    coords: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray | None
    observed: np.ndarray

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        n = self.coords.shape[0]
        self.y = np.asarray(self.y, dtype=float).reshape(n, -1)
        if self.observed is None:
            self.observed = ~np.isnan(self.y)
        self.observed = np.asarray(self.observed, dtype=bool).reshape(self.y.shape)
        self.observed &= ~np.isnan(self.y)
        self.y = np.where(self.observed, np.nan_to_num(self.y), 0.0)
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1) if self.x is not None \
            else np.zeros((n, 0))
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float).reshape(n, -1)
        if self.p > 0 and self.l != 1:
            raise ConfigError("static covariates require a single outcome")
        if self.z is None and self.l < 1:
            raise ConfigError("identity design needs at least one outcome column")
        if self.z is not None and self.l != 1:
            raise ConfigError("covariate design requires a single outcome column")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def l(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.y.shape[1] if self.z is None else self.z.shape[1]

    def observed_rows(self) -> np.ndarray:
        return self.observed.any(axis=1)


@dataclass
class PriorSpec:
    """Gaussian prior on beta, inverse-gamma on each noise variance, and
    uniform boxes (with optional fixed values) on the covariance parameters."""

    mu_beta: np.ndarray | None = None
    sigma_beta: np.ndarray | None = None
    a_tau: float | np.ndarray = 2.0
    b_tau: float | np.ndarray = 1.0
    theta_bounds: dict = field(default_factory=dict)
    theta_fixed: dict = field(default_factory=dict)

    def tau_shapes(self, l: int):
        a = np.broadcast_to(np.asarray(self.a_tau, dtype=float), (l,)).copy()
        b = np.broadcast_to(np.asarray(self.b_tau, dtype=float), (l,)).copy()
        if np.any(a <= 0) or np.any(b <= 0):
            raise ConfigError("inverse-gamma prior parameters must be positive")
        return a, b


_DEFAULT_BOUNDS = {
    "sigma2": (0.0, np.inf),
    "c": (0.0, np.inf),
    "a1": (0.0, np.inf),
    "beta1": (0.0, 1.0),
    "a2": (0.0, np.inf),
    "beta2": (0.0, 1.0),
    "psi2": (1.0, np.inf),
}


class ThetaMap:
    """Named-vector view over the sampled covariance parameters.

    Which components exist depends on the family; bounds come from the
    prior boxes (falling back to natural supports), and components named in
    ``theta_fixed`` are pinned.  Unbounded components are proposed on the
    log scale, boxed components on the logit scale.
    """

    def __init__(self, params: CovParams, priors: PriorSpec):
        self.names = self._component_names(params)
        self.bounds = {}
        for name in self.names:
            base = name.split("_")[0] if name.startswith(("delta", "v")) else name
            default = _DEFAULT_BOUNDS.get(base, (0.0, np.inf))
            self.bounds[name] = priors.theta_bounds.get(name, default)
        self.fixed = dict(priors.theta_fixed)
        for name in self.fixed:
            if name not in self.names:
                raise ConfigError(f"fixed parameter {name!r} not in this family")
        self.free = [n for n in self.names if n not in self.fixed]

    @staticmethod
    def _component_names(params: CovParams):
        fam = params.family
        if fam == "exponential":
            return ["sigma2", "c"]
        if fam == "gneiting-spacetime":
            return ["sigma2", "c", "a1", "beta1"]
        if fam == "multivariate-nonseparable":
            names = ["sigma2", "c", "a1", "beta1"]
            if params.q == 1:
                return names
            if params.q == 2 and params.psi2 is not None:
                return names + ["psi2"]
            names += ["a2", "beta2"]
            for i in range(params.q):
                for j in range(i + 1, params.q):
                    names.append(f"delta_{i}_{j}")
            return names
        lat = params.latent
        names = []
        for r in range(lat.q):
            names += [f"lsigma1_{r}", f"lsigma2_{r}", f"lphi_{r}"]
        names += ["lalpha", "lbeta", "lphi"]
        for i in range(lat.q):
            for j in range(i + 1, lat.q):
                names.append(f"v_{i}_{j}")
        return names

    def get(self, params: CovParams, name: str) -> float:
        if name.startswith("delta_"):
            _, i, j = name.split("_")
            return float(params.delta[int(i), int(j)])
        if name.startswith(("lsigma1_", "lsigma2_", "lphi_")) and params.latent:
            head, r = name.rsplit("_", 1)
            arr = {"lsigma1": params.latent.sigma1, "lsigma2": params.latent.sigma2,
                   "lphi": params.latent.phi_each}[head]
            return float(arr[int(r)])
        if name.startswith("v_"):
            _, i, j = name.split("_")
            return float(params.latent.vdist[int(i), int(j)])
        if name in ("lalpha", "lbeta"):
            return float(getattr(params.latent, name[1:]))
        if name == "lphi":
            return float(params.latent.phi)
        return float(getattr(params, name))

    def vector(self, params: CovParams) -> np.ndarray:
        return np.array([self.get(params, n) for n in self.names])

    def with_values(self, params: CovParams, updates: dict) -> CovParams:
        kw = {}
        delta = params.delta.copy() if params.delta is not None else None
        lat = params.latent
        lat_kw = {}
        vdist = lat.vdist.copy() if lat is not None else None
        sig1 = lat.sigma1.copy() if lat is not None else None
        sig2 = lat.sigma2.copy() if lat is not None else None
        phis = lat.phi_each.copy() if lat is not None else None
        for name, val in updates.items():
            if name.startswith("delta_"):
                _, i, j = name.split("_")
                delta[int(i), int(j)] = delta[int(j), int(i)] = val
            elif name.startswith("v_"):
                _, i, j = name.split("_")
                vdist[int(i), int(j)] = vdist[int(j), int(i)] = val
            elif name.startswith("lsigma1_"):
                sig1[int(name.rsplit("_", 1)[1])] = val
            elif name.startswith("lsigma2_"):
                sig2[int(name.rsplit("_", 1)[1])] = val
            elif name.startswith("lphi_"):
                phis[int(name.rsplit("_", 1)[1])] = val
            elif name in ("lalpha", "lbeta", "lphi"):
                lat_kw[name[1:] if name != "lphi" else "phi"] = val
            else:
                kw[name] = val
        if delta is not None:
            kw["delta"] = delta
        if lat is not None:
            from .covariance import LatentDistParams
            kw["latent"] = LatentDistParams(
                sigma1=sig1, sigma2=sig2, phi_each=phis,
                alpha=lat_kw.get("alpha", lat.alpha),
                beta=lat_kw.get("beta", lat.beta),
                phi=lat_kw.get("phi", lat.phi), vdist=vdist)
        return params.replace(**kw)

    def in_support(self, name: str, value: float) -> bool:
        lo, hi = self.bounds[name]
        return lo < value < hi

    def to_working(self, name: str, value: float) -> float:
        lo, hi = self.bounds[name]
        if np.isinf(hi):
            return np.log(value)
        u = (value - lo) / (hi - lo)
        return np.log(u) - np.log1p(-u)

    def from_working(self, name: str, t: float) -> float:
        lo, hi = self.bounds[name]
        if np.isinf(hi):
            return np.exp(t)
        return lo + (hi - lo) / (1.0 + np.exp(-t))

    def log_jacobian(self, name: str, value: float) -> float:
        lo, hi = self.bounds[name]
        if np.isinf(hi):
            return np.log(value)
        return np.log(value - lo) + np.log(hi - value) - np.log(hi - lo)

    def start_values(self, params: CovParams, overrides: dict) -> CovParams:
        updates = {}
        for name in self.names:
            if name in overrides:
                updates[name] = float(overrides[name])
            elif name in self.fixed:
                updates[name] = float(self.fixed[name])
            else:
                lo, hi = self.bounds[name]
                if np.isfinite(hi):
                    updates[name] = 0.5 * (lo + hi)
        return self.with_values(params, updates)


@dataclass
class McmcConfig:
    """Run-length, proposal, storage, and parallelism settings."""

    n_iter: int = 1000
    n_burn: int = 500
    thin: int = 1
    seed: int = 0
    step_size: float = 0.1
    step_sizes: dict = field(default_factory=dict)
    n_threads: int = 1
    caching: bool = True
    theta_first: bool = True
    sample_theta: bool = True
    sample_beta: bool = True
    sample_tau2: bool = True
    adapt_steps: bool = True
    target_accept: float = 0.23
    w_storage: str = "summary"  # summary | draws | none
    w_draw_budget_mb: float = 1024.0
    reservoir_size: int = 256
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    progress_every: int = 0
    theta_start: dict = field(default_factory=dict)
    interval_level: float = 0.95

    def validate(self, n_latent: int = 0):
        if self.n_iter < 1 or self.n_burn < 0 or self.n_burn >= self.n_iter:
            raise ConfigError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.w_storage not in ("summary", "draws", "none"):
            raise ConfigError(f"unknown w_storage {self.w_storage!r}")
        if self.w_storage == "draws" and n_latent:
            kept = (self.n_iter - self.n_burn) // self.thin
            need_mb = kept * n_latent * 8 / 2**20
            if need_mb > self.w_draw_budget_mb:
                raise ConfigError(
                    f"storing {kept} latent draws needs {need_mb:.0f} MiB, over the "
                    f"{self.w_draw_budget_mb:.0f} MiB budget; use w_storage='summary'")


@dataclass
class ChainState:
    beta: np.ndarray
    tau2: np.ndarray
    theta: CovParams
    w_ref: np.ndarray
    w_other: np.ndarray
    iteration: int = 0


@dataclass
class ChainResult:
    """Retained draws, latent-field summaries, and run diagnostics."""

    theta_names: list
    beta_draws: np.ndarray
    tau2_draws: np.ndarray
    theta_draws: np.ndarray
    w_mean: np.ndarray
    w_sd: np.ndarray
    w_lower: np.ndarray
    w_upper: np.ndarray
    w_draws: np.ndarray | None
    n_ref_latent: int
    level: float
    accept_rate: float
    cache_hit_rate: float
    time_per_iter: float
    n_iter: int
    n_burn: int
    thin: int
    seed: int

    @property
    def n_kept(self) -> int:
        return self.theta_draws.shape[0]


class _Welford:
    """Streaming mean/variance plus a per-coordinate reservoir for quantiles."""

    def __init__(self, dim: int, reservoir: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.cap = reservoir
        self.store = np.zeros((reservoir, dim)) if reservoir else None

    def add(self, x: np.ndarray, rng: np.random.Generator):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        if self.store is None:
            return
        if self.count <= self.cap:
            self.store[self.count - 1] = x
        else:
            slots = rng.integers(0, self.count, size=x.shape[0])
            hit = slots < self.cap
            self.store[slots[hit], np.flatnonzero(hit)] = x[hit]

    def sd(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1))

    def quantiles(self, lo: float, hi: float):
        filled = min(self.count, self.cap)
        if filled == 0:
            return np.zeros_like(self.mean), np.zeros_like(self.mean)
        block = self.store[:filled]
        return np.quantile(block, lo, axis=0), np.quantile(block, hi, axis=0)


class GibbsSampler:
    """Blocked Gibbs sampler for the hierarchical meshed-process model."""

    def __init__(self, model: MeshedModel, data: RegressionData,
                 priors: PriorSpec, config: McmcConfig,
                 params_template: CovParams):
        if data.n != model.coords.shape[0]:
            raise ConfigError("data rows do not match the model's locations")
        if data.q != model.q:
            raise ConfigError(f"data q={data.q} but model q={model.q}")
        self.model = model
        self.data = data
        self.priors = priors
        self.config = config
        config.validate(model.n_latent)
        self.theta_map = ThetaMap(params_template, priors)
        self.params_template = params_template
        self.a_tau, self.b_tau = priors.tau_shapes(data.l)
        self._prepare_blocks()
        self._prepare_regression()
        self.accept_count = 0
        self.theta_tries = 0
        self.cache_hits = 0
        self.cache_misses = 0
        self._adapt_scale = 1.0
        self._adapt_acc = 0
        self._adapt_n = 0
        self._adapt_frozen = config.n_burn == 0
        self._tau_version = 0

    # -- precomputed per-block data --------------------------------------

    def _prepare_blocks(self):
        model, data = self.model, self.data
        asg = model.assignment
        self.blk_rows = {("ref", j): asg.ref_members[j] for j in model.ref_blocks}
        self.blk_rows.update(
            {("other", j): asg.other_members[j] for j in model.other_blocks})
        self.blk_y = {}
        self.blk_obs = {}
        self.blk_z = {}
        self.blk_x = {}
        for key, rows in self.blk_rows.items():
            self.blk_y[key] = data.y[rows]
            self.blk_obs[key] = data.observed[rows]
            self.blk_x[key] = data.x[rows]
            if data.z is not None:
                z = data.z[rows]
                self.blk_z[key] = (z, np.einsum("tq,tr->tqr", z, z))
        self.color_classes = self.model.mesh.color_classes()
        self.color_blocks = [[j for j in cls if j in model.ref_idx]
                             for cls in self.color_classes]

    def _prepare_regression(self):
        data = self.data
        obs1 = data.observed[:, 0] if data.l >= 1 else None
        if data.p > 0:
            xw = data.x * obs1[:, None]
            self._sxx = xw.T @ data.x
        if self.priors.sigma_beta is not None:
            sb = np.asarray(self.priors.sigma_beta, dtype=float).reshape(data.p, data.p)
            self._beta_prior_prec = np.linalg.inv(sb)
            mu = np.zeros(data.p) if self.priors.mu_beta is None \
                else np.asarray(self.priors.mu_beta, dtype=float).reshape(data.p)
            self._beta_prior_term = self._beta_prior_prec @ mu
        else:
            self._beta_prior_prec = np.zeros((data.p, data.p))
            self._beta_prior_term = np.zeros(data.p)

    # -- RNG --------------------------------------------------------------

    def _stream(self, iteration: int, block: int, purpose: int):
        return substream(self.config.seed, iteration, block, purpose)

    # -- moments and statics ----------------------------------------------

    def _moments(self, theta: CovParams) -> BlockMomentSet:
        mset = BlockMomentSet(self.model, theta, caching=self.config.caching)
        h, m = mset.cache_stats()
        self.cache_hits += h
        self.cache_misses += m
        return mset

    def _rebuild_statics(self, mset: BlockMomentSet):
        """Per-block quantities reused across iterations for a fixed theta."""
        model = self.model
        self.rinv = {}
        self.gmat = {}
        self.static_prec = {}
        self.child_entries = {j: [] for j in model.ref_blocks}
        for kind, blocks, moments in (("ref", model.ref_blocks, mset.ref),
                                      ("other", model.other_blocks, mset.other)):
            for j in blocks:
                mom = moments[j]
                rinv = scipy.linalg.cho_solve((mom.chol_resid, True), np.eye(mom.dim))
                rinv = 0.5 * (rinv + rinv.T)
                self.rinv[(kind, j)] = rinv
                if mom.reg_coef is not None:
                    self.gmat[(kind, j)] = rinv @ mom.reg_coef
        for j in model.ref_blocks:
            prec = self.rinv[("ref", j)].copy()
            for kind, children in (("ref", model.mesh.children[j]),
                                   ("other", model.mesh.other_children[j])):
                for c in children:
                    mom = mset.ref[c] if kind == "ref" else mset.other[c]
                    colsl = model.parent_col_offset(c, j, other=(kind == "other"))
                    hsub = mom.reg_coef[:, colsl]
                    bmat = hsub.T @ self.rinv[(kind, c)]
                    amat = bmat @ hsub
                    prec += amat
                    self.child_entries[j].append((kind, c, colsl, bmat))
            self.static_prec[j] = prec
        self.mset = mset
        self._prec_chol = {}
        self._prec_version = None

    # -- data terms ---------------------------------------------------------

    def _data_precision(self, key, tau2: np.ndarray):
        obs = self.blk_obs[key]
        if self.data.z is None:
            return ("diag", (obs / tau2[None, :]).reshape(-1))
        z, zz = self.blk_z[key]
        wts = obs[:, 0] / tau2[0]
        return ("block", zz * wts[:, None, None])

    def _apply_data_prec(self, prec: np.ndarray, term, n_locs: int):
        q = self.model.q
        kind, payload = term
        if kind == "diag":
            prec[np.diag_indices_from(prec)] += payload
        else:
            view = prec.reshape(n_locs, q, n_locs, q)
            idx = np.arange(n_locs)
            view[idx, :, idx, :] += payload
        return prec

    def _data_mean_term(self, key, beta: np.ndarray, tau2: np.ndarray):
        obs = self.blk_obs[key]
        y = self.blk_y[key]
        if self.data.z is None:
            return ((obs * y) / tau2[None, :]).reshape(-1)
        z, _ = self.blk_z[key]
        resid = y[:, 0] - (self.blk_x[key] @ beta if self.data.p else 0.0)
        wts = obs[:, 0] * resid / tau2[0]
        return (z * wts[:, None]).reshape(-1)

    def _prec_cholesky(self, j: int, tau2: np.ndarray, tau_version: int):
        if self._prec_version != tau_version:
            self._prec_chol = {}
            self._prec_version = tau_version
        chol = self._prec_chol.get(j)
        if chol is None:
            key = ("ref", j)
            prec = self.static_prec[j].copy()
            self._apply_data_prec(prec, self._data_precision(key, tau2),
                                  len(self.blk_rows[key]))
            chol = robust_cholesky(prec, 1.0)
            self._prec_chol[j] = chol
        return chol

    # -- update steps -------------------------------------------------------

    def update_w_reference(self, state: ChainState):
        """Color class by color class draw of every reference block."""
        model = self.model
        mset = self.mset
        it = state.iteration
        w_ref, w_other = state.w_ref, state.w_other

        def one_block(j):
            key = ("ref", j)
            mom = mset.ref[j]
            mu = self._data_mean_term(key, state.beta, state.tau2)
            if mom.reg_coef is not None:
                mu = mu + self.gmat[key] @ w_ref[model.ref_parent_idx[j]]
            wj = w_ref[model.ref_idx[j]]
            for kind, c, colsl, bmat in self.child_entries[j]:
                if kind == "ref":
                    wc = w_ref[model.ref_idx[c]]
                    wpar = w_ref[model.ref_parent_idx[c]]
                    hc = mset.ref[c].reg_coef
                else:
                    wc = w_other[model.other_idx[c]]
                    wpar = w_ref[model.other_parent_idx[c]]
                    hc = mset.other[c].reg_coef
                e = wc - hc @ wpar + hc[:, colsl] @ wj
                mu = mu + bmat @ e
            chol = self._prec_cholesky(j, state.tau2, self._tau_version)
            mean = scipy.linalg.cho_solve((chol, True), mu)
            z = self._stream(it, j, _W_REF).standard_normal(mom.dim)
            w_ref[model.ref_idx[j]] = mean + scipy.linalg.solve_triangular(
                chol.T, z, lower=False)

        for blocks in self.color_blocks:
            if not blocks:
                continue
            if self.config.n_threads > 1 and len(blocks) > 1:
                with ThreadPoolExecutor(max_workers=self.config.n_threads) as pool:
                    list(pool.map(one_block, blocks))
            else:
                for j in blocks:
                    one_block(j)

    def update_w_other(self, state: ChainState):
        """Simultaneous draw of all non-reference blocks given the reference field."""
        model = self.model
        mset = self.mset
        it = state.iteration

        def one_block(j):
            key = ("other", j)
            mom = mset.other[j]
            prec = self.rinv[key].copy()
            self._apply_data_prec(prec, self._data_precision(key, state.tau2),
                                  len(self.blk_rows[key]))
            mu = self._data_mean_term(key, state.beta, state.tau2)
            mu = mu + self.gmat[key] @ state.w_ref[model.other_parent_idx[j]]
            chol = robust_cholesky(prec, 1.0)
            mean = scipy.linalg.cho_solve((chol, True), mu)
            z = self._stream(it, j, _W_OTHER).standard_normal(mom.dim)
            state.w_other[model.other_idx[j]] = mean + scipy.linalg.solve_triangular(
                chol.T, z, lower=False)

        blocks = model.other_blocks
        if self.config.n_threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.config.n_threads) as pool:
                list(pool.map(one_block, blocks))
        else:
            for j in blocks:
                one_block(j)

    def _w_rows(self, state: ChainState) -> np.ndarray:
        w_all = np.concatenate([state.w_ref, state.w_other])
        return w_all.reshape(-1, self.model.q)[self.model.row_positions()]

    def _zw(self, state: ChainState) -> np.ndarray:
        w_rows = self._w_rows(state)
        if self.data.z is None:
            return w_rows
        return np.einsum("tq,tq->t", self.data.z, w_rows)[:, None]

    def update_beta(self, state: ChainState):
        """Conjugate Gaussian draw for the static regression coefficients."""
        data = self.data
        if data.p == 0:
            return
        obs = data.observed[:, 0]
        resid = data.y[:, 0] - self._zw(state)[:, 0]
        prec = self._beta_prior_prec + self._sxx / state.tau2[0]
        rhs = self._beta_prior_term + data.x.T @ (obs * resid) / state.tau2[0]
        try:
            chol = scipy.linalg.cholesky(prec, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise FactorizationError("degenerate design in beta update") from exc
        mean = scipy.linalg.cho_solve((chol, True), rhs)
        z = self._stream(state.iteration, _GLOBAL, _BETA).standard_normal(data.p)
        state.beta = mean + scipy.linalg.solve_triangular(chol.T, z, lower=False)

    def update_tau2(self, state: ChainState):
        """Inverse-gamma draws for the per-outcome noise variances."""
        data = self.data
        zw = self._zw(state)
        rng = self._stream(state.iteration, _GLOBAL, _TAU2)
        xb = data.x @ state.beta if data.p else 0.0
        for r in range(data.l):
            obs = data.observed[:, r]
            resid = np.where(obs, data.y[:, r] - zw[:, r] - (xb if r == 0 else 0.0), 0.0)
            shape = self.a_tau[r] + 0.5 * obs.sum()
            rate = self.b_tau[r] + 0.5 * float(resid @ resid)
            state.tau2[r] = rate / rng.gamma(shape)
        self._tau_version += 1

    def _log_likelihood(self, state: ChainState, mset: BlockMomentSet) -> float:
        return (mset.log_density_reference(state.w_ref)
                + mset.log_density_other(state.w_other, state.w_ref))

    def update_theta(self, state: ChainState) -> bool:
        """Joint Metropolis step over the free covariance parameters."""
        tm = self.theta_map
        if not tm.free:
            return False
        self.theta_tries += 1
        rng = self._stream(state.iteration, _GLOBAL, _THETA)
        eps = rng.standard_normal(len(tm.free))
        log_u = np.log(rng.uniform())
        proposal = {}
        log_jac = 0.0
        for k, name in enumerate(tm.free):
            cur = tm.get(state.theta, name)
            step = self._adapt_scale * self.config.step_sizes.get(
                name, self.config.step_size)
            new = tm.from_working(name, tm.to_working(name, cur) + step * eps[k])
            proposal[name] = new
            log_jac += tm.log_jacobian(name, new) - tm.log_jacobian(name, cur)
        if not all(tm.in_support(n, v) for n, v in proposal.items()):
            self._adapt(False)
            return False
        try:
            theta_new = tm.with_values(state.theta, proposal)
            mset_new = self._moments(theta_new)
            ll_new = self._log_likelihood(state, mset_new)
        except FactorizationError:
            self._adapt(False)
            return False
        ll_cur = self._log_likelihood(state, self.mset)
        if log_u < ll_new - ll_cur + log_jac:
            state.theta = theta_new
            self._rebuild_statics(mset_new)
            self.accept_count += 1
            self._adapt(True)
            return True
        self._adapt(False)
        return False

    def _adapt(self, accepted: bool):
        """Burn-in-only scaling of the proposal steps toward the target rate."""
        if not self.config.adapt_steps or self._adapt_frozen:
            return
        self._adapt_acc += int(accepted)
        self._adapt_n += 1
        if self._adapt_n >= 50:
            rate = self._adapt_acc / self._adapt_n
            self._adapt_scale *= float(np.exp(rate - self.config.target_accept))
            self._adapt_acc = 0
            self._adapt_n = 0

    # -- driver ---------------------------------------------------------------

    def initial_state(self) -> ChainState:
        data = self.data
        theta0 = self.theta_map.start_values(self.params_template,
                                             self.config.theta_start)
        tau0 = np.where(self.a_tau > 1, self.b_tau / np.maximum(self.a_tau - 1, 1e-9),
                        1.0).astype(float)
        return ChainState(
            beta=np.zeros(data.p), tau2=tau0, theta=theta0,
            w_ref=np.zeros(self.model.n_ref_latent),
            w_other=np.zeros(self.model.n_latent - self.model.n_ref_latent),
            iteration=0)

    def _checkpoint(self, state: ChainState, accum: dict):
        path = self.config.checkpoint_path
        if not path:
            return
        payload = {
            "version": CHECKPOINT_VERSION,
            "state": state,
            "accum": accum,
            "adapt": (self._adapt_scale, self._adapt_acc, self._adapt_n,
                      self._adapt_frozen),
            "counters": (self.accept_count, self.theta_tries,
                         self.cache_hits, self.cache_misses),
        }
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            pickle.dump(payload, fh)
        os.replace(tmp, path)

    def run(self, resume_from: str | None = None) -> ChainResult:
        cfg = self.config
        model = self.model
        if resume_from:
            with open(resume_from, "rb") as fh:
                payload = pickle.load(fh)
            if payload.get("version") != CHECKPOINT_VERSION:
                raise ConfigError("checkpoint version mismatch")
            state = payload["state"]
            accum = payload["accum"]
            (self._adapt_scale, self._adapt_acc, self._adapt_n,
             self._adapt_frozen) = payload["adapt"]
            (self.accept_count, self.theta_tries,
             self.cache_hits, self.cache_misses) = payload["counters"]
            start_iter = state.iteration + 1
        else:
            state = self.initial_state()
            kept_cap = (cfg.n_iter - cfg.n_burn) // cfg.thin
            accum = {
                "beta": [], "tau2": [], "theta": [],
                "welford": _Welford(model.n_latent,
                                    cfg.reservoir_size if cfg.w_storage == "summary" else 0),
                "draws": (np.zeros((kept_cap, model.n_latent))
                          if cfg.w_storage == "draws" else None),
                "kept": 0,
            }
            start_iter = 1
        self._tau_version = 0
        self._rebuild_statics(self._moments(state.theta))

        progress_every = cfg.progress_every or max(1, cfg.n_iter // 20)
        t_start = time.perf_counter()
        for it in range(start_iter, cfg.n_iter + 1):
            state.iteration = it
            if cfg.sample_theta and cfg.theta_first:
                self.update_theta(state)
            self.update_w_reference(state)
            self.update_w_other(state)
            if cfg.sample_theta and not cfg.theta_first:
                self.update_theta(state)
            if cfg.sample_beta:
                self.update_beta(state)
            if cfg.sample_tau2:
                self.update_tau2(state)
            if it >= cfg.n_burn:
                self._adapt_frozen = True

            if it > cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
                accum["beta"].append(state.beta.copy())
                accum["tau2"].append(state.tau2.copy())
                accum["theta"].append(self.theta_map.vector(state.theta))
                w_full = np.concatenate([state.w_ref, state.w_other])
                if cfg.w_storage == "summary":
                    accum["welford"].add(w_full, self._stream(it, _GLOBAL, _RESERVOIR))
                elif cfg.w_storage == "draws":
                    accum["draws"][accum["kept"]] = w_full
                if cfg.w_storage != "none":
                    accum["kept"] += 1

            if it % progress_every == 0 or it == cfg.n_iter:
                ll = self._log_likelihood(state, self.mset)
                acc = self.accept_count / max(1, self.theta_tries)
                hits = self.cache_hits / max(1, self.cache_hits + self.cache_misses)
                print(f"iter {it}/{cfg.n_iter} logdens={ll:.4f} "
                      f"accept={acc:.3f} cache_hit={hits:.3f}", file=sys.stderr)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                self._checkpoint(state, accum)

        elapsed = time.perf_counter() - t_start
        n_done = cfg.n_iter - start_iter + 1
        return self._result(state, accum, elapsed / max(1, n_done))

    def _result(self, state: ChainState, accum: dict, per_iter: float) -> ChainResult:
        cfg = self.config
        model = self.model
        kept = accum["kept"] if cfg.w_storage != "none" else len(accum["theta"])
        level = cfg.interval_level
        alpha = 0.5 * (1.0 - level)
        if cfg.w_storage == "draws" and accum["draws"] is not None and kept:
            draws = accum["draws"][:kept]
            w_mean = draws.mean(axis=0)
            w_sd = draws.std(axis=0, ddof=1) if kept > 1 else np.zeros(model.n_latent)
            w_lower = np.quantile(draws, alpha, axis=0)
            w_upper = np.quantile(draws, 1.0 - alpha, axis=0)
        elif cfg.w_storage == "summary":
            wf = accum["welford"]
            draws = None
            w_mean, w_sd = wf.mean.copy(), wf.sd()
            w_lower, w_upper = wf.quantiles(alpha, 1.0 - alpha)
        else:
            draws = None
            w_mean = w_sd = w_lower = w_upper = np.zeros(model.n_latent)
        total = self.cache_hits + self.cache_misses
        return ChainResult(
            theta_names=list(self.theta_map.names),
            beta_draws=np.array(accum["beta"]).reshape(len(accum["beta"]), -1),
            tau2_draws=np.array(accum["tau2"]).reshape(len(accum["tau2"]), -1),
            theta_draws=np.array(accum["theta"]).reshape(len(accum["theta"]), -1),
            w_mean=w_mean, w_sd=w_sd, w_lower=w_lower, w_upper=w_upper,
            w_draws=draws, n_ref_latent=model.n_ref_latent, level=level,
            accept_rate=self.accept_count / max(1, self.theta_tries),
            cache_hit_rate=self.cache_hits / total if total else 0.0,
            time_per_iter=per_iter, n_iter=cfg.n_iter, n_burn=cfg.n_burn,
            thin=cfg.thin, seed=cfg.seed)


def run_chain(model: MeshedModel, data: RegressionData, priors: PriorSpec,
              config: McmcConfig, params_template: CovParams,
              resume_from: str | None = None) -> ChainResult:
    """Build a sampler and run the full schedule; see :class:`GibbsSampler`."""
    sampler = GibbsSampler(model, data, priors, config, params_template)
    return sampler.run(resume_from=resume_from)
