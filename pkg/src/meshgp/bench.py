"""Timing suites: per-iteration scaling in n, and the caching payoff."""

from __future__ import annotations

import time

import numpy as np

from .covariance import CovParams
from .gibbs import GibbsSampler, McmcConfig, PriorSpec, RegressionData
from .mesh import build_cubic_mesh
from .mgp import MeshedModel
from .synth import SynthSpec, generate
from .tessellation import build_partition, split_reference


def _lattice_problem(grid_shape, intervals, seed, tau2=0.05):
    params = CovParams(family="exponential", sigma2=1.0, c=6.0)
    ds = generate(SynthSpec(grid_shape=grid_shape, params=params, tau2=tau2,
                            seed=seed, intervals=intervals, dense_limit=4096))
    part = build_partition(ds.coords, intervals)
    asg = split_reference(ds.coords, np.ones(ds.n, dtype=bool), part, "observed")
    mesh = build_cubic_mesh(part.shape, [len(m) > 0 for m in asg.ref_members],
                            [len(m) > 0 for m in asg.other_members])
    model = MeshedModel(asg, mesh, q=1)
    data = RegressionData(coords=ds.coords, y=ds.y, x=None,
                          z=np.ones((ds.n, 1)), observed=None)
    return model, data, params


def time_iterations(model, data, params, n_iter=10, warmup=2, caching=True,
                    seed=0) -> float:
    """Median wall time of one full Gibbs iteration."""
    cfg = McmcConfig(n_iter=n_iter + warmup, n_burn=0, thin=1, seed=seed,
                     caching=caching, adapt_steps=False, w_storage="none",
                     progress_every=10 ** 9)
    priors = PriorSpec(theta_bounds={"sigma2": (0.0, 50.0), "c": (0.0, 200.0)})
    sampler = GibbsSampler(model, data, priors, cfg, params)
    state = sampler.initial_state()
    sampler._rebuild_statics(sampler._moments(state.theta))
    times = []
    for it in range(1, n_iter + warmup + 1):
        state.iteration = it
        t0 = time.perf_counter()
        sampler.update_theta(state)
        sampler.update_w_reference(state)
        sampler.update_w_other(state)
        sampler.update_tau2(state)
        if it > warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scaling_benchmark(seed=0, doublings=3, base_shape=(32, 16), n_iter=10):
    """Per-iteration time across size doublings at fixed block size (4x4)."""
    rows = []
    shape = base_shape
    for _ in range(doublings + 1):
        intervals = (shape[0] // 4, shape[1] // 4)
        model, data, params = _lattice_problem(shape, intervals, seed)
        per_iter = time_iterations(model, data, params, n_iter=n_iter, seed=seed)
        rows.append({"n": int(np.prod(shape)), "shape": shape,
                     "per_iter": per_iter})
        shape = (shape[1] * 2, shape[0]) if shape[0] >= shape[1] \
            else (shape[0], shape[1] * 2)
        shape = (max(shape), min(shape))
    return rows


def caching_benchmark(seed=0, grid=(36, 36), intervals=(6, 6), n_iter=8):
    """Cached vs uncached per-iteration time on a lattice with large regions."""
    model, data, params = _lattice_problem(grid, intervals, seed)
    cached = time_iterations(model, data, params, n_iter=n_iter, caching=True,
                             seed=seed)
    uncached = time_iterations(model, data, params, n_iter=n_iter, caching=False,
                               seed=seed)
    return {"cached": cached, "uncached": uncached,
            "n": int(np.prod(grid)), "regions": int(np.prod(intervals))}
