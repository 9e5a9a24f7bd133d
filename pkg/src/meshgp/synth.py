"""Synthetic lattice datasets: latent-field simulation, cloud masks, sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import CovParams, cov_matrix, robust_cholesky
from .mesh import build_cubic_mesh
from .mgp import BlockMomentSet, MeshedModel
from .tessellation import build_partition, split_reference


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    """Grid geometry, generating parameters, cloud protocol, and seed."""

    grid_shape: tuple
    params: CovParams
    tau2: float | np.ndarray = 0.05
    seed: int = 0
    intervals: tuple | None = None
    dense_limit: int = 4000
    force_dense: bool = False
    cloud_radius: float = float(np.sqrt(0.1))
    n_cloud_times: int = 6
    n_blank_times: int = 2
    blank_keep: int = 10

    def __post_init__(self):
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        if any(s < 1 for s in self.grid_shape):
            raise SynthError("grid axes must be positive")
        self.tau2 = np.atleast_1d(np.asarray(self.tau2, dtype=float))
        if np.any(self.tau2 < 0):
            raise SynthError("tau2 must be non-negative")


@dataclass
class SynthDataset:
    coords: np.ndarray
    w_true: np.ndarray   # (n, q)
    y: np.ndarray        # (n, l)
    observed: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]


def grid_coords(shape) -> np.ndarray:
    """Row-major product grid over the unit cube, one axis per entry of shape."""
    axes = [np.linspace(0.0, 1.0, s) if s > 1 else np.zeros(1) for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def _sample_from_dag(coords, spec: SynthSpec, rng) -> np.ndarray:
    """Sequential block simulation along the DAG; exact for the meshed law."""
    if spec.intervals is None:
        raise SynthError("DAG sampling needs per-axis interval counts")
    part = build_partition(coords, spec.intervals)
    asg = split_reference(coords, np.ones(coords.shape[0], dtype=bool), part,
                          policy="observed")
    mesh = build_cubic_mesh(part.shape, [len(m) > 0 for m in asg.ref_members],
                            [len(m) > 0 for m in asg.other_members])
    model = MeshedModel(asg, mesh, q=spec.params.q)
    mset = BlockMomentSet(model, spec.params)
    w = np.zeros(model.n_ref_latent)
    for j in model.ref_blocks:  # ascending flat order is topological
        mom = mset.ref[j]
        z = rng.standard_normal(mom.dim)
        draw = mom.chol_resid @ z
        if mom.reg_coef is not None:
            draw += mom.reg_coef @ w[model.ref_parent_idx[j]]
        w[model.ref_idx[j]] = draw
    # back to original row order
    pos = model.row_positions()
    return w.reshape(-1, spec.params.q)[pos]


def generate(spec: SynthSpec) -> SynthDataset:
    """Simulate the latent field and noisy outcomes on the grid.

    Small grids sample the field exactly from the dense law; larger ones
    (above ``dense_limit`` locations, unless ``force_dense``) fall back to
    sequential simulation along the mesh DAG.
    """
    coords = grid_coords(spec.grid_shape)
    n = coords.shape[0]
    q = spec.params.q
    rng = np.random.default_rng(spec.seed)
    if n <= spec.dense_limit or spec.force_dense:
        cov = cov_matrix(coords, coords, spec.params)
        chol = robust_cholesky(cov, spec.params.marginal_variance())
        w_rows = (chol @ rng.standard_normal(n * q)).reshape(n, q)
    else:
        if spec.intervals is None:
            raise SynthError(
                f"{n} locations exceed the dense limit {spec.dense_limit}; "
                "pass intervals for DAG sampling or set force_dense")
        w_rows = _sample_from_dag(coords, spec, rng)
    l_out = q if q > 1 else 1
    tau2 = np.broadcast_to(spec.tau2, (l_out,))
    noise = rng.standard_normal((n, l_out)) * np.sqrt(tau2)[None, :]
    signal = w_rows if q > 1 else w_rows[:, :1]
    y = signal + noise
    return SynthDataset(coords=coords, w_true=w_rows, y=y,
                        observed=np.ones_like(y, dtype=bool))


def apply_clouds(ds: SynthDataset, spec: SynthSpec, seed: int | None = None) -> np.ndarray:
    """Mask outcomes behind synthetic clouds; returns the new observed mask.

    At each selected time slice a disc of the given radius (center uniform
    on the unit square) is hidden; a further set of time slices is blanked
    entirely except for a few randomly kept locations.  Outcome values are
    never altered, only the mask.
    """
    if len(spec.grid_shape) < 3:
        raise SynthError("cloud masking expects two spatial axes plus time")
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    observed = ds.observed.copy()
    times = np.unique(ds.coords[:, -1])
    n_cloud = min(spec.n_cloud_times, len(times))
    cloud_times = rng.choice(times, size=n_cloud, replace=False)
    if spec.cloud_radius > 0:
        for t in cloud_times:
            center = rng.uniform(size=2)
            at_t = ds.coords[:, -1] == t
            d2 = ((ds.coords[:, 0] - center[0]) ** 2
                  + (ds.coords[:, 1] - center[1]) ** 2)
            observed[at_t & (d2 <= spec.cloud_radius ** 2)] = False
    remaining = np.setdiff1d(times, cloud_times)
    n_blank = min(spec.n_blank_times, len(remaining))
    blank_times = rng.choice(remaining, size=n_blank, replace=False)
    for t in blank_times:
        rows = np.flatnonzero(ds.coords[:, -1] == t)
        keep = rng.choice(rows, size=min(spec.blank_keep, len(rows)), replace=False)
        observed[rows] = False
        observed[keep] = True
    return observed


def parameter_grid() -> list:
    """The 81 generating combinations of the synthetic study: noise variance,
    temporal range, space-time interaction, and spatial range."""
    out = []
    for tau2 in (1.0 / 1000, 1.0 / 20, 1.0 / 10):
        for a1 in (5.0, 50.0, 500.0):
            for beta1 in (1.0 / 20, 0.5, 1.0 - 1.0 / 20):
                for c in (1.0, 5.0, 25.0):
                    out.append({"tau2": tau2, "a1": a1, "beta1": beta1, "c": c})
    return out
