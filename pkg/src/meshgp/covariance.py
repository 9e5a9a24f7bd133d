"""Base cross-covariance functions and covariance-matrix assembly.

Four stationary families are supported, selected by the ``family`` tag of
:class:`CovParams`:

``exponential``
    ``sigma2 * exp(-c * ||h||)`` on purely spatial coordinates, one variable.
``gneiting-spacetime``
    Non-separable space-time covariance for one variable; the last
    coordinate of every location is treated as time.
``multivariate-nonseparable``
    Multivariate extension of the space-time form in which each variable
    pair ``(i, j)`` interacts through a latent dissimilarity ``delta_ij``.
    Reduces exactly to ``gneiting-spacetime`` when ``q = 1``.
``latent-distance-multivariate``
    Purely spatial multivariate covariance built from latent inter-variable
    distances (see :class:`LatentDistParams`).

The space-time families are written with squared lags (``||h||**2``,
``u**2``) inside the decay functions by default.  The literature is
ambiguous on this point: with squared lags the purely spatial limit is a
Gaussian-shaped kernel, while the classical exponential covariance needs
unsquared distances.  Both behaviours are available through
``CovParams.squared_lags``; the default keeps the squared form.  A similar
ambiguity exists for whether the variable decay ``psi2`` is evaluated at
``delta**2`` or ``delta``; ``CovParams.psi2_of_squared`` exposes both.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

FAMILIES = (
    "exponential",
    "gneiting-spacetime",
    "multivariate-nonseparable",
    "latent-distance-multivariate",
)

_TEMPORAL_FAMILIES = ("gneiting-spacetime", "multivariate-nonseparable")

#: Relative jitter added to the diagonal before any Cholesky factorization.
JITTER_REL = 1e-9

#: Escalation factor and retry count when a factorization fails.
JITTER_GROWTH = 10.0
JITTER_RETRIES = 3


class CovarianceError(ValueError):
    """Invalid covariance parameters or evaluation arguments."""


class FactorizationError(RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""


def robust_cholesky(mat: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lower Cholesky factor of ``mat + jitter*I`` with escalating jitter.

    ``scale`` sets the magnitude of the jitter (typically the marginal
    variance of the matrix being factored); the initial jitter is
    ``JITTER_REL * scale`` and grows by ``JITTER_GROWTH`` on each retry.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected square matrix, got shape {mat.shape}")
    n = mat.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    jitter = JITTER_REL * float(scale)
    eye = np.eye(n)
    for _ in range(JITTER_RETRIES + 1):
        try:
            return scipy.linalg.cholesky(mat + jitter * eye, lower=True)
        except scipy.linalg.LinAlgError:
            jitter *= JITTER_GROWTH
    raise FactorizationError(
        f"Cholesky failed for {n}x{n} matrix after jitter up to {jitter / JITTER_GROWTH:g}"
    )


def psi(x, a: float, beta: float):
    """Decay function ``(a * sqrt(x) + 1)**beta`` with ``psi(0) == 1`` exactly.

    ``x`` must be non-negative; the 1/2 exponent inside is fixed.
    """
    if a <= 0:
        raise CovarianceError(f"psi scale must be positive, got {a}")
    if not 0.0 <= beta <= 1.0:
        raise CovarianceError(f"psi exponent must lie in [0, 1], got {beta}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise CovarianceError("psi argument must be non-negative")
    return (a * np.sqrt(x) + 1.0) ** beta


@dataclass
class LatentDistParams:
    """Parameters of the latent-distance multivariate family.

    ``sigma1[r]``/``sigma2[r]`` weight the shared and variable-specific
    components of variable ``r``, ``phi_each[r]`` is the specific spatial
    decay, and ``vdist`` holds the latent inter-variable distances
    ``||v_ij||`` (symmetric, zero diagonal).
    """

    sigma1: np.ndarray
    sigma2: np.ndarray
    phi_each: np.ndarray
    alpha: float
    beta: float
    phi: float
    vdist: np.ndarray

    def __post_init__(self):
        self.sigma1 = np.atleast_1d(np.asarray(self.sigma1, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.phi_each = np.atleast_1d(np.asarray(self.phi_each, dtype=float))
        self.vdist = np.asarray(self.vdist, dtype=float)
        q = self.sigma1.size
        if self.sigma2.size != q or self.phi_each.size != q:
            raise CovarianceError("sigma1, sigma2 and phi_each must share length")
        if self.vdist.shape != (q, q):
            raise CovarianceError(f"vdist must be {q}x{q}")
        if not np.allclose(self.vdist, self.vdist.T):
            raise CovarianceError("vdist must be symmetric")
        if np.any(np.abs(np.diag(self.vdist)) > 0):
            raise CovarianceError("vdist must have a zero diagonal")
        for name, val in (("alpha", self.alpha), ("beta", self.beta), ("phi", self.phi)):
            if val <= 0:
                raise CovarianceError(f"{name} must be positive")
        if np.any(self.sigma1 <= 0) or np.any(self.sigma2 <= 0) or np.any(self.phi_each <= 0):
            raise CovarianceError("latent-distance scale parameters must be positive")

    @property
    def q(self) -> int:
        return self.sigma1.size

    def shared_corr(self, dist, i: int, j: int):
        """Shared-component correlation at spatial distance ``dist``."""
        scale = np.exp(self.beta * np.log1p(self.alpha * self.vdist[i, j]))
        return np.exp(-self.phi * np.asarray(dist, dtype=float) / np.sqrt(scale)) / scale


@dataclass
class CovParams:
    """All covariance and noise parameters for one model.

    ``delta`` stores the latent dissimilarity matrix used for ``q > 2``;
    for exactly two variables the scalar value of ``psi2`` at the single
    dissimilarity can be stored (and sampled) directly through ``psi2``.
    The inner exponents of the two ``psi`` decays are fixed at 1/2.
    """

    family: str = "exponential"
    sigma2: float = 1.0
    c: float = 1.0
    a1: float = 1.0
    beta1: float = 0.5
    a2: float = 1.0
    beta2: float = 0.5
    delta: np.ndarray | None = None
    psi2: float | None = None
    tau2: np.ndarray | None = None
    q: int = 1
    spatial_dims: int | None = None
    squared_lags: bool = True
    psi2_of_squared: bool = True
    latent: LatentDistParams | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise CovarianceError(f"unknown covariance family {self.family!r}")
        if self.family == "latent-distance-multivariate":
            if self.latent is None:
                raise CovarianceError("latent-distance family requires LatentDistParams")
            self.q = self.latent.q
        else:
            for name, val in (("sigma2", self.sigma2), ("c", self.c),
                              ("a1", self.a1), ("a2", self.a2)):
                if val <= 0:
                    raise CovarianceError(f"{name} must be positive, got {val}")
            for name, val in (("beta1", self.beta1), ("beta2", self.beta2)):
                if not 0.0 <= val <= 1.0:
                    raise CovarianceError(f"{name} must lie in [0, 1], got {val}")
        if self.family in ("exponential", "gneiting-spacetime") and self.q != 1:
            raise CovarianceError(f"family {self.family!r} is univariate")
        if self.family == "multivariate-nonseparable" and self.q > 1:
            if self.q == 2:
                if self.psi2 is None and self.delta is None:
                    raise CovarianceError("q=2 needs either psi2 or a delta matrix")
                if self.psi2 is not None and self.psi2 < 1.0:
                    raise CovarianceError("psi2 must be >= 1")
            elif self.delta is None:
                raise CovarianceError("q>2 needs a delta matrix")
        if self.delta is not None:
            self.delta = np.asarray(self.delta, dtype=float)
            if self.delta.shape != (self.q, self.q):
                raise CovarianceError(f"delta must be {self.q}x{self.q}")
            if not np.allclose(self.delta, self.delta.T):
                raise CovarianceError("delta must be symmetric")
            if np.any(np.abs(np.diag(self.delta)) > 0):
                raise CovarianceError("delta must have zero diagonal")
            off = self.delta[~np.eye(self.q, dtype=bool)]
            if self.q > 1 and np.any(off <= 0):
                raise CovarianceError("off-diagonal delta entries must be positive")
        if self.tau2 is not None:
            self.tau2 = np.atleast_1d(np.asarray(self.tau2, dtype=float))
            if np.any(self.tau2 <= 0):
                raise CovarianceError("tau2 must be strictly positive")

    @property
    def temporal(self) -> bool:
        """Whether the last coordinate of each location is a time axis."""
        return self.family in _TEMPORAL_FAMILIES

    def marginal_variance(self) -> float:
        if self.family == "latent-distance-multivariate":
            lat = self.latent
            return float(np.max(lat.sigma1**2 + lat.sigma2**2))
        return self.sigma2

    def replace(self, **kw) -> "CovParams":
        return replace(self, **kw)

    def psi2_value(self, i: int, j: int) -> float:
        """Variable-pair decay ``psi2`` evaluated for variables ``(i, j)``."""
        if i == j:
            return 1.0
        if self.q == 2 and self.psi2 is not None:
            return float(self.psi2)
        if self.delta is None:
            raise CovarianceError("delta matrix required for this variable pair")
        d = self.delta[i, j]
        arg = d * d if self.psi2_of_squared else d
        return float(psi(arg, self.a2, self.beta2))


def _check_index(i: int, q: int) -> None:
    if not 0 <= i < q:
        raise CovarianceError(f"variable index {i} out of range for q={q}")


def _wants_plain_distance(p: CovParams) -> bool:
    """Families (or the unsquared mode) evaluating kernels at plain distances."""
    return (not p.squared_lags
            or p.family in ("exponential", "latent-distance-multivariate"))


def _split_spacetime(coords: np.ndarray, p: CovParams):
    """Split coordinates into spatial part and time column per the family."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if p.temporal:
        if coords.shape[1] < 2:
            raise CovarianceError("space-time families need at least 2 coordinates")
        return coords[:, :-1], coords[:, -1]
    return coords, None


def _lag_grids(locs_a: np.ndarray, locs_b: np.ndarray, p: CovParams):
    """Pairwise spatial and temporal lags, pre-shaped for the active mode.

    Returns ``(hh, uu, d)`` where ``hh`` is ``||h||**2`` (or ``||h||``) and
    ``uu`` is ``u**2`` (or ``|u|``) depending on ``p.squared_lags``, and
    ``d`` is the number of spatial dimensions.
    """
    sa, ta = _split_spacetime(locs_a, p)
    sb, tb = _split_spacetime(locs_b, p)
    if sa.shape[1] != sb.shape[1]:
        raise CovarianceError("location sets have mismatched dimension")
    diff = sa[:, None, :] - sb[None, :, :]
    hh = np.einsum("abk,abk->ab", diff, diff)
    if ta is not None:
        du = ta[:, None] - tb[None, :]
        uu = du * du
    else:
        uu = None
    if _wants_plain_distance(p):
        hh = np.sqrt(hh)
        if uu is not None:
            uu = np.sqrt(uu)
    d = p.spatial_dims if p.spatial_dims is not None else sa.shape[1]
    return hh, uu, d


def _pair_kernel(hh, uu, d: int, i: int, j: int, p: CovParams):
    """Covariance of variables ``(i, j)`` at pre-shaped lags ``(hh, uu)``."""
    if p.family == "exponential":
        return p.sigma2 * np.exp(-p.c * hh)
    if p.family == "latent-distance-multivariate":
        lat = p.latent
        shared = lat.shared_corr(hh, i, j)
        if i == j:
            own = np.exp(-lat.phi_each[i] * hh)
            return lat.sigma1[i] ** 2 * shared + lat.sigma2[i] ** 2 * own
        return lat.sigma1[i] * lat.sigma1[j] * shared
    # space-time forms (univariate and multivariate)
    p2 = p.psi2_value(i, j)
    p1 = psi(uu / p2, p.a1, p.beta1)
    return p.sigma2 * p1 ** (-0.5 * d) * p2 ** (-0.5) * np.exp(-p.c * hh / p1)


def cross_cov(h, u: float, i: int, j: int, p: CovParams) -> float:
    """Covariance between variables ``i`` and ``j`` at lag ``(h, u)``.

    ``h`` is the spatial lag vector (its length sets the spatial dimension
    unless ``p.spatial_dims`` overrides it) and ``u`` the temporal lag;
    ``u`` is ignored by the purely spatial families.  Indices are 0-based.
    """
    _check_index(i, p.q)
    _check_index(j, p.q)
    h = np.atleast_1d(np.asarray(h, dtype=float))
    hh = float(h @ h)
    uu = float(u) ** 2
    if _wants_plain_distance(p):
        hh = np.sqrt(hh)
        uu = np.sqrt(uu)
    if p.family in ("exponential", "latent-distance-multivariate") and u not in (0, 0.0, None):
        raise CovarianceError("purely spatial family given a temporal lag")
    d = p.spatial_dims if p.spatial_dims is not None else h.size
    return float(_pair_kernel(hh, uu, d, i, j, p))


def cross_cov_latent_distance(h, i: int, j: int, params: LatentDistParams) -> float:
    """Latent-distance cross-covariance at spatial lag ``h`` (0-based indices)."""
    _check_index(i, params.q)
    _check_index(j, params.q)
    h = np.atleast_1d(np.asarray(h, dtype=float))
    dist = float(np.sqrt(h @ h))
    shared = params.shared_corr(dist, i, j)
    if i == j:
        return float(params.sigma1[i] ** 2 * shared
                     + params.sigma2[i] ** 2 * np.exp(-params.phi_each[i] * dist))
    return float(params.sigma1[i] * params.sigma1[j] * shared)


def cov_matrix(locs_a, locs_b, p: CovParams) -> np.ndarray:
    """Dense cross-covariance matrix between two location sets.

    Rows and columns are location-major: entry block ``(a, b)`` is the
    ``q x q`` covariance between the variables at ``locs_a[a]`` and
    ``locs_b[b]``.  The result is exactly symmetric when the two sets are
    the same array.
    """
    locs_a = np.atleast_2d(np.asarray(locs_a, dtype=float))
    locs_b = np.atleast_2d(np.asarray(locs_b, dtype=float))
    if locs_a.shape[1] != locs_b.shape[1]:
        raise CovarianceError(
            f"dimension mismatch: {locs_a.shape[1]} vs {locs_b.shape[1]} coordinates")
    hh, uu, d = _lag_grids(locs_a, locs_b, p)
    na, nb, q = locs_a.shape[0], locs_b.shape[0], p.q
    out = np.empty((na * q, nb * q))
    view = out.reshape(na, q, nb, q)
    for i in range(q):
        for j in range(i, q):
            block = _pair_kernel(hh, uu, d, i, j, p)
            view[:, i, :, j] = block
            if i != j:
                view[:, j, :, i] = block
    return out
