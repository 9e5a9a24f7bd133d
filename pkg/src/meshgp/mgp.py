"""Block conditional moments, joint densities, precision assembly, KL checks.

The latent field over the reference set factorizes over region blocks: each
block regresses on the stacked values of its parent blocks with coefficient
matrix ``reg_coef`` and residual covariance ``resid_cov``, both derived from
the base cross-covariance.  Congruent (translated) blocks share these
matrices through a prototype cache, which is the main computational lever
on gridded data.

Latent vectors are stacked location-major: reference locations first (in
ascending region order, lexicographic coordinate order within a region),
then non-reference locations, with the ``q`` variables of one location
contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .covariance import CovParams, cov_matrix, robust_cholesky
from .mesh import MeshGraph, parents_for_other
from .tessellation import (PrototypeMaps, RegionAssignment, canonical_form,
                           group_congruent)

LOG_2PI = float(np.log(2.0 * np.pi))

#: Congruence tolerance for prototype grouping, in normalized coordinates.
PROTO_TOL = 1e-8


def _chol_logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def _mvn_logpdf_chol(resid: np.ndarray, chol: np.ndarray) -> float:
    """Zero-mean Gaussian log density from a residual and its Cholesky factor."""
    z = scipy.linalg.solve_triangular(chol, resid, lower=True)
    n = chol.shape[0]
    return -0.5 * float(z @ z) - 0.5 * _chol_logdet(chol) - 0.5 * n * LOG_2PI


@dataclass
class BlockMoments:
    """Conditional moments of one block given its stacked parent block."""

    reg_coef: np.ndarray | None
    resid_cov: np.ndarray
    chol_resid: np.ndarray
    prototype_id: int = -1
    parent_sizes: tuple = ()

    @property
    def dim(self) -> int:
        return self.resid_cov.shape[0]


@dataclass
class MomentCache:
    """Prototype-keyed store of block moments and parent-set factors."""

    moments: dict = field(default_factory=dict)
    parent_factors: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def _grouped_ids(stacks, signatures, tol):
    """Congruence ids for coordinate stacks, grouped within equal signatures."""
    ids = np.full(len(stacks), -1, dtype=np.int64)
    by_sig: dict = {}
    for i, sig in enumerate(signatures):
        by_sig.setdefault(sig, []).append(i)
    for members in by_sig.values():
        canon = [stacks[i] for i in members]
        local = group_congruent(canon, tol)
        for pos, i in enumerate(members):
            ids[i] = members[local[pos]]
    return ids


class MeshedModel:
    """Geometry, graph, and latent layout shared by all chain computations."""

    def __init__(self, assignment: RegionAssignment, mesh: MeshGraph, q: int = 1):
        self.assignment = assignment
        self.mesh = mesh
        self.q = int(q)
        coords = assignment.coords
        self.coords = coords
        self.ndim = coords.shape[1]

        self.ref_blocks = [j for j in range(mesh.n_regions)
                           if len(assignment.ref_members[j]) > 0]
        self.other_blocks = [j for j in range(mesh.n_regions)
                             if len(assignment.other_members[j]) > 0]
        if list(np.flatnonzero(mesh.nonempty)) != self.ref_blocks:
            raise ValueError("mesh non-empty mask does not match the assignment")

        self.block_size = {}
        self.ref_start = {}
        pos = 0
        n_rows = coords.shape[0]
        self._w_pos = np.full(n_rows, -1, dtype=np.int64)
        for j in self.ref_blocks:
            members = assignment.ref_members[j]
            self.ref_start[j] = pos
            self.block_size[j] = len(members)
            self._w_pos[members] = pos + np.arange(len(members))
            pos += len(members)
        self.n_ref = pos
        self.other_start = {}
        self.other_size = {}
        for j in self.other_blocks:
            members = assignment.other_members[j]
            self.other_start[j] = pos
            self.other_size[j] = len(members)
            self._w_pos[members] = pos + np.arange(len(members))
            pos += len(members)
        self.n_other = pos - self.n_ref
        self.n_ref_latent = self.n_ref * self.q
        self.n_latent = pos * self.q

        # latent gather indices per block and per stacked parent set;
        # reference indices address w_ref, other indices address w_other
        self.ref_idx = {j: self._latent_range(self.ref_start[j], self.block_size[j])
                        for j in self.ref_blocks}
        self.other_idx = {
            j: self._latent_range(self.other_start[j] - self.n_ref, self.other_size[j])
            for j in self.other_blocks}
        self.ref_parent_idx = {}
        for j in self.ref_blocks:
            self.ref_parent_idx[j] = self._stack_parent_idx(mesh.parents[j])
        self.other_parent_idx = {}
        for j in self.other_blocks:
            self.other_parent_idx[j] = self._stack_parent_idx(mesh.other_parents[j])

        self._build_prototypes()

    # -- layout helpers -------------------------------------------------

    def _latent_range(self, start_loc: int, n_locs: int) -> np.ndarray:
        return np.arange(start_loc * self.q, (start_loc + n_locs) * self.q)

    def _stack_parent_idx(self, parent_regions) -> np.ndarray:
        if not parent_regions:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.ref_idx[p] for p in parent_regions])

    def block_coords(self, j: int, other: bool = False) -> np.ndarray:
        members = (self.assignment.other_members if other
                   else self.assignment.ref_members)[j]
        return self.coords[members]

    def parent_coords(self, parent_regions) -> np.ndarray:
        if not parent_regions:
            return np.zeros((0, self.ndim))
        return np.vstack([self.block_coords(p) for p in parent_regions])

    def parent_col_offset(self, child: int, parent: int, other: bool = False) -> slice:
        """Column range of ``parent`` inside the child's coefficient matrix."""
        plist = (self.mesh.other_parents if other else self.mesh.parents)[child]
        off = 0
        for p in plist:
            width = self.block_size[p] * self.q
            if p == parent:
                return slice(off, off + width)
            off += width
        raise KeyError(f"region {parent} is not a parent of {child}")

    def row_positions(self) -> np.ndarray:
        """Location-unit position in the stacked latent vector per data row."""
        return self._w_pos

    # -- prototypes ------------------------------------------------------

    def _build_prototypes(self):
        coords = self.coords
        lo = coords.min(axis=0)
        span = coords.max(axis=0) - lo
        span[span <= 0] = 1.0

        def canon(pieces):
            stack = np.vstack([(p - lo) / span for p in pieces])
            return canonical_form(stack, presorted=True)

        m = self.mesh.n_regions
        pair_ref = np.full(m, -1, dtype=np.int64)
        pair_other = np.full(m, -1, dtype=np.int64)
        par_ref = np.full(m, -1, dtype=np.int64)
        par_other = np.full(m, -1, dtype=np.int64)

        stacks, sigs = [], []
        for j in self.ref_blocks:
            pieces = [self.block_coords(j)] + [self.block_coords(p)
                                               for p in self.mesh.parents[j]]
            stacks.append(canon(pieces))
            sigs.append((len(self.assignment.ref_members[j]),
                         tuple(self.block_size[p] for p in self.mesh.parents[j])))
        ids = _grouped_ids(stacks, sigs, PROTO_TOL)
        for pos, j in enumerate(self.ref_blocks):
            pair_ref[j] = self.ref_blocks[ids[pos]] if ids.size else -1

        stacks, sigs = [], []
        for j in self.other_blocks:
            pieces = [self.block_coords(j, other=True)]
            pieces += [self.block_coords(p) for p in self.mesh.other_parents[j]]
            stacks.append(canon(pieces))
            sigs.append((self.other_size[j],
                         tuple(self.block_size[p] for p in self.mesh.other_parents[j])))
        if stacks:
            ids = _grouped_ids(stacks, sigs, PROTO_TOL)
            for pos, j in enumerate(self.other_blocks):
                pair_other[j] = self.other_blocks[ids[pos]]

        # parent-set-only prototypes, grouped jointly across both node kinds
        # so a shared parent geometry gets a single id (and a single cached
        # factor) no matter which side uses it
        entries = []
        for j in self.ref_blocks:
            if self.mesh.parents[j]:
                entries.append((par_ref, j, self.mesh.parents[j]))
        for j in self.other_blocks:
            if self.mesh.other_parents[j]:
                entries.append((par_other, j, self.mesh.other_parents[j]))
        if entries:
            stacks = [canon([self.block_coords(p) for p in plist])
                      for _, _, plist in entries]
            sigs = [tuple(self.block_size[p] for p in plist)
                    for _, _, plist in entries]
            ids = _grouped_ids(stacks, sigs, PROTO_TOL)
            for pos, (out, j, _) in enumerate(entries):
                out[j] = ids[pos]

        self.prototypes = PrototypeMaps(
            xi_ref=pair_ref, xi_other=pair_other,
            xi_parents_ref=par_ref, xi_parents_other=par_other)

        classes: dict = {}
        for j in self.ref_blocks:
            classes.setdefault(int(pair_ref[j]), []).append(j)
        self.ref_proto_classes = [classes[k] for k in sorted(classes)]
        classes = {}
        for j in self.other_blocks:
            classes.setdefault(int(pair_other[j]), []).append(j)
        self.other_proto_classes = [classes[k] for k in sorted(classes)]


def _moments_from_coords(blk_coords, parent_coord_list, params: CovParams,
                         chol_parent=None):
    """Regression-on-parents moments for one block from raw coordinates."""
    scale = params.marginal_variance()
    c_blk = cov_matrix(blk_coords, blk_coords, params)
    if not parent_coord_list or sum(len(p) for p in parent_coord_list) == 0:
        chol = robust_cholesky(c_blk, scale)
        return BlockMoments(reg_coef=None, resid_cov=c_blk, chol_resid=chol), None
    par = np.vstack(parent_coord_list)
    if chol_parent is None:
        chol_parent = robust_cholesky(cov_matrix(par, par, params), scale)
    c_cross = cov_matrix(blk_coords, par, params)
    reg = scipy.linalg.cho_solve((chol_parent, True), c_cross.T).T
    resid = c_blk - reg @ c_cross.T
    resid = 0.5 * (resid + resid.T)
    chol = robust_cholesky(resid, scale)
    sizes = tuple(len(p) for p in parent_coord_list)
    return BlockMoments(reg_coef=reg, resid_cov=resid, chol_resid=chol,
                        parent_sizes=sizes), chol_parent


def compute_block_moments(j: int, model: MeshedModel, params: CovParams,
                          cache: MomentCache | None = None,
                          other: bool = False) -> BlockMoments:
    """Moments of one region's block, consulting ``cache`` by prototype first."""
    proto = model.prototypes.xi_other[j] if other else model.prototypes.xi_ref[j]
    key = ("other" if other else "ref", int(proto))
    if cache is not None and key in cache.moments:
        cache.hits += 1
        return cache.moments[key]
    parent_regions = (model.mesh.other_parents if other else model.mesh.parents)[j]
    parent_proto = (model.prototypes.xi_parents_other
                    if other else model.prototypes.xi_parents_ref)[j]
    chol_parent = None
    if cache is not None and parent_proto >= 0:
        chol_parent = cache.parent_factors.get(int(parent_proto))
    blk = model.block_coords(j, other=other)
    moments, chol_parent = _moments_from_coords(
        blk, [model.block_coords(p) for p in parent_regions], params, chol_parent)
    moments.prototype_id = int(proto)
    if cache is not None:
        cache.misses += 1
        cache.moments[key] = moments
        if parent_proto >= 0 and chol_parent is not None:
            cache.parent_factors.setdefault(int(parent_proto), chol_parent)
    return moments


class BlockMomentSet:
    """All block moments for one value of the covariance parameters."""

    def __init__(self, model: MeshedModel, params: CovParams,
                 caching: bool = True, parents_override: dict | None = None):
        self.model = model
        self.params = params
        self.caching = caching and parents_override is None
        self.cache = MomentCache() if self.caching else None
        self.ref = {}
        self.other = {}
        if parents_override is None:
            for j in model.ref_blocks:
                self.ref[j] = compute_block_moments(j, model, params, self.cache)
            for j in model.other_blocks:
                self.other[j] = compute_block_moments(j, model, params, self.cache,
                                                      other=True)
        else:
            for j in model.ref_blocks:
                plist = parents_override.get(j, model.mesh.parents[j])
                moments, _ = _moments_from_coords(
                    model.block_coords(j),
                    [model.block_coords(p) for p in plist], params)
                self.ref[j] = moments
            for j in model.other_blocks:
                plist = parents_override.get(("other", j), model.mesh.other_parents[j])
                moments, _ = _moments_from_coords(
                    model.block_coords(j, other=True),
                    [model.block_coords(p) for p in plist], params)
                self.other[j] = moments
        self.parents_override = parents_override

    def cache_stats(self) -> tuple:
        if self.cache is None:
            return 0, len(self.ref) + len(self.other)
        return self.cache.hits, self.cache.misses

    def _classes(self, other: bool):
        blocks = self.model.other_blocks if other else self.model.ref_blocks
        if self.caching:
            return (self.model.other_proto_classes if other
                    else self.model.ref_proto_classes)
        return [[j] for j in blocks]

    def _log_density(self, w_blocks: np.ndarray, w_parents: np.ndarray,
                     other: bool) -> float:
        model = self.model
        moments = self.other if other else self.ref
        blk_idx = model.other_idx if other else model.ref_idx
        par_idx = model.other_parent_idx if other else model.ref_parent_idx
        total = 0.0
        for cls in self._classes(other):
            mom = moments[cls[0]]
            w = np.stack([w_blocks[blk_idx[j]] for j in cls])
            if mom.reg_coef is not None:
                wp = np.stack([w_parents[par_idx[j]] for j in cls])
                resid = w - wp @ mom.reg_coef.T
            else:
                resid = w
            z = scipy.linalg.solve_triangular(mom.chol_resid, resid.T, lower=True)
            b, dim = resid.shape
            total += (-0.5 * float(np.sum(z * z))
                      - b * 0.5 * _chol_logdet(mom.chol_resid)
                      - 0.5 * b * dim * LOG_2PI)
        return total

    def log_density_reference(self, w_ref: np.ndarray) -> float:
        """Joint log density of the reference-block field under the DAG model."""
        return self._log_density(w_ref, w_ref, other=False)

    def log_density_other(self, w_other: np.ndarray, w_ref: np.ndarray) -> float:
        """Log density of non-reference blocks given the reference field."""
        if not self.model.other_blocks:
            return 0.0
        return self._log_density(w_other, w_ref, other=True)


def log_density_reference(w_ref, mset: BlockMomentSet) -> float:
    return mset.log_density_reference(np.asarray(w_ref, dtype=float))


def log_density_other(w_other, w_ref, mset: BlockMomentSet) -> float:
    return mset.log_density_other(np.asarray(w_other, dtype=float),
                                  np.asarray(w_ref, dtype=float))


def approx_cov_reference(mset: BlockMomentSet, dense: bool = True) -> np.ndarray:
    """Dense covariance of the reference field implied by the block moments.

    Intended for tests and diagnostics; never called by the sampler.
    """
    model = mset.model
    n = model.n_ref_latent
    imh = np.eye(n)
    rmat = np.zeros((n, n))
    for j in model.ref_blocks:
        rows = model.ref_idx[j]
        mom = mset.ref[j]
        rmat[np.ix_(rows, rows)] = mom.resid_cov
        if mom.reg_coef is None:
            continue
        plist = (mset.parents_override.get(j, model.mesh.parents[j])
                 if mset.parents_override is not None else model.mesh.parents[j])
        off = 0
        for p in plist:
            width = model.block_size[p] * model.q
            cols = model.ref_idx[p]
            imh[np.ix_(rows, cols)] = -mom.reg_coef[:, off:off + width]
            off += width
    t = scipy.linalg.solve_triangular(imh, np.eye(n), lower=True)
    return t @ rmat @ t.T


def assemble_precision(mset: BlockMomentSet) -> scipy.sparse.csr_matrix:
    """Sparse reference-field precision assembled block-by-block.

    The support equals the moralized region graph: diagonal blocks, parent
    pairs, and co-parent pairs.
    """
    model = mset.model
    blocks: dict = {}

    def add(a, b, mat):
        key = (a, b)
        if key in blocks:
            blocks[key] = blocks[key] + mat
        else:
            blocks[key] = mat.copy()

    for j in model.ref_blocks:
        mom = mset.ref[j]
        rinv = scipy.linalg.cho_solve((mom.chol_resid, True), np.eye(mom.dim))
        add(j, j, rinv)
        plist = (mset.parents_override.get(j, model.mesh.parents[j])
                 if mset.parents_override is not None else model.mesh.parents[j])
        if not plist:
            continue
        slices, off = [], 0
        for p in plist:
            width = model.block_size[p] * model.q
            slices.append((p, mom.reg_coef[:, off:off + width]))
            off += width
        for p, hp in slices:
            rinv_h = rinv @ hp
            add(p, j, -hp.T @ rinv)
            add(j, p, -rinv_h)
            for p2, hp2 in slices:
                add(p, p2, hp.T @ (rinv @ hp2))

    n = model.n_ref_latent
    out = scipy.sparse.lil_matrix((n, n))
    for (a, b), mat in blocks.items():
        out[np.ix_(model.ref_idx[a], model.ref_idx[b])] = mat
    return out.tocsr()


def kl_gaussian_zero_mean(cov_q: np.ndarray, cov_p: np.ndarray,
                          jitter_scale: float = 1.0) -> float:
    """KL(N(0, cov_q) || N(0, cov_p)) in nats."""
    lq = robust_cholesky(cov_q, jitter_scale)
    lp = robust_cholesky(cov_p, jitter_scale)
    a = scipy.linalg.solve_triangular(lp, lq, lower=True)
    n = cov_q.shape[0]
    return 0.5 * (float(np.sum(a * a)) - n + _chol_logdet(lp) - _chol_logdet(lq))


def kl_from_dense(mset: BlockMomentSet, dense_cov: np.ndarray) -> float:
    """KL divergence of the meshed approximation from a dense Gaussian law."""
    approx = approx_cov_reference(mset)
    if approx.shape != dense_cov.shape:
        raise ValueError("approximation and dense covariance sizes differ")
    return kl_gaussian_zero_mean(approx, dense_cov,
                                 mset.params.marginal_variance())


class MgpCovariance:
    """Induced cross-covariance of the meshed process at arbitrary locations.

    Evaluates the three cases (both locations in the reference set, one in,
    neither in) from the dense reference covariance plus per-location
    conditional moments.  Test/diagnostic scale only.
    """

    MATCH_DECIMALS = 10

    def __init__(self, mset: BlockMomentSet):
        self.mset = mset
        self.model = mset.model
        self.params = mset.params
        self.q = self.model.q
        self.ctilde = approx_cov_reference(mset)
        self._ref_lookup = {}
        for j in self.model.ref_blocks:
            members = self.model.assignment.ref_members[j]
            for pos, row in enumerate(members):
                key = self._key(self.model.coords[row])
                self._ref_lookup[key] = self.model.ref_start[j] + pos
        self._conditionals: dict = {}

    def _key(self, loc):
        return tuple(np.round(np.asarray(loc, dtype=float), self.MATCH_DECIMALS))

    def _conditional(self, loc):
        """Kriging moments on the region's parent set for a non-reference location."""
        key = self._key(loc)
        hit = self._conditionals.get(key)
        if hit is not None:
            return hit
        from .tessellation import assign_regions
        _, flat = assign_regions(np.atleast_2d(loc), self.model.assignment.part)
        j = int(flat[0])
        mesh = self.model.mesh
        if mesh.has_other[j]:
            plist = mesh.other_parents[j]
        else:
            plist = parents_for_other(j, mesh.shape, mesh.nonempty)
        par = self.model.parent_coords(plist)
        chol_par = robust_cholesky(cov_matrix(par, par, self.params),
                                   self.params.marginal_variance())
        c_cross = cov_matrix(np.atleast_2d(loc), par, self.params)
        reg = scipy.linalg.cho_solve((chol_par, True), c_cross.T).T
        resid = cov_matrix(np.atleast_2d(loc), np.atleast_2d(loc), self.params) \
            - reg @ c_cross.T
        idx = np.concatenate([self.model.ref_idx[p] for p in plist])
        out = (reg, 0.5 * (resid + resid.T), idx, j, par)
        self._conditionals[key] = out
        return out

    def block(self, loc1, loc2) -> np.ndarray:
        """``q x q`` covariance between the process at two locations.

        Non-reference locations sharing a region keep their joint residual
        covariance given the common parent set, matching the block law the
        sampler draws from; for identical locations this is the familiar
        residual-variance term.
        """
        q = self.q
        p1 = self._ref_lookup.get(self._key(loc1))
        p2 = self._ref_lookup.get(self._key(loc2))
        if p1 is not None and p2 is not None:
            return self.ctilde[p1 * q:(p1 + 1) * q, p2 * q:(p2 + 1) * q]
        if p1 is not None:
            return self.block(loc2, loc1).T
        reg1, _, idx1, region1, par1 = self._conditional(loc1)
        if p2 is not None:
            return reg1 @ self.ctilde[np.ix_(idx1, np.arange(p2 * q, (p2 + 1) * q))]
        reg2, _, idx2, region2, _ = self._conditional(loc2)
        out = reg1 @ self.ctilde[np.ix_(idx1, idx2)] @ reg2.T
        if region1 == region2:
            l1 = np.atleast_2d(loc1)
            l2 = np.atleast_2d(loc2)
            out = out + cov_matrix(l1, l2, self.params) \
                - reg1 @ cov_matrix(par1, l2, self.params)
        return out

    def matrix(self, locs) -> np.ndarray:
        """Dense covariance over a list of locations (location-major blocks)."""
        locs = np.atleast_2d(np.asarray(locs, dtype=float))
        n, q = locs.shape[0], self.q
        out = np.empty((n * q, n * q))
        for a in range(n):
            for b in range(a, n):
                blk = self.block(locs[a], locs[b])
                out[a * q:(a + 1) * q, b * q:(b + 1) * q] = blk
                if a != b:
                    out[b * q:(b + 1) * q, a * q:(a + 1) * q] = blk.T
        return out


def mgp_cross_cov(loc1, loc2, mset: BlockMomentSet) -> np.ndarray:
    """One-off evaluation of the induced cross-covariance between two locations."""
    return MgpCovariance(mset).block(loc1, loc2)
