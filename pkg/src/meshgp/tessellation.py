"""Axis-parallel domain partition, reference/other split, prototype detection.

Regions are the cells of a product of per-axis interval lists.  Interval
membership uses half-open ``[lo, hi)`` intervals with the final interval
closed, and locations outside the bounding box are clamped to the nearest
region so that prediction at arbitrary points always resolves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TessellationError(ValueError):
    """Invalid partition configuration or data for the chosen policy."""


REFERENCE_POLICIES = ("observed", "cover", "lattice")


@dataclass(frozen=True)
class AxisPartition:
    """Sorted breakpoints per axis; ``edges[r]`` has ``L_r + 1`` entries."""

    edges: tuple

    @property
    def ndim(self) -> int:
        return len(self.edges)

    @property
    def shape(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_regions(self) -> int:
        return int(np.prod(self.shape))

    def flat_index(self, multi) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    def lows(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges])

    def highs(self) -> np.ndarray:
        return np.array([e[-1] for e in self.edges])


def build_partition(locations, intervals_per_axis, method: str = "width") -> AxisPartition:
    """Partition the bounding box of ``locations`` into axis-parallel regions.

    ``method="width"`` uses equal-width intervals per axis; ``"quantile"``
    splits at per-axis quantiles so that irregular data land in regions of
    roughly equal counts.
    """
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    if locs.shape[0] == 0:
        raise TessellationError("cannot partition an empty location list")
    counts = np.atleast_1d(np.asarray(intervals_per_axis, dtype=int))
    if counts.size == 1:
        counts = np.full(locs.shape[1], counts[0])
    if counts.size != locs.shape[1]:
        raise TessellationError(
            f"{counts.size} interval counts for {locs.shape[1]} axes")
    if np.any(counts < 1):
        raise TessellationError("interval counts must be >= 1")
    edges = []
    for r, L in enumerate(counts):
        col = locs[:, r]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            hi = lo + 1.0
        if method == "width":
            e = np.linspace(lo, hi, L + 1)
        elif method == "quantile":
            e = np.quantile(col, np.linspace(0.0, 1.0, L + 1))
            if np.any(np.diff(e) <= 0):
                raise TessellationError(
                    f"axis {r}: quantile breakpoints are not strictly increasing")
        else:
            raise TessellationError(f"unknown split method {method!r}")
        edges.append(np.asarray(e, dtype=float))
    return AxisPartition(edges=tuple(edges))


def assign_regions(locations, part: AxisPartition):
    """Vectorized region assignment; returns ``(multi, flat)`` index arrays.

    Interior breakpoints follow the half-open rule (a location exactly on a
    breakpoint belongs to the interval on its right); coordinates outside
    the box clamp to the first/last interval.
    """
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    if locs.shape[1] != part.ndim:
        raise TessellationError(
            f"locations have {locs.shape[1]} coordinates, partition has {part.ndim}")
    multi = np.empty(locs.shape, dtype=np.int64)
    for r, e in enumerate(part.edges):
        idx = np.searchsorted(e[1:-1], locs[:, r], side="right")
        multi[:, r] = idx
    flat = np.ravel_multi_index(tuple(multi.T), part.shape)
    return multi, flat


def assign_region(loc, part: AxisPartition) -> tuple:
    """Region multi-index of a single location."""
    multi, _ = assign_regions(np.atleast_2d(loc), part)
    return tuple(int(v) for v in multi[0])


@dataclass
class RegionAssignment:
    """Locations mapped to regions and split into reference/other members.

    ``coords`` may contain more rows than the input when the ``lattice``
    policy filled in missing grid points; those rows are flagged in
    ``synthetic`` and carry no observations.  Member index lists are sorted
    lexicographically by coordinates so congruent regions enumerate their
    locations in the same geometric order.
    """

    part: AxisPartition
    coords: np.ndarray
    policy: str
    n_input: int
    synthetic: np.ndarray
    region_multi: np.ndarray
    region_flat: np.ndarray
    ref_members: list
    other_members: list
    is_reference: np.ndarray

    @property
    def n_regions(self) -> int:
        return self.part.n_regions

    def counts(self) -> tuple:
        n_ref = sum(len(m) for m in self.ref_members)
        n_other = sum(len(m) for m in self.other_members)
        return n_ref, n_other


def _lex_order(coords: np.ndarray, members: np.ndarray) -> np.ndarray:
    if members.size <= 1:
        return members
    sub = coords[members]
    order = np.lexsort(tuple(sub[:, r] for r in range(sub.shape[1] - 1, -1, -1)))
    return members[order]


def detect_lattice(coords: np.ndarray, rel_tol: float = 1e-8, max_blowup: float = 64.0):
    """Per-axis grid values and grid indices if the data live on a lattice.

    Returns ``(axis_values, grid_index)`` or raises if any location is off
    the inferred grid or the full grid would be ``max_blowup`` times larger
    than the data.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n, ndim = coords.shape
    axis_values = []
    grid_index = np.empty((n, ndim), dtype=np.int64)
    for r in range(ndim):
        col = coords[:, r]
        span = max(col.max() - col.min(), 1.0)
        tol = rel_tol * span
        vals = np.unique(col)
        keep = [vals[0]]
        for v in vals[1:]:
            if v - keep[-1] > tol:
                keep.append(v)
        vals = np.asarray(keep)
        idx = np.searchsorted(vals, col)
        idx = np.clip(idx, 0, len(vals) - 1)
        left = np.maximum(idx - 1, 0)
        use_left = np.abs(col - vals[left]) <= np.abs(col - vals[idx])
        idx = np.where(use_left, left, idx)
        if np.any(np.abs(col - vals[idx]) > tol):
            raise TessellationError(f"axis {r}: locations are not on a grid")
        axis_values.append(vals)
        grid_index[:, r] = idx
    full = int(np.prod([len(v) for v in axis_values]))
    if full > max_blowup * n:
        raise TessellationError(
            f"inferred grid has {full} nodes for {n} locations; not treating as a lattice")
    return axis_values, grid_index


def split_reference(locations, observed_mask, part: AxisPartition,
                    policy: str = "observed") -> RegionAssignment:
    """Split locations into per-region reference and other sets.

    Policies:

    - ``observed``: rows with at least one observed outcome become
      reference, all remaining rows are non-reference.
    - ``cover``: every row of a region containing at least one observed row
      becomes reference; regions with no observations map entirely to
      non-reference nodes.
    - ``lattice``: requires grid-structured coordinates.  The grid is
      completed, missing nodes are appended as synthetic unobserved rows,
      and every grid node becomes reference (the non-reference set is
      empty).
    """
    if policy not in REFERENCE_POLICIES:
        raise TessellationError(f"unknown reference policy {policy!r}")
    coords = np.atleast_2d(np.asarray(locations, dtype=float))
    n = coords.shape[0]
    observed = np.asarray(observed_mask, dtype=bool).reshape(n)
    synthetic = np.zeros(n, dtype=bool)

    if policy == "lattice":
        axis_values, grid_index = detect_lattice(coords)
        shape = tuple(len(v) for v in axis_values)
        present = np.zeros(shape, dtype=bool)
        present[tuple(grid_index.T)] = True
        missing = np.argwhere(~present)
        if missing.size:
            extra = np.column_stack(
                [axis_values[r][missing[:, r]] for r in range(len(axis_values))])
            coords = np.vstack([coords, extra])
            synthetic = np.concatenate([synthetic, np.ones(len(extra), dtype=bool)])
            observed = np.concatenate([observed, np.zeros(len(extra), dtype=bool)])
        is_ref = np.ones(coords.shape[0], dtype=bool)

    multi, flat = assign_regions(coords, part)
    if policy == "observed":
        is_ref = observed.copy()
    elif policy == "cover":
        has_obs = np.zeros(part.n_regions, dtype=bool)
        has_obs[flat[observed]] = True
        is_ref = has_obs[flat]
    ref_members = []
    other_members = []
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(part.n_regions + 1))
    for j in range(part.n_regions):
        rows = order[bounds[j]:bounds[j + 1]]
        ref = _lex_order(coords, rows[is_ref[rows]])
        oth = _lex_order(coords, rows[~is_ref[rows]])
        ref_members.append(ref)
        other_members.append(oth)
    return RegionAssignment(
        part=part, coords=coords, policy=policy, n_input=n, synthetic=synthetic,
        region_multi=multi, region_flat=flat, ref_members=ref_members,
        other_members=other_members, is_reference=is_ref)


@dataclass
class PrototypeMaps:
    """Congruence-class ids for cached factorizations.

    ``xi_ref``/``xi_other`` map each region to the prototype of its
    (block, parent-set) coordinate pair; ``xi_parents_ref`` and
    ``xi_parents_other`` map to the prototype of the parent set alone.
    Entries are -1 for regions without the corresponding node.
    """

    xi_ref: np.ndarray
    xi_other: np.ndarray
    xi_parents_ref: np.ndarray
    xi_parents_other: np.ndarray

    def n_unique_parent_prototypes(self) -> int:
        ids = np.concatenate([self.xi_parents_ref, self.xi_parents_other])
        return len(np.unique(ids[ids >= 0]))


def canonical_form(mat: np.ndarray, presorted: bool = False) -> np.ndarray:
    """Translation-canonical form: lexicographically sort rows, shift to row 0."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not presorted and mat.shape[0] > 1:
        order = np.lexsort(tuple(mat[:, r] for r in range(mat.shape[1] - 1, -1, -1)))
        mat = mat[order]
    return mat - mat[0]


def group_congruent(canonical_sets, tol: float) -> np.ndarray:
    """Group already-canonical coordinate sets; id = smallest matching index.

    Sets are bucketed by their shape and coordinates quantized at ``tol``,
    then verified elementwise against the bucket representative, so two
    sets share an id only if they agree within ``tol`` everywhere.
    """
    ids = np.full(len(canonical_sets), -1, dtype=np.int64)
    buckets: dict = {}
    for i, canon in enumerate(canonical_sets):
        key = (canon.shape, np.round(canon / tol).astype(np.int64).tobytes())
        hit = buckets.get(key)
        if hit is not None and np.all(np.abs(canonical_sets[hit] - canon) <= tol):
            ids[i] = ids[hit]
        else:
            buckets[key] = i
            ids[i] = i
    return ids


def detect_prototypes(coordinate_sets, tol: float = 1e-8):
    """Group coordinate sets that are translations of one another.

    Each set is sorted lexicographically by rows (column 1, ties broken by
    the later columns), shifted so its first row is the origin, and grouped
    with every earlier set whose shifted matrix matches elementwise within
    ``tol``.  Coordinates are first normalized to ``[0, 1]`` per axis with
    a single global affine map so that ``tol`` is scale-free.

    Returns ``(ids, canonical)`` where ``ids[i]`` is the smallest index of
    a congruent set and ``canonical[i]`` the shifted sorted matrix.
    """
    sets = [np.atleast_2d(np.asarray(s, dtype=float)) for s in coordinate_sets]
    if not sets:
        return np.zeros(0, dtype=np.int64), []
    for s in sets:
        if s.shape[0] == 0:
            raise TessellationError("prototype detection requires nonempty sets")
    ndim = sets[0].shape[1]
    stacked = np.vstack(sets)
    lo = stacked.min(axis=0)
    span = stacked.max(axis=0) - lo
    span[span <= 0] = 1.0
    canonical = [canonical_form((s - lo) / span) for s in sets]
    ids = group_congruent(canonical, tol)
    return ids, canonical
