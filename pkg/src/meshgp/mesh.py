"""Cubic DAG over region nodes: parents, coloring, Markov blankets.

Each region with reference locations gets a reference node; regions with
non-reference locations get a childless "other" node.  The parent of a
reference node along axis ``h`` is the nearest preceding non-empty node on
that axis, skipping empty regions, so every reference node has at most one
parent per axis and edges always point lexicographically forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Mesh construction failed (typically: no reference regions)."""


@dataclass
class MeshGraph:
    """Immutable cubic DAG over regions, with a verified node coloring.

    ``parents[j]``/``children[j]`` list flat region ids of reference-node
    edges; ``other_parents[j]`` lists the (reference) parents of region
    ``j``'s other node, empty where the region has none.  ``colors`` holds
    -1 for regions without a reference node.
    """

    shape: tuple
    nonempty: np.ndarray
    has_other: np.ndarray
    parents: list
    children: list
    other_parents: list
    other_children: list
    colors: np.ndarray
    n_colors: int

    @property
    def n_regions(self) -> int:
        return int(np.prod(self.shape))

    def multi_index(self, flat: int) -> tuple:
        return tuple(int(v) for v in np.unravel_index(flat, self.shape))

    def ref_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.nonempty)

    def color_classes(self) -> list:
        """Reference nodes grouped by color, colors in ascending order."""
        out = []
        for c in range(self.n_colors):
            out.append(np.flatnonzero(self.nonempty & (self.colors == c)))
        return out

    def dump_edges(self, path) -> None:
        """Write the DAG as one ``parent child`` pair per line.

        Node names are ``a`` or ``b`` followed by the comma-joined region
        multi-index, e.g. ``a2,3 b2,4``.
        """
        def name(kind, flat):
            return kind + ",".join(str(v) for v in self.multi_index(flat))

        with open(path, "w", encoding="utf-8") as fh:
            for j in range(self.n_regions):
                if self.nonempty[j]:
                    for p in self.parents[j]:
                        fh.write(f"{name('a', p)} {name('a', j)}\n")
                if self.has_other[j]:
                    for p in self.other_parents[j]:
                        fh.write(f"{name('a', p)} {name('b', j)}\n")


def _line_of_sight_parent(multi, axis, shape, nonempty_grid, direction=-1):
    """Nearest non-empty node from ``multi`` along ``axis``; None if absent."""
    probe = list(multi)
    while True:
        probe[axis] += direction
        if not 0 <= probe[axis] < shape[axis]:
            return None
        if nonempty_grid[tuple(probe)]:
            return tuple(probe)


def parents_for_other(region_flat: int, shape, nonempty: np.ndarray) -> list:
    """Parents of a region's other node, as flat reference-node ids.

    With reference locations in the region, these are the region's own
    node plus that node's parents.  Otherwise the nearest non-empty node in
    each axis direction (before and after) is used, giving at most
    ``2 * ndim`` parents.
    """
    grid = np.asarray(nonempty, dtype=bool).reshape(shape)
    multi = np.unravel_index(region_flat, shape)
    if grid[multi]:
        own = [int(np.ravel_multi_index(multi, shape))]
        for axis in range(len(shape)):
            p = _line_of_sight_parent(multi, axis, shape, grid)
            if p is not None:
                own.append(int(np.ravel_multi_index(p, shape)))
        return own
    out = []
    for axis in range(len(shape)):
        for direction in (-1, 1):
            p = _line_of_sight_parent(multi, axis, shape, grid, direction)
            if p is not None:
                out.append(int(np.ravel_multi_index(p, shape)))
    if not out:
        raise MeshError("no non-empty reference region anywhere in the mesh")
    return out


def markov_blanket(node_flat: int, mesh: MeshGraph) -> set:
    """Parents, children, and co-parents of children, restricted to A nodes.

    Co-parenting through other nodes counts: two reference nodes sharing an
    other-node child are dependent given that child's locations, which is
    exactly what the coloring has to keep apart.
    """
    mb = set(mesh.parents[node_flat]) | set(mesh.children[node_flat])
    for child in mesh.children[node_flat]:
        mb.update(mesh.parents[child])
    for j in mesh.other_children[node_flat]:
        mb.update(mesh.other_parents[j])
    mb.discard(node_flat)
    return mb


def moral_sparsity(mesh: MeshGraph) -> np.ndarray:
    """Region-level support pattern of the reference-set precision matrix.

    Block ``(i, j)`` is flagged when ``i == j``, when one node parents the
    other, or when both parent a common reference node.  Other nodes have
    no children and never touch the reference precision.
    """
    m = mesh.n_regions
    out = np.zeros((m, m), dtype=bool)
    refs = mesh.ref_nodes()
    out[refs, refs] = True
    for j in refs:
        for p in mesh.parents[j]:
            out[j, p] = out[p, j] = True
        for a in mesh.parents[j]:
            for b in mesh.parents[j]:
                out[a, b] = True
    return out


def _seed_colors(shape, nonempty_flat) -> np.ndarray:
    """Parity-pattern seed coloring: one class per odd/even combination."""
    m = int(np.prod(shape))
    colors = np.full(m, -1, dtype=np.int64)
    for j in np.flatnonzero(nonempty_flat):
        multi = np.unravel_index(j, shape)
        code = 0
        for h, v in enumerate(multi):
            code |= (int(v) & 1) << h
        colors[j] = code
    return colors


def _compact_colors(colors: np.ndarray) -> tuple:
    """Relabel colors to 0..K-1 by first appearance in flat node order."""
    out = colors.copy()
    mapping: dict = {}
    for j in range(len(colors)):
        c = colors[j]
        if c < 0:
            continue
        if c not in mapping:
            mapping[c] = len(mapping)
        out[j] = mapping[c]
    return out, len(mapping)


def color_nodes(mesh: MeshGraph) -> tuple:
    """Color reference nodes so no node shares a color with its blanket.

    Starts from the repeating parity pattern (exactly four classes on full
    2-d meshes) and repairs any conflicts introduced by skipped empty
    regions or two-sided other-node parents: conflicted nodes are
    re-colored greedily in flat order with the smallest color unused in
    their blanket.  The result is always verified before being returned.
    """
    colors = _seed_colors(mesh.shape, mesh.nonempty)
    blankets = {int(j): markov_blanket(int(j), mesh) for j in mesh.ref_nodes()}
    conflicted = [j for j, mb in blankets.items()
                  if any(colors[k] == colors[j] for k in mb)]
    for j in sorted(conflicted):
        used = {colors[k] for k in blankets[j]}
        c = 0
        while c in used:
            c += 1
        colors[j] = c
    for j, mb in blankets.items():
        for k in mb:
            if colors[k] == colors[j]:
                raise MeshError("coloring repair left a conflict; this is a bug")
    return _compact_colors(colors)


def build_cubic_mesh(grid_shape, nonempty_mask, other_mask=None) -> MeshGraph:
    """Build the cubic DAG for a region grid.

    ``nonempty_mask`` flags regions holding reference locations;
    ``other_mask`` (optional) flags regions holding non-reference
    locations and controls which other nodes exist.
    """
    shape = tuple(int(s) for s in grid_shape)
    m = int(np.prod(shape))
    nonempty = np.asarray(nonempty_mask, dtype=bool).reshape(m)
    if not nonempty.any():
        raise MeshError("mesh needs at least one non-empty region")
    if other_mask is None:
        other = np.zeros(m, dtype=bool)
    else:
        other = np.asarray(other_mask, dtype=bool).reshape(m)
    grid = nonempty.reshape(shape)

    parents = [[] for _ in range(m)]
    children = [[] for _ in range(m)]
    for j in np.flatnonzero(nonempty):
        multi = np.unravel_index(j, shape)
        for axis in range(len(shape)):
            p = _line_of_sight_parent(multi, axis, shape, grid)
            if p is not None:
                pf = int(np.ravel_multi_index(p, shape))
                parents[j].append(pf)
                children[pf].append(int(j))

    other_parents = [[] for _ in range(m)]
    other_children = [[] for _ in range(m)]
    for j in np.flatnonzero(other):
        other_parents[j] = parents_for_other(int(j), shape, nonempty)
        for p in other_parents[j]:
            other_children[p].append(int(j))

    mesh = MeshGraph(shape=shape, nonempty=nonempty, has_other=other,
                     parents=parents, children=children,
                     other_parents=other_parents, other_children=other_children,
                     colors=np.full(m, -1, dtype=np.int64), n_colors=0)
    mesh.colors, mesh.n_colors = color_nodes(mesh)
    return mesh
