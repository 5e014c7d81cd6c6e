"""Box-domain MAC mesh with boundary partition, actuator patch and interior collar.

Boundary "nodes" are the midpoints of the boundary faces of the cell grid
(one per boundary cell face), so a 2D mesh with ``n`` cells per side carries
``4 n`` boundary nodes.  Each node has an outward unit normal and an
orthonormal tangent frame; on a box both are axis aligned.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

# side name -> (normal axis, sign of outward normal)
SIDES_2D = {"left": (0, -1), "right": (0, 1), "bottom": (1, -1), "top": (1, 1)}
SIDES_3D = {
    "left": (0, -1), "right": (0, 1),
    "bottom": (1, -1), "top": (1, 1),
    "back": (2, -1), "front": (2, 1),
}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class DomainMesh:
    dims: tuple[int, ...]
    lengths: tuple[float, ...]
    d: int
    h: tuple[float, ...]
    # per boundary node
    side: np.ndarray        # (nb,) int side id, index into side_names
    cell: np.ndarray        # (nb, d) multi-index of the adjacent interior cell
    position: np.ndarray    # (nb, d)
    normal: np.ndarray      # (nb, d) outward unit normal
    tangent: np.ndarray     # (nb, d-1, d)
    side_names: tuple[str, ...]
    patch_nodes: np.ndarray  # indices into the boundary node list
    collar_mask: np.ndarray  # int array of shape dims, values 0/1
    collar_depth: int = 0

    @property
    def n_boundary(self) -> int:
        return len(self.side)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return np.arange(self.n_boundary)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def face_area(self, node: int) -> float:
        ax = int(np.flatnonzero(self.normal[node])[0])
        return float(np.prod([self.h[a] for a in range(self.d) if a != ax]))

    def side_nodes(self, name: str) -> np.ndarray:
        sid = self.side_names.index(name)
        return np.flatnonzero(self.side == sid)

    def patch_mask(self) -> np.ndarray:
        m = np.zeros(self.n_boundary, dtype=bool)
        m[self.patch_nodes] = True
        return m

    def dump_boundary(self, path: str | Path) -> None:
        """Write ``index x y [z] nu_x nu_y [nu_z]`` per boundary node."""
        lines = []
        for k in range(self.n_boundary):
            vals = [*self.position[k], *self.normal[k]]
            lines.append(f"{k} " + " ".join(f"{v:.12g}" for v in vals))
        Path(path).write_text("\n".join(lines) + "\n")


def build_mesh(dims, lengths=None, d: int | None = None) -> DomainMesh:
    dims = tuple(int(n) for n in dims)
    if d is None:
        d = len(dims)
    if d not in (2, 3):
        raise MeshError(f"spatial dimension must be 2 or 3, got {d}")
    if len(dims) != d:
        raise MeshError(f"dims has {len(dims)} entries for d={d}")
    if min(dims) < 4:
        raise MeshError(f"need at least 4 cells per axis, got {dims}")
    lengths = tuple(float(x) for x in (lengths if lengths is not None else (1.0,) * d))
    if len(lengths) != d or min(lengths) <= 0:
        raise MeshError(f"bad lengths {lengths}")
    h = tuple(L / n for L, n in zip(lengths, dims))

    sides = SIDES_2D if d == 2 else SIDES_3D
    side_names = tuple(sides)
    side_ids, cells, pos, nrm, tan = [], [], [], [], []
    eye = np.eye(d)
    for sid, (name, (ax, sgn)) in enumerate(sides.items()):
        others = [a for a in range(d) if a != ax]
        grids = np.meshgrid(*[np.arange(dims[a]) for a in others], indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
        for row in idx:
            c = np.zeros(d, dtype=int)
            c[ax] = 0 if sgn < 0 else dims[ax] - 1
            c[others] = row
            x = (c + 0.5) * h
            x[ax] = 0.0 if sgn < 0 else lengths[ax]
            nu = sgn * eye[ax]
            if d == 2:
                t = np.array([[-nu[1], nu[0]]])
            else:
                t = np.array([eye[others[0]], eye[others[1]]])
            side_ids.append(sid)
            cells.append(c)
            pos.append(x)
            nrm.append(nu)
            tan.append(t)
    return DomainMesh(
        dims=dims, lengths=lengths, d=d, h=h,
        side=np.array(side_ids), cell=np.array(cells), position=np.array(pos),
        normal=np.array(nrm), tangent=np.array(tan), side_names=side_names,
        patch_nodes=np.arange(len(side_ids)),
        collar_mask=np.zeros(dims, dtype=int),
    )


def boundary_adjacency(mesh: DomainMesh) -> list[list[int]]:
    """Edge-adjacency of boundary faces (shared cell edge), including across box edges."""
    key = {}
    for k in range(mesh.n_boundary):
        key[(int(mesh.side[k]), tuple(mesh.cell[k]))] = k
    adj = [[] for _ in range(mesh.n_boundary)]
    for k in range(mesh.n_boundary):
        c = mesh.cell[k]
        ax = int(np.flatnonzero(mesh.normal[k])[0])
        for a in range(mesh.d):
            if a == ax:
                continue
            for step in (-1, 1):
                c2 = c.copy()
                c2[a] += step
                if 0 <= c2[a] < mesh.dims[a]:
                    j = key.get((int(mesh.side[k]), tuple(c2)))
                else:
                    # wraps around a box edge onto the neighbouring side
                    name = ("left", "right", "bottom", "top", "back", "front")[2 * a + (step > 0)]
                    j = key.get((mesh.side_names.index(name), tuple(c)))
                if j is not None:
                    adj[k].append(j)
    return adj


def is_connected(mesh: DomainMesh, nodes) -> bool:
    nodes = set(int(n) for n in nodes)
    if not nodes:
        return False
    adj = boundary_adjacency(mesh)
    start = next(iter(nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        k = queue.popleft()
        for j in adj[k]:
            if j in nodes and j not in seen:
                seen.add(j)
                queue.append(j)
    return seen == nodes


def select_patch(mesh: DomainMesh, side: str, fraction: float) -> DomainMesh:
    """Centered connected run of nodes covering ``fraction`` of one side (or all of Γ)."""
    if not 0 < fraction <= 1:
        raise MeshError(f"fraction must lie in (0, 1], got {fraction}")
    if side == "all":
        if fraction != 1.0:
            raise MeshError("side='all' requires fraction=1")
        return replace(mesh, patch_nodes=np.arange(mesh.n_boundary))
    if side not in mesh.side_names:
        raise MeshError(f"unknown side {side!r}; choose from {mesh.side_names} or 'all'")
    nodes = mesh.side_nodes(side)
    ax = int(np.flatnonzero(mesh.normal[nodes[0]])[0])
    others = [a for a in range(mesh.d) if a != ax]
    # per in-plane axis, a centered window of the requested relative extent
    scale = fraction ** (1.0 / len(others))
    keep = np.ones(len(nodes), dtype=bool)
    for a in others:
        n = mesh.dims[a]
        count = int(np.floor(scale * n + 1e-9))
        if count < 1:
            raise MeshError(f"patch fraction {fraction} leaves an empty patch on side {side!r}")
        start = (n - count) // 2
        ca = mesh.cell[nodes, a]
        keep &= (ca >= start) & (ca < start + count)
    patch = nodes[keep]
    assert is_connected(mesh, patch)
    return replace(mesh, patch_nodes=patch)


def build_collar(mesh: DomainMesh, depth: int) -> DomainMesh:
    """Mark the cells lying within ``depth`` cells of the patch along the inward normal."""
    if depth < 1:
        raise MeshError("collar depth must be >= 1")
    if len(mesh.patch_nodes) == 0:
        raise MeshError("empty patch")
    m = np.zeros(mesh.dims, dtype=int)
    for k in mesh.patch_nodes:
        ax = int(np.flatnonzero(mesh.normal[k])[0])
        if depth > mesh.dims[ax] // 2:
            raise MeshError(
                f"collar depth {depth} exceeds half the domain width ({mesh.dims[ax] // 2} cells)"
            )
        inward = -int(np.sign(mesh.normal[k, ax]))
        for s in range(depth):
            c = mesh.cell[k].copy()
            c[ax] += inward * s
            m[tuple(c)] = 1
    return replace(mesh, collar_mask=m, collar_depth=depth)


def setup_mesh(dims, lengths=None, side="left", fraction=1.0, depth=1) -> DomainMesh:
    mesh = build_mesh(dims, lengths)
    mesh = select_patch(mesh, side, fraction)
    return build_collar(mesh, depth)
