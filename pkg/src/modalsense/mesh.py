"""Tetrahedral meshes: validation, file I/O and parametric primitives.

Native storage is a TetGen-style ``.node``/``.ele`` ASCII pair. Two optional
comment keys are recognised in the header of either file::

    # units: mm          (m, cm, mm, um) or   # scale: 0.001
    # index_base: 1

Without ``index_base`` the base is taken from the first record, as TetGen
does. Gmsh ASCII ``.msh`` files (format 2.2 and 4.1) can also be read.
All coordinates are meters once loaded.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

MIN_TET_VOLUME = 1e-15  # m^3
UNIT_SCALES = {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6}


class MeshError(ValueError):
    """Raised for unreadable or invalid tetrahedral meshes."""


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Immutable tetrahedral mesh.

    Use :meth:`from_arrays` to build one; it validates the connectivity and
    flips negatively oriented tets so every signed volume is positive.
    """

    vertices: np.ndarray
    tets: np.ndarray
    _volumes: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, tets, tet_ids=None) -> "TetMesh":
        V = np.ascontiguousarray(vertices, dtype=np.float64)
        T = np.array(tets, dtype=np.int64, copy=True)
        if V.ndim != 2 or V.shape[1] != 3 or len(V) == 0:
            raise MeshError(f"vertices must be a non-empty (n, 3) array, got shape {V.shape}")
        if T.ndim != 2 or T.shape[1] != 4 or len(T) == 0:
            raise MeshError(f"tets must be a non-empty (m, 4) array, got shape {T.shape}")
        if not np.all(np.isfinite(V)):
            raise MeshError("vertex coordinates must be finite")
        ids = np.arange(len(T)) if tet_ids is None else np.asarray(tet_ids)
        n = len(V)

        bad = np.flatnonzero(((T < 0) | (T >= n)).any(axis=1))
        if bad.size:
            e = bad[0]
            raise MeshError(f"tet {ids[e]} references vertex out of range {T[e].tolist()} (mesh has {n} vertices)")
        s = np.sort(T, axis=1)
        bad = np.flatnonzero((s[:, 1:] == s[:, :-1]).any(axis=1))
        if bad.size:
            raise MeshError(f"tet {ids[bad[0]]} repeats a vertex: {T[bad[0]].tolist()}")

        vol = signed_volumes(V, T)
        bad = np.flatnonzero(np.abs(vol) < MIN_TET_VOLUME)
        if bad.size:
            e = bad[0]
            raise MeshError(f"tet {ids[e]} is degenerate (volume {abs(vol[e]):.3e} m^3)")
        neg = vol < 0
        T[neg, 2], T[neg, 3] = T[neg, 3].copy(), T[neg, 2].copy()
        vol = np.abs(vol)

        ncomp, labels = _components(n, T)
        if ncomp != 1:
            isolated = np.flatnonzero(labels != labels[T[0, 0]])
            raise MeshError(
                f"mesh has {ncomp} connected components; vertex {isolated[0]} is not connected to tet {ids[0]}"
            )

        V.setflags(write=False)
        T.setflags(write=False)
        vol.setflags(write=False)
        return cls(V, T, vol)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def volumes(self) -> np.ndarray:
        return self._volumes

    @property
    def volume(self) -> float:
        return float(self._volumes.sum())

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.array(self.vertices.shape + self.tets.shape, dtype="<i8").tobytes())
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.tets.astype("<i8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"TetMesh(n={self.n}, tets={len(self.tets)}, volume={self.volume:.6g} m^3)"


def signed_volumes(vertices, tets):
    P = vertices[tets]
    e1, e2, e3 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def _components(n, tets):
    edges = np.array([(a, b) for a, b in itertools.combinations(range(4), 2)])
    rows = tets[:, edges[:, 0]].ravel()
    cols = tets[:, edges[:, 1]].ravel()
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    return connected_components(adj, directed=False)


def boundary_faces(mesh: TetMesh) -> np.ndarray:
    """Triangles that belong to exactly one tet."""
    faces = np.concatenate([mesh.tets[:, [1, 2, 3]], mesh.tets[:, [0, 3, 2]],
                            mesh.tets[:, [0, 1, 3]], mesh.tets[:, [0, 2, 1]]])
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inv.ravel()] == 1]


def euler_characteristic(triangles) -> int:
    tri = np.asarray(triangles)
    nv = len(np.unique(tri))
    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    ne = len(np.unique(edges, axis=0))
    return nv - ne + len(tri)


def nearest_vertex(mesh: TetMesh, point) -> int:
    """Index of the closest vertex; the lowest index wins ties."""
    d2 = ((mesh.vertices - np.asarray(point, dtype=np.float64)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

# Kuhn split of the unit cube: one tet per axis permutation, all sharing the
# 000-111 diagonal. Translation invariant, hence conforming across cells.
_KUHN = []
for _perm in itertools.permutations(range(3)):
    _c = [0, 0, 0]
    _path = [tuple(_c)]
    for _ax in _perm:
        _c[_ax] = 1
        _path.append(tuple(_c))
    _KUHN.append(_path)
_KUHN = np.array(_KUHN)  # (6, 4, 3)


def _kuhn_grid(shape_cells, wrap_last=False):
    """Tets of a structured grid in index space, as vertex index triples."""
    na, nb, nc = shape_cells
    nvc = nc if wrap_last else nc + 1
    cells = np.stack(np.meshgrid(np.arange(na), np.arange(nb), np.arange(nc), indexing="ij"), -1).reshape(-1, 3)
    corners = cells[:, None, None, :] + _KUHN[None]  # (cells, 6, 4, 3)
    if wrap_last:
        corners[..., 2] %= nc
    flat = (corners[..., 0] * (nb + 1) + corners[..., 1]) * nvc + corners[..., 2]
    return flat.reshape(-1, 4)


def _check_divisions(divisions):
    div = [int(d) for d in divisions]
    if len(div) != 3 or any(d <= 0 for d in div):
        raise MeshError(f"divisions must be three positive integers, got {list(divisions)}")
    return div


def generate_bar(length, width, height, divisions=(10, 1, 1)) -> TetMesh:
    """Box centred at the origin, long axis along x, 6 tets per grid cell."""
    if min(length, width, height) <= 0:
        raise MeshError(f"bar dimensions must be positive, got {(length, width, height)}")
    nx, ny, nz = _check_divisions(divisions)
    xs = np.linspace(-length / 2, length / 2, nx + 1)
    ys = np.linspace(-width / 2, width / 2, ny + 1)
    zs = np.linspace(-height / 2, height / 2, nz + 1)
    V = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), -1).reshape(-1, 3)
    return TetMesh.from_arrays(V, _kuhn_grid((nx, ny, nz)))


def generate_tube(length, outer_radius, inner_radius, divisions=(10, 1, 16)) -> TetMesh:
    """Annular prism along x.

    ``divisions`` is (axial, radial, circumferential). The cross-section is the
    polygonal annulus through the grid vertices, so the enclosed volume is
    ``length * nc/2 * sin(2 pi/nc) * (R^2 - r^2)``.
    """
    if length <= 0 or not 0 < inner_radius < outer_radius:
        raise MeshError(f"tube needs length > 0 and 0 < inner < outer, got {(length, outer_radius, inner_radius)}")
    na, nr, nc = _check_divisions(divisions)
    if nc < 3:
        raise MeshError(f"tube needs at least 3 circumferential divisions, got {nc}")
    xs = np.linspace(-length / 2, length / 2, na + 1)
    rs = np.linspace(inner_radius, outer_radius, nr + 1)
    th = 2 * np.pi * np.arange(nc) / nc
    X, R, TH = np.meshgrid(xs, rs, th, indexing="ij")
    V = np.stack([X, R * np.cos(TH), R * np.sin(TH)], -1).reshape(-1, 3)
    return TetMesh.from_arrays(V, _kuhn_grid((na, nr, nc), wrap_last=True))


def faceted_tube_volume(length, outer_radius, inner_radius, circumferential):
    return length * circumferential / 2 * np.sin(2 * np.pi / circumferential) * (outer_radius**2 - inner_radius**2)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def _node_ele_paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".node", ".ele") else p
    return stem.with_suffix(".node"), stem.with_suffix(".ele")


def _read_records(path):
    """Data rows (token lists with line numbers) and header keys of a TetGen file."""
    keys, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body, _, comment = line.partition("#")
            if comment and ":" in comment:
                k, _, v = comment.partition(":")
                keys[k.strip().lower()] = v.strip()
            tokens = body.split()
            if tokens:
                rows.append((lineno, tokens))
    return keys, rows


def _header_scale(keys, path):
    if "scale" in keys:
        try:
            return float(keys["scale"])
        except ValueError:
            raise MeshError(f"{path}: bad scale header {keys['scale']!r}") from None
    unit = keys.get("units", "m").lower()
    if unit not in UNIT_SCALES:
        raise MeshError(f"{path}: unknown unit {unit!r}; expected one of {sorted(UNIT_SCALES)}")
    return UNIT_SCALES[unit]


def _load_node_ele(path, scale):
    node_path, ele_path = _node_ele_paths(path)
    for p in (node_path, ele_path):
        if not p.exists():
            raise MeshError(f"missing mesh file {p}")
    nkeys, nrows = _read_records(node_path)
    ekeys, erows = _read_records(ele_path)
    try:
        (hl, head), body = nrows[0], nrows[1:]
        npts, dim = int(head[0]), int(head[1])
        if dim != 3:
            raise MeshError(f"{node_path}:{hl}: expected 3D points, got dimension {dim}")
        if len(body) < npts:
            raise MeshError(f"{node_path}: header declares {npts} points, found {len(body)}")
        base = int(nkeys.get("index_base", ekeys.get("index_base", body[0][1][0])))
        V = np.empty((npts, 3))
        for row, (ln, tok) in enumerate(body[:npts]):
            if int(tok[0]) != row + base:
                raise MeshError(f"{node_path}:{ln}: point id {tok[0]} out of sequence (expected {row + base})")
            V[row] = [float(t) for t in tok[1:4]]

        (hl, head), body = erows[0], erows[1:]
        ntet, per = int(head[0]), int(head[1])
        if per != 4:
            raise MeshError(f"{ele_path}:{hl}: only 4-node tets are supported, got {per}")
        if len(body) < ntet:
            raise MeshError(f"{ele_path}: header declares {ntet} tets, found {len(body)}")
        T = np.empty((ntet, 4), dtype=np.int64)
        ids = np.empty(ntet, dtype=np.int64)
        for row, (ln, tok) in enumerate(body[:ntet]):
            ids[row] = int(tok[0])
            T[row] = [int(t) - base for t in tok[1:5]]
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{node_path.stem}: cannot parse node/ele pair: {exc}") from None
    s = scale if scale is not None else _header_scale({**ekeys, **nkeys}, node_path)
    return TetMesh.from_arrays(V * s, T, tet_ids=ids)


def _msh_sections(path):
    sections, current, name = {}, None, None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s.startswith("$End"):
                sections[name] = current
                current = None
            elif s.startswith("$"):
                name, current = s[1:], []
            elif current is not None and s:
                current.append(s.split())
    return sections


def _load_msh(path, scale):
    path = Path(path)
    if not path.exists():
        raise MeshError(f"missing mesh file {path}")
    sec = _msh_sections(path)
    try:
        version, filetype = sec["MeshFormat"][0][0], int(sec["MeshFormat"][0][1])
        if filetype != 0:
            raise MeshError(f"{path}: binary msh files are not supported")
        nodes, elems = sec["Nodes"], sec["Elements"]
        coords, tets = {}, []
        if version.startswith("2"):
            for tok in nodes[1:]:
                coords[int(tok[0])] = [float(t) for t in tok[1:4]]
            for tok in elems[1:]:
                if int(tok[1]) == 4:
                    ntags = int(tok[2])
                    tets.append((int(tok[0]), [int(t) for t in tok[3 + ntags:7 + ntags]]))
        elif version.startswith("4"):
            it = iter(nodes)
            nblocks = int(next(it)[0])
            for _ in range(nblocks):
                blk = next(it)
                count, parametric = int(blk[3]), int(blk[2])
                tags = [int(next(it)[0]) for _ in range(count)]
                for tag in tags:
                    xyz = next(it)
                    coords[tag] = [float(t) for t in xyz[:3]]
                if parametric:
                    raise MeshError(f"{path}: parametric nodes are not supported")
            it = iter(elems)
            nblocks = int(next(it)[0])
            for _ in range(nblocks):
                blk = next(it)
                etype, count = int(blk[2]), int(blk[3])
                for _ in range(count):
                    tok = next(it)
                    if etype == 4:
                        tets.append((int(tok[0]), [int(t) for t in tok[1:5]]))
        else:
            raise MeshError(f"{path}: unsupported msh version {version}")
    except (KeyError, IndexError, ValueError, StopIteration) as exc:
        raise MeshError(f"{path}: cannot parse msh file: {exc!r}") from None
    if not tets:
        raise MeshError(f"{path}: no 4-node tetrahedra found")
    used = sorted({t for _, conn in tets for t in conn})
    missing = [t for t in used if t not in coords]
    if missing:
        eid = next(e for e, conn in tets if missing[0] in conn)
        raise MeshError(f"{path}: tet {eid} references undefined node {missing[0]}")
    if len(used) < len(coords):
        logger.info("%s: dropping %d nodes not used by any tet", path.name, len(coords) - len(used))
    remap = {tag: i for i, tag in enumerate(used)}
    V = np.array([coords[t] for t in used])
    T = np.array([[remap[t] for t in conn] for _, conn in tets])
    return TetMesh.from_arrays(V * (1.0 if scale is None else scale), T, tet_ids=[e for e, _ in tets])


def load_mesh(path, format: str | None = None, scale: float | None = None) -> TetMesh:
    """Read a mesh file.

    Parameters
    ----------
    path : path-like
        ``.node``/``.ele`` file (either one, or the common stem) or ``.msh``.
    format : {"node-ele", "msh-ascii"}, optional
        Inferred from the suffix when omitted.
    scale : float, optional
        Multiplier to meters; overrides any unit header.
    """
    p = Path(path)
    if format is None:
        format = "msh-ascii" if p.suffix == ".msh" else "node-ele"
    if format == "node-ele":
        return _load_node_ele(p, scale)
    if format == "msh-ascii":
        return _load_msh(p, scale)
    raise MeshError(f"unknown mesh format {format!r}")


def save_mesh(mesh: TetMesh, path) -> tuple[Path, Path]:
    """Write ``<stem>.node`` and ``<stem>.ele`` with round-trip exact floats."""
    node_path, ele_path = _node_ele_paths(path)
    node_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# modalsense tetmesh", "# units: m", "# index_base: 0", f"{mesh.n} 3 0 0"]
    lines += [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.vertices.tolist())]
    node_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["# modalsense tetmesh", "# index_base: 0", f"{len(mesh.tets)} 4 0"]
    lines += [f"{i} {a} {b} {c} {d}" for i, (a, b, c, d) in enumerate(mesh.tets.tolist())]
    ele_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return node_path, ele_path
