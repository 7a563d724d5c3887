"""Linear-elastic tetrahedral stiffness and mass assembly."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import kernels
from .mesh import MIN_TET_VOLUME, TetMesh

logger = logging.getLogger(__name__)


class FEMError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic material plus the damping coefficients used in synthesis.

    ``alpha`` (1/s) and ``beta`` (s) are the Rayleigh mass and stiffness
    coefficients, ``gamma`` scales contact damping and ``friction`` is the
    contact friction coefficient.
    """

    density: float
    youngs_modulus: float
    poissons_ratio: float
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    friction: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        if not self.density > 0:
            raise FEMError(f"density must be > 0, got {self.density}")
        if not self.youngs_modulus > 0:
            raise FEMError(f"Young's modulus must be > 0, got {self.youngs_modulus}")
        if not -1.0 < self.poissons_ratio < 0.5:
            raise FEMError(f"Poisson's ratio must lie in (-1, 0.5), got {self.poissons_ratio}")
        for key in ("alpha", "beta", "gamma"):
            if getattr(self, key) < 0:
                raise FEMError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not 0.0 <= self.friction <= 1.0:
            raise FEMError(f"friction must lie in [0, 1], got {self.friction}")

    @property
    def lame(self):
        E, nu = self.youngs_modulus, self.poissons_ratio
        return E * nu / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu))

    def as_array(self) -> np.ndarray:
        return np.array([self.density, self.youngs_modulus, self.poissons_ratio,
                         self.alpha, self.beta, self.gamma, self.friction])

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes) -> "MaterialParams":
        return MaterialParams(**{**asdict(self), **changes})


# Friction is not tabulated per material; 0.5 is a scenario-level default.
MATERIALS = {
    "abs": MaterialParams(1100.0, 2.6e9, 0.36, alpha=4.0, beta=3e-7, gamma=4e-2, name="abs"),
    "aluminium": MaterialParams(2700.0, 6.9e10, 0.33, alpha=0.0, beta=5e-7, gamma=2e-1, name="aluminium"),
    "steel": MaterialParams(7850.0, 2e11, 0.29, alpha=5.0, beta=3e-8, gamma=3e-1, name="steel"),
    "wood": MaterialParams(750.0, 1.1e10, 0.25, alpha=60.0, beta=4e-6, gamma=5e-2, name="wood"),
}
_ALIASES = {"aluminum": "aluminium", "al": "aluminium", "abs_plastic": "abs"}


def material(name: str) -> MaterialParams:
    key = name.strip().lower().replace(" ", "_")
    key = _ALIASES.get(key, key)
    try:
        return MATERIALS[key]
    except KeyError:
        raise FEMError(f"unknown material {name!r}; known: {sorted(MATERIALS)}") from None


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    K: sp.csr_matrix
    M: sp.csr_matrix
    n: int

    @property
    def ndof(self) -> int:
        return 3 * self.n

    def axis_mass(self) -> np.ndarray:
        """t^T M t for unit rigid translations along x, y and z (each equals rho*V)."""
        out = np.empty(3)
        for c in range(3):
            t = np.zeros(self.ndof)
            t[c::3] = 1.0
            out[c] = t @ (self.M @ t)
        return out


def element_dofs(tets) -> np.ndarray:
    return (3 * np.asarray(tets)[:, :, None] + np.arange(3)).reshape(len(tets), 12)


def element_matrices(mesh: TetMesh, mat: MaterialParams):
    """Per-tet 12x12 stiffness and consistent mass matrices."""
    lam, mu = mat.lame
    D = kernels.isotropic_elasticity(lam, mu)
    Ke, Me, vol = kernels.element_matrices(mesh.vertices, mesh.tets, D, float(mat.density))
    bad = np.flatnonzero(vol < MIN_TET_VOLUME)
    if bad.size:
        raise FEMError(f"element {bad[0]} is degenerate (volume {vol[bad[0]]:.3e} m^3)")
    return 0.5 * (Ke + Ke.transpose(0, 2, 1)), Me


def assemble(mesh: TetMesh, mat: MaterialParams, lumped: bool = False) -> SystemMatrices:
    Ke, Me = element_matrices(mesh, mat)
    dofs = element_dofs(mesh.tets)
    rows = np.broadcast_to(dofs[:, :, None], Ke.shape).ravel()
    cols = np.broadcast_to(dofs[:, None, :], Ke.shape).ravel()
    ndof = 3 * mesh.n
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    M = sp.coo_matrix((Me.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    K.sort_indices()
    M.sort_indices()
    if lumped:
        M = sp.diags(np.asarray(M.sum(axis=1)).ravel(), format="csr")
    logger.debug("assembled K, M: %d dofs, %d / %d nonzeros", ndof, K.nnz, M.nnz)
    return SystemMatrices(K, M, mesh.n)


def rayleigh_damping(K, M, mat: MaterialParams):
    """C = alpha*M + beta*K."""
    return mat.alpha * M + mat.beta * K


def dump_matrix_market(sys: SystemMatrices, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    kp, mp = Path(f"{stem}_K.mtx"), Path(f"{stem}_M.mtx")
    scipy.io.mmwrite(str(kp), sys.K, symmetry="symmetric", precision=17)
    scipy.io.mmwrite(str(mp), sys.M, symmetry="symmetric", precision=17)
    return kp, mp
