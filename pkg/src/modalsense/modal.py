"""Generalized eigenanalysis of (K, M) and the persistent modal model."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import MaterialParams, SystemMatrices

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1500  # max 3n for the dense solver
DEFAULT_F_FLOOR = 20.0
DEFAULT_F_CEIL = 20000.0
DEFAULT_R_MAX = 256

MAGIC = b"MSMODAL\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIdd32s32s7d32s")


class ModalError(RuntimeError):
    pass


class EigenSolverError(ModalError):
    """The eigensolver failed to converge."""


class SingularMassError(ModalError):
    """M is not (numerically) positive definite."""


class EmptyBandError(ModalError):
    """No mode falls inside the requested frequency band."""


class ModalFileError(ModalError):
    pass


class ModalVersionError(ModalFileError):
    pass


class ModalHashError(ModalFileError):
    pass


class ModalTruncatedError(ModalFileError):
    pass


@dataclass(frozen=True, eq=False)
class ModalModel:
    """Mass-normalized modes of an object: U^T M U = I, U^T K U = diag(eigenvalues)."""

    eigenvalues: np.ndarray  # (r,) rad^2/s^2, ascending
    modes: np.ndarray  # (3n, r)
    material: MaterialParams
    mesh_hash: str
    f_floor: float = DEFAULT_F_FLOOR
    f_ceil: float = DEFAULT_F_CEIL
    info: dict = field(default_factory=dict, compare=False)

    @property
    def r(self) -> int:
        return len(self.eigenvalues)

    @property
    def n(self) -> int:
        return self.modes.shape[0] // 3

    @property
    def natural_freqs(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues) / (2 * np.pi)

    def vertex_block(self, vertex: int) -> np.ndarray:
        """3 x r rows of U belonging to one vertex."""
        return self.modes[3 * vertex:3 * vertex + 3]

    def truncated(self, r: int) -> "ModalModel":
        return ModalModel(self.eigenvalues[:r], self.modes[:, :r], self.material, self.mesh_hash,
                          self.f_floor, self.f_ceil, dict(self.info))


SIGN_TIE_RTOL = 1e-6


def fix_signs(U: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive.

    Symmetric objects have mirrored entries of equal magnitude, so entries
    within ``SIGN_TIE_RTOL`` of the column maximum count as tied and the
    lowest row index among them decides.
    """
    A = np.abs(U)
    idx = np.argmax(A >= (1.0 - SIGN_TIE_RTOL) * A.max(axis=0), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def _solve_dense(K, M, k):
    try:
        w, U = sla.eigh(_dense(K), _dense(M), subset_by_index=[0, k - 1])
    except np.linalg.LinAlgError as exc:
        raise SingularMassError(f"mass matrix is not positive definite: {exc}") from None
    return w, U


def _solve_sparse(K, M, k, sigma):
    ndof = K.shape[0]
    reg = 1e-12 * M.diagonal().sum() / ndof
    logger.info("shift-invert: regularizing M diagonal by %.3e (sigma=%.4g, k=%d)", reg, sigma, k)
    Mr = (M + reg * sp.identity(ndof, format="csr")).tocsc()
    v0 = np.random.default_rng(0).standard_normal(ndof)
    try:
        w, U = spla.eigsh(K.tocsc(), k=k, M=Mr, sigma=sigma, which="LM", v0=v0, tol=0.0)
    except spla.ArpackNoConvergence as exc:
        raise EigenSolverError(f"ARPACK did not converge: {exc}") from None
    except RuntimeError as exc:
        raise SingularMassError(f"shift-invert factorization failed: {exc}") from None
    # Rayleigh-Ritz on the converged subspace against the unregularized pair
    Kr, Mr_ = U.T @ (K @ U), U.T @ (M @ U)
    try:
        w, Y = sla.eigh(0.5 * (Kr + Kr.T), 0.5 * (Mr_ + Mr_.T))
    except np.linalg.LinAlgError as exc:
        raise SingularMassError(f"projected mass matrix is singular: {exc}") from None
    return w, U @ Y, reg


def solve_generalized(sys: SystemMatrices, k: int, method: str = "auto", sigma: float | None = None):
    """Lowest ``k`` generalized eigenpairs of (K, M), ascending, sign-fixed.

    ``method`` is "dense", "sparse" (shift-invert ARPACK) or "auto", which
    picks dense for 3n <= ``DENSE_LIMIT``.
    """
    ndof = sys.ndof
    k = int(min(k, ndof))
    if method == "auto":
        method = "dense" if ndof <= DENSE_LIMIT else "sparse"
    if method == "sparse" and k >= ndof - 1:
        logger.info("requested %d of %d eigenpairs; using the dense solver", k, ndof)
        method = "dense"
    reg = 0.0
    if method == "dense":
        w, U = _solve_dense(sys.K, sys.M, k)
    elif method == "sparse":
        w, U, reg = _solve_sparse(sys.K, sys.M, k, -1.0 if sigma is None else sigma)
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    order = np.argsort(w, kind="stable")
    return w[order], fix_signs(U[:, order]), {"method": method, "regularization": reg}


def modal_analysis(sys: SystemMatrices, mat: MaterialParams, mesh_hash: str = "",
                   f_floor: float = DEFAULT_F_FLOOR, f_ceil: float = DEFAULT_F_CEIL,
                   r_max: int = DEFAULT_R_MAX, method: str = "auto") -> ModalModel:
    """Modes of the free object with natural frequency in [f_floor, f_ceil].

    At most ``r_max`` of the lowest in-band modes are kept. A positive floor
    removes the six rigid-body modes.
    """
    if not (f_floor >= 0 and f_ceil > f_floor):
        raise ValueError(f"need 0 <= f_floor < f_ceil, got {f_floor}, {f_ceil}")
    if r_max < 1:
        raise ValueError(f"r_max must be >= 1, got {r_max}")
    lam_lo, lam_hi = (2 * np.pi * f_floor) ** 2, (2 * np.pi * f_ceil) ** 2
    ndof = sys.ndof
    # sigma below every eigenvalue keeps K - sigma*M definite
    sigma = -max(lam_lo, 1.0)
    k = min(r_max + 16, ndof)
    while True:
        w, U, info = solve_generalized(sys, k, method=method, sigma=sigma)
        keep = np.flatnonzero((w >= lam_lo) & (w <= lam_hi))[:r_max]
        if len(keep) >= r_max or w[-1] > lam_hi or k >= ndof:
            break
        k = min(2 * k, ndof)
    if len(keep) == 0:
        raise EmptyBandError(f"no mode between {f_floor} Hz and {f_ceil} Hz (computed {len(w)} eigenpairs, "
                             f"highest {np.sqrt(max(w[-1], 0)) / 2 / np.pi:.1f} Hz)")
    info.update(computed=len(w), below_floor=int(np.sum(w < lam_lo)), retained=len(keep))
    logger.info("modal analysis: %d modes retained in [%g, %g] Hz (%d below floor, solver=%s)",
                len(keep), f_floor, f_ceil, info["below_floor"], info["method"])
    return ModalModel(w[keep].copy(), np.ascontiguousarray(U[:, keep]), mat, mesh_hash,
                      float(f_floor), float(f_ceil), info)


def eigen_residuals(sys: SystemMatrices, model: ModalModel) -> np.ndarray:
    """||K u - lambda M u|| per mode."""
    R = sys.K @ model.modes - (sys.M @ model.modes) * model.eigenvalues
    return np.linalg.norm(R, axis=0)


# --------------------------------------------------------------------------
# binary I/O
# --------------------------------------------------------------------------


def _payload(model: ModalModel) -> bytes:
    return model.eigenvalues.astype("<f8").tobytes() + model.modes.astype("<f8").tobytes(order="C")


def save_modal_model(model: ModalModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _payload(model)
    mesh_digest = bytes.fromhex(model.mesh_hash) if model.mesh_hash else bytes(32)
    header = _HEADER.pack(MAGIC, VERSION, model.n, model.r, model.f_floor, model.f_ceil,
                          mesh_digest, hashlib.sha256(payload).digest(), *model.material.as_array(),
                          model.material.name.encode("utf-8")[:32])
    path.write_bytes(header + payload)
    return path


def load_modal_model(path, mesh=None, mesh_hash: str | None = None) -> ModalModel:
    """Read a ``.modal`` file, optionally checking it belongs to ``mesh``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ModalTruncatedError(f"{path}: file too short for header ({len(data)} bytes)")
    magic, version, n, r, f_floor, f_ceil, mdig, pdig, *rest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModalFileError(f"{path}: not a modal model file")
    if version != VERSION:
        raise ModalVersionError(f"{path}: file version {version}, reader supports {VERSION}")
    expected = _HEADER.size + 8 * (r + 3 * n * r)
    if len(data) != expected:
        raise ModalTruncatedError(f"{path}: expected {expected} bytes, found {len(data)}")
    payload = data[_HEADER.size:]
    if hashlib.sha256(payload).digest() != pdig:
        raise ModalFileError(f"{path}: payload checksum mismatch")
    want = mesh.content_hash if mesh is not None else mesh_hash
    stored = "" if mdig == bytes(32) else mdig.hex()
    if want is not None and want != stored:
        raise ModalHashError(f"{path}: built from mesh {stored[:12] or '?'}, supplied mesh is {want[:12]}")
    name = rest[7].rstrip(b"\0").decode("utf-8")
    mat = MaterialParams(*rest[:7], name=name)
    lam = np.frombuffer(payload, "<f8", count=r).astype(np.float64)
    U = np.frombuffer(payload, "<f8", offset=8 * r).reshape(3 * n, r).astype(np.float64)
    return ModalModel(lam, U, mat, stored, f_floor, f_ceil)
