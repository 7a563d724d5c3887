"""Inner-loop kernels with interchangeable numba and numpy implementations.

Each kernel exists twice: a scalar-loop version compiled with ``@njit`` and a
vectorized numpy/scipy version. The module-level names (``element_matrices``,
``modal_bank``, ``two_dof_contact``) are bound to one or the other at import
time according to :mod:`modalsense._accel`. Both sets stay reachable through
:data:`KERNELS` so tests and the benchmark can compare them.
"""
import math

import numpy as np
from scipy import signal as _sps

from ._accel import HAS_NUMBA, njit

# tet-local dof order: vertex-major, xyz-minor
_MASS_PATTERN = (np.ones((4, 4)) + np.eye(4)) / 20.0


def isotropic_elasticity(lam, mu):
    """6x6 Voigt elasticity matrix (engineering shear strains)."""
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[0, 0] = D[1, 1] = D[2, 2] = lam + 2.0 * mu
    D[3, 3] = D[4, 4] = D[5, 5] = mu
    return D


# --------------------------------------------------------------------------
# element stiffness / mass
# --------------------------------------------------------------------------


def _strain_displacement_numpy(grads):
    m = grads.shape[0]
    B = np.zeros((m, 6, 12))
    for a in range(4):
        bx, by, bz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        B[:, 0, c] = bx
        B[:, 1, c + 1] = by
        B[:, 2, c + 2] = bz
        B[:, 3, c + 1] = bz
        B[:, 3, c + 2] = by
        B[:, 4, c] = bz
        B[:, 4, c + 2] = bx
        B[:, 5, c] = by
        B[:, 5, c + 1] = bx
    return B


def _element_matrices_numpy(X, tets, D, rho):
    P = X[tets]  # (m, 4, 3)
    A = np.ones((len(tets), 4, 4))
    A[:, :, 1:] = P
    vol = np.linalg.det(A) / 6.0
    # rows 1..3 of inv(A) hold the shape-function gradients
    grads = np.linalg.inv(A)[:, 1:, :].transpose(0, 2, 1)
    B = _strain_displacement_numpy(grads)
    Ke = vol[:, None, None] * np.einsum("eki,kl,elj->eij", B, D, B, optimize=True)
    Me = (rho * vol)[:, None, None] * np.kron(_MASS_PATTERN, np.eye(3))[None, :, :]
    return Ke, Me, vol


@njit(cache=True)
def _element_matrices_loop(X, tets, D, rho):
    m = tets.shape[0]
    Ke = np.zeros((m, 12, 12))
    Me = np.zeros((m, 12, 12))
    vol = np.zeros(m)
    A = np.empty((4, 4))
    B = np.zeros((6, 12))
    for e in range(m):
        for a in range(4):
            A[a, 0] = 1.0
            for c in range(3):
                A[a, c + 1] = X[tets[e, a], c]
        v = np.linalg.det(A) / 6.0
        vol[e] = v
        Ainv = np.linalg.inv(A)
        B[:, :] = 0.0
        for a in range(4):
            bx = Ainv[1, a]
            by = Ainv[2, a]
            bz = Ainv[3, a]
            c = 3 * a
            B[0, c] = bx
            B[1, c + 1] = by
            B[2, c + 2] = bz
            B[3, c + 1] = bz
            B[3, c + 2] = by
            B[4, c] = bz
            B[4, c + 2] = bx
            B[5, c] = by
            B[5, c + 1] = bx
        DB = D @ B
        for i in range(12):
            for j in range(12):
                s = 0.0
                for k in range(6):
                    s += B[k, i] * DB[k, j]
                Ke[e, i, j] = v * s
        mv = rho * v / 20.0
        for a in range(4):
            for b in range(4):
                w = 2.0 * mv if a == b else mv
                for c in range(3):
                    Me[e, 3 * a + c, 3 * b + c] = w
    return Ke, Me, vol


# --------------------------------------------------------------------------
# modal oscillator bank
# --------------------------------------------------------------------------


def _modal_bank_numpy(force, gain_in, gain_out, a1, a2, b, imp_idx, imp_g):
    n = force.shape[0]
    y = np.zeros(n)
    for i in range(gain_in.shape[0]):
        g = gain_in[i] * force
        if imp_idx.size:
            g = g.copy()
            np.add.at(g, imp_idx, imp_g[:, i])
        q = _sps.lfilter([0.0, b[i]], [1.0, -a1[i], -a2[i]], g)
        y += gain_out[i] * q
    return y


@njit(cache=True)
def _modal_bank_loop(force, gain_in, gain_out, a1, a2, b, imp_idx, imp_g):
    n = force.shape[0]
    r = gain_in.shape[0]
    y = np.zeros(n)
    q = np.zeros(r)
    q_prev = np.zeros(r)
    g_prev = np.zeros(r)
    p = 0
    n_imp = imp_idx.shape[0]
    for t in range(n):
        acc = 0.0
        f = force[t]
        while p < n_imp and imp_idx[p] < t:
            p += 1
        for i in range(r):
            qn = a1[i] * q[i] + a2[i] * q_prev[i] + b[i] * g_prev[i]
            q_prev[i] = q[i]
            q[i] = qn
            acc += gain_out[i] * qn
            g_prev[i] = gain_in[i] * f
        y[t] = acc
        k = p
        while k < n_imp and imp_idx[k] == t:
            for i in range(r):
                g_prev[i] += imp_g[k, i]
            k += 1
    return y


# --------------------------------------------------------------------------
# fingertip / object contact stepping
# --------------------------------------------------------------------------


def _two_dof_contact_python(drive, dt, m_f, m_o, k_c, b_c, k_g, b_g, x_f0, x_o0, limit):
    n = drive.shape[0]
    out = np.zeros(n)
    x_f, x_o, v_f, v_o = float(x_f0), float(x_o0), 0.0, 0.0
    for t in range(n):
        overlap = x_f - x_o
        fc = 0.0
        if overlap > 0.0:
            fc = k_c * overlap + b_c * (v_f - v_o)
            if fc < 0.0:
                fc = 0.0
        out[t] = fc
        v_f += dt * (drive[t] - fc) / m_f
        v_o += dt * (fc - k_g * x_o - b_g * v_o) / m_o
        x_f += dt * v_f
        x_o += dt * v_o
        if not (math.fabs(x_f) <= limit and math.fabs(x_o) <= limit):
            return out, t
    return out, -1


_two_dof_contact_loop = njit(cache=True)(_two_dof_contact_python)


# --------------------------------------------------------------------------

KERNELS = {
    "numpy": {
        "element_matrices": _element_matrices_numpy,
        "modal_bank": _modal_bank_numpy,
        "two_dof_contact": _two_dof_contact_python,
    },
}
if HAS_NUMBA:
    KERNELS["numba"] = {
        "element_matrices": _element_matrices_loop,
        "modal_bank": _modal_bank_loop,
        "two_dof_contact": _two_dof_contact_loop,
    }

_active = KERNELS["numba" if HAS_NUMBA else "numpy"]
element_matrices = _active["element_matrices"]
modal_bank = _active["modal_bank"]
two_dof_contact = _active["two_dof_contact"]
