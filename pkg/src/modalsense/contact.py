"""Contact streams, contact-dependent modal damping and actuator contact dynamics.

A contact stream is a JSON-lines file. The optional first line is a header
``{"schema": "modalsense.contacts", "version": 1}``; every other line is one
event::

    {"t": 0.0, "point": [x, y, z], "normal": [nx, ny, nz], "force": 40.0,
     "source": "grip_left", "persistence": "sustained"}

Sustained events sharing a timestamp form a snapshot of the contact state;
the snapshot in force at time ``t`` is the latest one at or before ``t``.
Impulsive events carry an impulse in N*s that is injected into the modes at
their timestamp.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .mesh import TetMesh, nearest_vertex

logger = logging.getLogger(__name__)

SCHEMA = "modalsense.contacts"
SCHEMA_VERSION = 1
SOURCES = ("grip_left", "grip_right", "environment", "other_object")
PERSISTENCE = ("sustained", "impulsive")
NORMAL_TOL = 1e-9
RENORMALIZE_TOL = 1e-3


class ContactError(ValueError):
    pass


class ContactDynamicsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContactEvent:
    t: float
    point: tuple
    normal: tuple
    force: float
    source: str = "other_object"
    persistence: str = "sustained"

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > NORMAL_TOL:
            raise ContactError(f"contact normal {list(self.normal)} is not unit length")
        if self.force < 0:
            raise ContactError(f"contact force must be >= 0, got {self.force}")
        if self.source not in SOURCES:
            raise ContactError(f"unknown contact source {self.source!r}; expected one of {SOURCES}")
        if self.persistence not in PERSISTENCE:
            raise ContactError(f"unknown persistence {self.persistence!r}; expected one of {PERSISTENCE}")

    @classmethod
    def make(cls, t, point, normal, force, source="other_object", persistence="sustained"):
        """Build an event, renormalizing a normal that is within 1e-3 of unit length."""
        n = np.asarray(normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if not np.all(np.isfinite(n)) or abs(norm - 1.0) > RENORMALIZE_TOL:
            raise ContactError(f"contact normal {list(normal)} has length {norm:.6g}, not within {RENORMALIZE_TOL} of 1")
        if abs(norm - 1.0) > NORMAL_TOL:
            logger.debug("renormalizing contact normal of length %.9f", norm)
            n = n / norm
        return cls(float(t), tuple(float(v) for v in point), tuple(n.tolist()), float(force), source, persistence)

    def to_json(self) -> str:
        d = asdict(self)
        d["point"], d["normal"] = list(self.point), list(self.normal)
        return json.dumps(d, sort_keys=True)


def load_contact_stream(path) -> list[ContactEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContactError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ContactError(f"{path}:{lineno}: expected a JSON object")
            if "schema" in rec and "t" not in rec:
                if rec.get("schema") != SCHEMA or rec.get("version") != SCHEMA_VERSION:
                    raise ContactError(f"{path}:{lineno}: unsupported stream header {rec}")
                continue
            try:
                ev = ContactEvent.make(rec["t"], rec["point"], rec["normal"], rec["force"],
                                       rec.get("source", "other_object"), rec.get("persistence", "sustained"))
            except KeyError as exc:
                raise ContactError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise ContactError(f"{path}:{lineno}: {exc}") from None
            events.append(ev)
    return sorted(events, key=lambda e: e.t)


def save_contact_stream(events, path) -> Path:
    path = Path(path)
    lines = [json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION})]
    lines += [e.to_json() for e in events]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def active_contacts(events, t: float) -> list[ContactEvent]:
    """Sustained contacts of the latest snapshot at or before ``t``."""
    sustained = [e for e in events if e.persistence == "sustained" and e.t <= t]
    if not sustained:
        return []
    t_last = max(e.t for e in sustained)
    return [e for e in sustained if e.t == t_last]


def contact_damping(model, mesh: TetMesh, events, mu: float) -> np.ndarray:
    """Viscous contact damping in modal space (r x r, symmetric PSD).

    Sum over sustained contacts of ``c_p U_p^T (mu I + (1 - mu) n n^T) U_p``,
    with ``U_p`` the 3 x r block of the vertex nearest the contact point.
    Impulsive events are ignored here.
    """
    if not 0.0 <= mu <= 1.0:
        raise ContactError(f"friction coefficient must lie in [0, 1], got {mu}")
    r = model.r
    G = np.zeros((r, r))
    for ev in events:
        if ev.persistence != "sustained":
            continue
        Up = model.vertex_block(nearest_vertex(mesh, ev.point))
        n = np.asarray(ev.normal)
        P = mu * np.eye(3) + (1.0 - mu) * np.outer(n, n)
        G += ev.force * (Up.T @ (P @ Up))
    return 0.5 * (G + G.T)


def total_modal_damping(model, mat, G) -> np.ndarray:
    """Rayleigh part (diagonal in modal space) plus gamma * G."""
    return np.diag(mat.alpha + mat.beta * model.eigenvalues) + mat.gamma * np.asarray(G)


# --------------------------------------------------------------------------
# fingertip / object dynamics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContactDynamicsConfig:
    """Lumped masses and interface springs along the grip axis.

    The actuated left fingertip (``m_lf``) presses on the object through a
    unilateral spring-damper (``k_of``, ``b_of``). The object moves together
    with the right fingertip (``m_o + m_rf``), which is held by the gripper
    through ``k_fe``, ``b_fe``; an environment contact adds ``k_oe``, ``b_oe``.
    ``f_ext`` is the external load already projected on the grip axis.
    None of the default values come from measurements.
    """

    m_o: float = 0.2
    m_lf: float = 0.02
    m_rf: float = 0.02
    k_of: float = 1e6
    k_fe: float = 1e5
    k_oe: float = 1e6
    b_of: float = 50.0
    b_fe: float = 20.0
    b_oe: float = 50.0
    f_grip: float = 40.0
    f_ext: float = 0.0
    vib_gain: float = 5.0
    env_contact: bool = False

    def __post_init__(self):
        for key in ("m_o", "m_lf", "m_rf", "k_of", "k_fe", "k_oe"):
            if not getattr(self, key) > 0:
                raise ContactError(f"{key} must be > 0, got {getattr(self, key)}")
        for key in ("b_of", "b_fe", "b_oe", "f_grip"):
            if getattr(self, key) < 0:
                raise ContactError(f"{key} must be >= 0, got {getattr(self, key)}")

    def replace(self, **changes) -> "ContactDynamicsConfig":
        return ContactDynamicsConfig(**{**asdict(self), **changes})

    @property
    def static_force(self) -> float:
        return max(0.0, self.f_grip + self.f_ext)


def excitation_impulses(cfg: ContactDynamicsConfig, excitation, dt: float, preload: bool = True) -> np.ndarray:
    """Contact force between the actuated fingertip and the object, per sample.

    The fingertip is driven by ``f_grip + f_ext + vib_gain * excitation``.
    With ``preload`` the system starts at its static equilibrium (grasp
    already established); otherwise it starts touching with zero overlap.
    Integration is semi-implicit Euler at step ``dt``.
    """
    e = np.asarray(getattr(excitation, "samples", excitation), dtype=np.float64)
    drive = cfg.f_grip + cfg.f_ext + cfg.vib_gain * e
    k_g = cfg.k_fe + (cfg.k_oe if cfg.env_contact else 0.0)
    b_g = cfg.b_fe + (cfg.b_oe if cfg.env_contact else 0.0)
    m_o = cfg.m_o + cfg.m_rf
    F = cfg.static_force
    x_o0 = F / k_g if preload else 0.0
    x_f0 = x_o0 + F / cfg.k_of if preload else 0.0
    bound = (abs(cfg.f_grip) + abs(cfg.f_ext) + abs(cfg.vib_gain)) / min(cfg.k_of, k_g) + 1e-12
    fc, bad = kernels.two_dof_contact(drive, float(dt), cfg.m_lf, m_o, cfg.k_of, cfg.b_of, k_g, b_g,
                                      x_f0, x_o0, 1e6 * bound)
    if bad >= 0:
        raise ContactDynamicsError(
            f"contact integration diverged at step {bad} (t={bad * dt:.6f} s); the stiffest interface has "
            f"omega*dt = {dt * np.sqrt(cfg.k_of / cfg.m_lf):.3f}; lower k_of or raise the sample rate"
        )
    return fc
