"""Modal synthesis of the signal at the microphone vertex, leak mixing and WAV I/O."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import kernels
from .mesh import TetMesh, nearest_vertex

logger = logging.getLogger(__name__)

OUTPUTS = ("displacement", "velocity", "acceleration")
EXPORT_PEAK = 0.5


class SynthesisError(RuntimeError):
    pass


class WavError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1:
            raise ValueError("waveforms are mono; samples must be one-dimensional")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class SynthState:
    """Per-mode impulse-invariant recurrence of the underdamped modes.

    ``q[n] = a1 q[n-1] + a2 q[n-2] + b g[n-1]`` reproduces
    ``h exp(-sigma t) sin(omega_d t) / omega_d`` for a unit force sample.
    """

    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    kept: np.ndarray  # indices into the model's modes
    dropped: int
    sample_rate: int

    @property
    def damped_freqs(self) -> np.ndarray:
        # recover omega_d from the pole angle
        r = np.sqrt(-self.a2)
        return np.arccos(np.clip(self.a1 / (2 * r), -1, 1)) * self.sample_rate / (2 * np.pi)


def prepare_modes(model, c_diag, sample_rate: int) -> SynthState:
    lam = np.asarray(model.eigenvalues, dtype=np.float64)
    c = np.asarray(c_diag, dtype=np.float64)
    if c.shape != lam.shape:
        raise SynthesisError(f"damping vector has {c.size} entries for {lam.size} modes")
    if np.any(c < 0):
        raise SynthesisError("modal damping must be non-negative")
    sigma = 0.5 * c
    kept = np.flatnonzero(sigma**2 < lam)
    dropped = len(lam) - len(kept)
    if dropped:
        logger.info("dropping %d overdamped modes", dropped)
    s, wd = sigma[kept], np.sqrt(lam[kept] - sigma[kept] ** 2)
    h = 1.0 / sample_rate
    decay = np.exp(-s * h)
    return SynthState(2 * decay * np.cos(wd * h), -decay * decay, h * decay * np.sin(wd * h) / wd,
                      kept, dropped, int(sample_rate))


def _to_output(y, sample_rate, output):
    if output not in OUTPUTS:
        raise SynthesisError(f"unknown output quantity {output!r}; expected one of {OUTPUTS}")
    for _ in range(OUTPUTS.index(output)):
        y = np.diff(y, prepend=0.0) * sample_rate
    return y


def _impulse_arrays(model, mesh, impulses, n, sample_rate):
    """Impulsive contacts as one-sample modal forces, sorted by sample index."""
    rows = []
    for t, point, normal, impulse in impulses:
        idx = int(round(t * sample_rate))
        if 0 <= idx < n:
            g = model.vertex_block(nearest_vertex(mesh, point)).T @ np.asarray(normal, dtype=float)
            rows.append((idx, g * impulse * sample_rate))
    rows.sort(key=lambda r: r[0])
    idx = np.array([r[0] for r in rows], dtype=np.int64)
    g = np.array([r[1] for r in rows]).reshape(len(rows), model.r)
    return idx, g


def synthesize(model, mesh: TetMesh, c_diag, force_signal, actuator_point, mic_point,
               actuator_normal=(0.0, 1.0, 0.0), mic_normal=(0.0, -1.0, 0.0),
               duration: float | None = None, impulses=(), output: str = "displacement") -> Waveform:
    """Signal at the microphone vertex for a force applied at the actuator vertex.

    Parameters
    ----------
    force_signal : Waveform
        Contact force (N) along ``actuator_normal``; its rate is the output rate.
    impulses : iterable of (t, point, normal, impulse_Ns)
        Extra impulsive contacts injected at their sample.
    output : {"displacement", "velocity", "acceleration"}
        Quantity projected on ``mic_normal``.
    """
    sr = force_signal.sample_rate
    f = np.asarray(force_signal.samples, dtype=np.float64)
    if duration is not None:
        n = int(round(duration * sr))
        f = np.pad(f[:n], (0, max(0, n - len(f))))
    state = prepare_modes(model, c_diag, sr)
    Ua = model.vertex_block(nearest_vertex(mesh, actuator_point))
    Um = model.vertex_block(nearest_vertex(mesh, mic_point))
    gain_in = (Ua.T @ np.asarray(actuator_normal, dtype=float))[state.kept]
    gain_out = (Um.T @ np.asarray(mic_normal, dtype=float))[state.kept]
    imp_idx, imp_g = _impulse_arrays(model, mesh, impulses, len(f), sr)
    imp_g = np.ascontiguousarray(imp_g[:, state.kept])
    y = kernels.modal_bank(f, np.ascontiguousarray(gain_in), np.ascontiguousarray(gain_out),
                           state.a1, state.a2, state.b, imp_idx, imp_g)
    if not np.all(np.isfinite(y)):
        first = int(np.flatnonzero(~np.isfinite(y))[0])
        bad = np.flatnonzero(~np.isfinite(state.a1 * state.b * gain_in * gain_out))
        raise SynthesisError(f"non-finite sample at index {first}; modes with non-finite coefficients: "
                             f"{state.kept[bad].tolist()}, max |gain| {np.abs(gain_in).max():.3e}")
    return Waveform(_to_output(y, sr, output), sr)


def synthesize_coupled(model, mesh: TetMesh, C_m, force_signal, actuator_point, mic_point,
                       actuator_normal=(0.0, 1.0, 0.0), mic_normal=(0.0, -1.0, 0.0),
                       output: str = "displacement") -> Waveform:
    """Reference path stepping the full r x r damped system.

    Each force sample acts as an impulse of weight ``h`` and the state is
    carried between samples by the exact propagator ``expm(A h)``, the same
    convention as the per-mode recurrence, which it reproduces when ``C_m``
    is diagonal. Needed because explicit or trapezoidal steps lose accuracy
    for modes near Nyquist.
    """
    sr = force_signal.sample_rate
    h = 1.0 / sr
    f = np.asarray(force_signal.samples, dtype=np.float64)
    r = model.r
    C = np.asarray(C_m, dtype=np.float64)
    if C.shape != (r, r):
        raise SynthesisError(f"damping matrix has shape {C.shape}, expected {(r, r)}")
    e_in = model.vertex_block(nearest_vertex(mesh, actuator_point)).T @ np.asarray(actuator_normal, float)
    e_out = model.vertex_block(nearest_vertex(mesh, mic_point)).T @ np.asarray(mic_normal, float)
    A = np.block([[np.zeros((r, r)), np.eye(r)], [-np.diag(model.eigenvalues), -C]])
    Phi = sla.expm(A * h)
    kick = Phi[:, r:] @ (h * e_in)  # propagated velocity impulse
    P = Phi.T.copy()
    s = np.zeros(2 * r)
    y = np.zeros(len(f))
    for n in range(1, len(f)):
        s = s @ P + kick * f[n - 1]
        y[n] = s[:r] @ e_out
    if not np.all(np.isfinite(y)):
        raise SynthesisError("coupled integration produced non-finite samples")
    return Waveform(_to_output(y, sr, output), sr)


def superimpose_leak(sim: Waveform, leak: Waveform, gain: float) -> Waveform:
    """Add a peak-aligned, looped copy of ``leak`` to ``sim``."""
    if sim.sample_rate != leak.sample_rate:
        raise SynthesisError(f"sample rate mismatch: sim {sim.sample_rate} Hz, leak {leak.sample_rate} Hz")
    s, l = sim.samples, np.asarray(leak.samples, dtype=np.float64)
    if gain == 0 or len(l) == 0:
        return Waveform(s.copy(), sim.sample_rate)
    shift = int(np.argmax(np.abs(l))) - int(np.argmax(np.abs(s)))
    aligned = l[(np.arange(len(s)) + shift) % len(l)]
    return Waveform(s + gain * aligned, sim.sample_rate)


def add_noise(w: Waveform, rng, sigma: float | None = None, snr_db: float | None = None) -> Waveform:
    """Additive white Gaussian noise, given either as sigma or as SNR against the signal RMS."""
    if snr_db is not None:
        rms = float(np.sqrt(np.mean(w.samples**2)))
        sigma = rms * 10 ** (-snr_db / 20)
    if not sigma:
        return w
    return Waveform(w.samples + sigma * rng.standard_normal(len(w.samples)), w.sample_rate)


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

_FMT_PCM, _FMT_FLOAT, _FMT_EXT = 1, 3, 0xFFFE


def write_wav(w: Waveform, path) -> Path:
    """32-bit IEEE float, mono, little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(w.samples, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHHH", _FMT_FLOAT, 1, int(w.sample_rate), int(w.sample_rate) * 4, 4, 32, 0)
    chunks = (b"fmt " + struct.pack("<I", len(fmt)) + fmt
              + b"fact" + struct.pack("<II", 4, len(w.samples))
              + b"data" + struct.pack("<I", len(data)) + data)
    if len(data) % 2:
        chunks += b"\0"
    path.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
    return path


def read_wav(path) -> Waveform:
    """Read a mono WAV file; integer PCM (8/16/24/32-bit) is scaled to [-1, 1)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _FMT_EXT and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels != 1:
        raise WavError(f"{path}: {channels} channels; only mono is supported")
    if tag == _FMT_FLOAT and bits in (32, 64):
        x = np.frombuffer(data[: len(data) // (bits // 8) * (bits // 8)], dtype=f"<f{bits // 8}")
    elif tag == _FMT_PCM and bits in (8, 16, 24, 32):
        width = bits // 8
        b = np.frombuffer(data[: len(data) // width * width], dtype=np.uint8).reshape(-1, width)
        if bits == 8:
            x = (b[:, 0].astype(np.float64) - 128.0) / 128.0
        else:
            ints = np.zeros(len(b), dtype=np.int64)
            for k in range(width):
                ints |= b[:, k].astype(np.int64) << (8 * k)
            ints -= (ints >> (bits - 1)) << bits  # sign extend
            x = ints / float(1 << (bits - 1))
        logger.info("%s: converted %d-bit PCM to float", Path(path).name, bits)
    else:
        raise WavError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return Waveform(np.array(x, dtype=np.float64), rate)


def export_wav(w: Waveform, path, **meta) -> tuple[Path, Path]:
    """Peak-normalize to 0.5, write the WAV and a ``.meta.json`` sidecar.

    The sidecar's ``scale`` is the factor applied on export, so physical
    values are ``wav_samples / scale``.
    """
    peak = float(np.max(np.abs(w.samples))) if len(w.samples) else 0.0
    scale = EXPORT_PEAK / peak if peak > 0 else 1.0
    wav_path = write_wav(Waveform(w.samples * scale, w.sample_rate), path)
    meta_path = Path(str(wav_path.with_suffix("")) + ".meta.json")
    doc = {"scale": scale, "sample_rate": int(w.sample_rate), **meta}
    meta_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return wav_path, meta_path


def import_wav(path) -> Waveform:
    """Read a WAV and undo the export scale when a sidecar exists."""
    w = read_wav(path)
    meta_path = Path(str(Path(path).with_suffix("")) + ".meta.json")
    if meta_path.exists():
        scale = json.loads(meta_path.read_text(encoding="utf-8")).get("scale", 1.0)
        return Waveform(w.samples / scale, w.sample_rate)
    return w
