"""Excitation waveforms and spectral features of received windows.

Features are amplitudes of the unnormalized FFT,
``X[k] = sum_n x[n] exp(-2j pi k n / N)``, sampled at 3000, 3050, ..., 9950 Hz.
The band is half-open so that it has exactly 140 points. With 0.5 s windows
at 44.1 kHz the bin spacing is 2 Hz and every band frequency is an exact bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .synth import Waveform

BAND_START = 3000.0
BAND_STEP = 50.0
BAND_SIZE = 140
KINDS = ("impulse", "linear_sweep", "exponential_sweep")


class SignalError(ValueError):
    pass


def band_frequencies(start=BAND_START, step=BAND_STEP, size=BAND_SIZE) -> np.ndarray:
    return start + step * np.arange(size)


@dataclass(frozen=True)
class ExcitationSpec:
    kind: str = "impulse"
    f0: float = 20.0
    f1: float = 10000.0
    duration: float | None = None  # 0.01 s for impulse, 0.5 s for sweeps
    loop_period: float = 0.5
    sample_rate: int = 44100

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SignalError(f"unknown excitation kind {self.kind!r}; expected one of {KINDS}")
        if self.duration is None:
            object.__setattr__(self, "duration", 0.01 if self.kind == "impulse" else 0.5)
        if not 0 < self.f0 < self.f1 < self.sample_rate / 2:
            raise SignalError(f"need 0 < f0 < f1 < sample_rate/2, got f0={self.f0}, f1={self.f1}, "
                              f"sample_rate={self.sample_rate}")
        if not 0 < self.duration <= self.loop_period:
            raise SignalError(f"need 0 < duration <= loop_period, got {self.duration}, {self.loop_period}")

    def instantaneous_frequency(self, t):
        """Frequency law of the sweep within one cell (Hz)."""
        t = np.asarray(t, dtype=float)
        T = self.duration
        if self.kind == "linear_sweep":
            return self.f0 + (self.f1 - self.f0) * t / T
        if self.kind == "exponential_sweep":
            return self.f0 * (self.f1 / self.f0) ** (t / T)
        raise SignalError("an impulse has no frequency law")


def _count(seconds, rate):
    # tolerate representation error like 0.01 * 44100 = 441.00000000000006
    return int(math.ceil(seconds * rate - 1e-9))


def excitation_cell(spec: ExcitationSpec) -> np.ndarray:
    sr = spec.sample_rate
    cell = np.zeros(int(round(spec.loop_period * sr)))
    n_on = min(_count(spec.duration, sr), len(cell))
    if spec.kind == "impulse":
        cell[:n_on] = 1.0
        return cell
    t = np.arange(n_on) / sr
    T = spec.duration
    if spec.kind == "linear_sweep":
        phase = spec.f0 * t + (spec.f1 - spec.f0) * t**2 / (2 * T)
    else:
        ratio = spec.f1 / spec.f0
        phase = spec.f0 * T / np.log(ratio) * (ratio ** (t / T) - 1.0)
    cell[:n_on] = np.sin(2 * np.pi * phase)
    return cell


def generate_excitation(spec: ExcitationSpec, total: float) -> Waveform:
    """The excitation cell looped to fill ``total`` seconds."""
    if total < spec.loop_period:
        raise SignalError(f"total duration {total} s is shorter than one loop period ({spec.loop_period} s)")
    n = int(round(total * spec.sample_rate))
    cell = excitation_cell(spec)
    return Waveform(np.resize(cell, n), spec.sample_rate)


def segment_windows(w: Waveform, window: float = 0.5, take_first: float = 1.0) -> list[Waveform]:
    sr = w.sample_rate
    n_take = int(round(take_first * sr))
    n_win = int(round(window * sr))
    if len(w.samples) < n_take:
        raise SignalError(f"recording has {len(w.samples) / sr:.4f} s, need at least {take_first} s")
    if n_win <= 0 or n_win > n_take:
        raise SignalError(f"window of {window} s does not fit in {take_first} s")
    return [Waveform(w.samples[i:i + n_win], sr) for i in range(0, n_take - n_win + 1, n_win)]


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    band: np.ndarray
    source_window: int = 0


def amplitude_spectrum(x, taper: str = "rect") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if taper == "hann":
        x = x * np.hanning(len(x))
    elif taper != "rect":
        raise SignalError(f"unknown taper {taper!r}")
    return np.abs(np.fft.rfft(x))


def extract_features(window: Waveform, band=None, taper: str = "rect", source_window: int = 0) -> FeatureVector:
    """Spectral amplitudes of one window at the band frequencies.

    The window length must put every band frequency on an exact FFT bin
    (22050 samples at 44.1 kHz for the default band).
    """
    freqs = band_frequencies() if band is None else np.asarray(band, dtype=float)
    n, sr = len(window.samples), window.sample_rate
    pos = freqs * n / sr
    idx = np.rint(pos).astype(np.int64)
    if n == 0 or np.any(np.abs(pos - idx) > 1e-9) or idx.max() > n // 2:
        raise SignalError(f"window of {n} samples at {sr} Hz does not place the feature band on exact bins "
                          f"(bin spacing {sr / max(n, 1):.4g} Hz); use a loop-period window")
    return FeatureVector(amplitude_spectrum(window.samples, taper)[idx], freqs, source_window)


def features_from_recording(w: Waveform, window=0.5, take_first=1.0, taper="rect", average=False) -> np.ndarray:
    """Feature rows (one per window, or their mean when ``average``)."""
    rows = np.array([extract_features(win, taper=taper, source_window=i).values
                     for i, win in enumerate(segment_windows(w, window, take_first))])
    return rows.mean(axis=0, keepdims=True) if average else rows


def smooth_spectrum(values, window_len: int = 11, polyorder: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing; edge windows use a polynomial fit on the truncated data."""
    if window_len % 2 != 1 or window_len <= polyorder or polyorder < 0:
        raise SignalError(f"need an odd window_len > polyorder >= 0, got {window_len}, {polyorder}")
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window_len:
        raise SignalError(f"spectrum of length {len(values)} is shorter than the window ({window_len})")
    return savgol_filter(values, window_len, polyorder, mode="interp")
