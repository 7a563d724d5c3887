import logging
import struct

import numpy as np
import pytest

from modalsense.contact import contact_damping, total_modal_damping, ContactEvent
from modalsense.fem import material
from modalsense.mesh import TetMesh
from modalsense.modal import ModalModel
from modalsense.synth import (SynthesisError, WavError, Waveform, add_noise, export_wav, import_wav, prepare_modes,
                              read_wav, superimpose_leak, synthesize, synthesize_coupled, write_wav)

SR = 44100
H = 1 / SR
TET = TetMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


def _single_mode(freq=1000.0, modes=None):
    U = np.arange(1, 13, dtype=float).reshape(12, 1) / 10 if modes is None else modes
    return ModalModel(np.array([(2 * np.pi * freq) ** 2]), U, material("steel"), "")


def _impulse(n=SR // 2):
    f = np.zeros(n)
    f[0] = 1.0
    return Waveform(f, SR)


def _closed_form(lam, c, n):
    s = c / 2
    wd = np.sqrt(lam - s * s)
    t = np.arange(n) * H
    return H * np.exp(-s * t) * np.sin(wd * t) / wd


def test_undamped_coefficients():
    st = prepare_modes(_single_mode(1000.0), [0.0], SR)
    assert st.a2[0] == -1.0
    assert st.a1[0] == pytest.approx(2 * np.cos(2 * np.pi * 1000 * H), abs=1e-15)
    assert st.damped_freqs[0] == pytest.approx(1000.0, rel=1e-12)


def test_overdamped_dropped():
    m = _single_mode(100.0)
    st = prepare_modes(m, [2 * 2 * np.pi * 100.0 + 1.0], SR)
    assert st.dropped == 1 and len(st.kept) == 0
    y = synthesize(m, TET, [1e4], _impulse(100), TET.vertices[1], TET.vertices[2])
    assert not y.samples.any()


@pytest.mark.parametrize("freq, c", [(1000.0, 0.0), (3068.0, 20.0), (12000.0, 300.0)])
def test_unit_impulse_closed_form(freq, c):
    n = SR // 2
    a, m = 1, 2
    model = _single_mode(freq, np.eye(12)[:, [3 * a + 1]] + np.eye(12)[:, [3 * m + 1]] * 0.5)
    y = synthesize(model, TET, [c], _impulse(n), TET.vertices[a], TET.vertices[m], (0, 1, 0), (0, 1, 0))
    ref = 0.5 * _closed_form(model.eigenvalues[0], c, n)
    # relative to the response peak, far stricter than an absolute 1e-6
    assert np.sqrt(np.mean((y.samples - ref) ** 2)) < 1e-6 * np.abs(ref).max()
    np.testing.assert_allclose(y.samples / 0.5, ref / 0.5, rtol=1e-9, atol=1e-9 * H / (2 * np.pi * freq))


def test_single_mode_gain_product():
    model = _single_mode(2500.0)
    n_a, n_m = np.array([0.6, 0.8, 0.0]), np.array([0.0, 0.0, -1.0])
    y = synthesize(model, TET, [50.0], _impulse(), TET.vertices[3], TET.vertices[0], n_a, n_m)
    ga = model.vertex_block(3)[:, 0] @ n_a
    gm = model.vertex_block(0)[:, 0] @ n_m
    ref = ga * gm * _closed_form(model.eigenvalues[0], 50.0, SR // 2)
    np.testing.assert_allclose(y.samples, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_zero_force(bar_model, small_bar):
    y = synthesize(bar_model, small_bar, np.ones(bar_model.r), Waveform(np.zeros(1000), SR),
                   small_bar.vertices[0], small_bar.vertices[-1])
    assert not y.samples.any()


def test_superposition(bar_model, small_bar, rng):
    c = 1e-3 * np.sqrt(bar_model.eigenvalues)
    f1, f2 = rng.normal(size=SR // 4), rng.normal(size=SR // 4)
    run = lambda f: synthesize(bar_model, small_bar, c, Waveform(f, SR), small_bar.vertices[3],
                               small_bar.vertices[40]).samples
    y12, y1, y2 = run(f1 + f2), run(f1), run(f2)
    assert np.sqrt(np.mean((y12 - y1 - y2) ** 2)) <= 1e-9 * np.sqrt(np.mean(y12**2))


def test_impulsive_contact_equals_force_sample(bar_model, small_bar):
    c = 1e-3 * np.sqrt(bar_model.eigenvalues)
    p, n = small_bar.vertices[5], (0.0, 0.0, 1.0)
    f = np.zeros(2000)
    f[100] = 2.0 * SR  # 2 N s delivered in one sample
    direct = synthesize(bar_model, small_bar, c, Waveform(f, SR), p, small_bar.vertices[9], actuator_normal=n)
    inj = synthesize(bar_model, small_bar, c, Waveform(np.zeros(2000), SR), small_bar.vertices[30],
                     small_bar.vertices[9], impulses=[(100 / SR, p, n, 2.0)])
    np.testing.assert_allclose(inj.samples, direct.samples, rtol=1e-12, atol=1e-12 * np.abs(direct.samples).max())


def test_spectral_peak_at_damped_frequency():
    model = _single_mode(4321.0)
    c = 200.0
    y = synthesize(model, TET, [c], _impulse(SR), TET.vertices[1], TET.vertices[2])
    fd = prepare_modes(model, [c], SR).damped_freqs[0]
    peak = np.argmax(np.abs(np.fft.rfft(y.samples))) * SR / len(y.samples)
    assert abs(peak - fd) <= SR / len(y.samples)


def test_more_damping_decays_faster():
    def decay_time(c):
        y = synthesize(_single_mode(2000.0), TET, [c], _impulse(SR), TET.vertices[1], TET.vertices[2]).samples
        env = np.abs(y)
        return np.flatnonzero(env > 1e-3 * env.max())[-1]

    times = [decay_time(c) for c in (5.0, 10.0, 40.0, 160.0)]
    assert times == sorted(times, reverse=True)


def test_post_excitation_rms_non_increasing(bar_model, small_bar, aluminium):
    G = contact_damping(bar_model, small_bar, [ContactEvent.make(0, small_bar.vertices[3], (0, 1, 0), 40)], 0.5)
    c = np.diag(total_modal_damping(bar_model, aluminium, G))
    f = np.zeros(SR)
    f[: SR // 10] = np.random.default_rng(3).normal(size=SR // 10)
    y = synthesize(bar_model, small_bar, c, Waveform(f, SR), small_bar.vertices[3], small_bar.vertices[40]).samples
    blocks = y[SR // 10:].reshape(9, SR // 10)
    rms = np.sqrt((blocks**2).mean(axis=1))
    assert np.all(np.diff(rms) <= 0)


@pytest.mark.parametrize("output", ["velocity", "acceleration"])
def test_derived_outputs(output):
    model = _single_mode(1500.0)
    kw = dict(actuator_point=TET.vertices[1], mic_point=TET.vertices[2])
    d = synthesize(model, TET, [10.0], _impulse(), **kw).samples
    y = synthesize(model, TET, [10.0], _impulse(), output=output, **kw).samples
    ref = np.diff(d, prepend=0.0) * SR
    if output == "acceleration":
        ref = np.diff(ref, prepend=0.0) * SR
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_coupled_matches_diagonal_when_diagonal(bar_model, small_bar):
    c = 1e-3 * np.sqrt(bar_model.eigenvalues)
    f = np.zeros(SR // 10)
    f[:441] = 1.0
    kw = dict(actuator_point=small_bar.vertices[3], mic_point=small_bar.vertices[40])
    a = synthesize(bar_model, small_bar, c, Waveform(f, SR), **kw).samples
    b = synthesize_coupled(bar_model, small_bar, np.diag(c), Waveform(f, SR), **kw).samples
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-9 * np.abs(a).max())


def test_coupled_full_matrix_runs(bar_model, small_bar, aluminium):
    G = contact_damping(bar_model, small_bar, [ContactEvent.make(0, small_bar.vertices[3], (0, 1, 0), 40)], 0.5)
    C = total_modal_damping(bar_model, aluminium, G)
    kw = dict(force_signal=_impulse(SR // 10), actuator_point=small_bar.vertices[3], mic_point=small_bar.vertices[40])
    full = synthesize_coupled(bar_model, small_bar, C, **kw).samples
    diag = synthesize(bar_model, small_bar, np.diag(C), **kw).samples
    # off-diagonal coupling is a small perturbation of the diagonal approximation
    assert np.linalg.norm(full - diag) < 0.5 * np.linalg.norm(diag)
    assert np.linalg.norm(full - diag) > 0


def test_unknown_output_rejected():
    with pytest.raises(SynthesisError):
        synthesize(_single_mode(), TET, [0.0], _impulse(10), TET.vertices[0], TET.vertices[1], output="jerk")


# ---- leak -----------------------------------------------------------------


def test_leak_gain_zero_and_self(rng):
    s = Waveform(rng.normal(size=1000), SR)
    np.testing.assert_array_equal(superimpose_leak(s, s, 0.0).samples, s.samples)
    np.testing.assert_array_equal(superimpose_leak(s, s, 1.0).samples, 2 * s.samples)


def test_leak_alignment_by_cross_correlation(rng):
    n = SR // 2
    base = rng.normal(size=n) * 0.1
    base[1234] = 5.0
    sim = Waveform(base, SR)
    leak = Waveform(np.roll(base, 100), SR)
    out = superimpose_leak(sim, leak, 0.7).samples
    aligned = (out - base) / 0.7
    xc = np.fft.irfft(np.fft.rfft(aligned) * np.conj(np.fft.rfft(base)), n)
    assert int(np.argmax(xc)) == 0


def test_leak_rate_mismatch():
    with pytest.raises(SynthesisError):
        superimpose_leak(Waveform(np.ones(4), SR), Waveform(np.ones(4), 48000), 1.0)


def test_noise_snr(rng):
    w = Waveform(np.sin(np.arange(SR) * 0.1), SR)
    noisy = add_noise(w, rng, snr_db=20)
    noise = noisy.samples - w.samples
    snr = 20 * np.log10(np.sqrt(np.mean(w.samples**2)) / np.sqrt(np.mean(noise**2)))
    assert snr == pytest.approx(20, abs=0.2)
    assert add_noise(w, rng, sigma=0.0) is w


# ---- WAV ------------------------------------------------------------------


def test_wav_round_trip(tmp_path, rng):
    w = Waveform(rng.normal(size=1001).astype(np.float32).astype(np.float64), SR)
    back = read_wav(write_wav(w, tmp_path / "a.wav"))
    assert back.sample_rate == SR
    assert back.samples.tobytes() == w.samples.tobytes()


def test_wav_readable_by_stdlib_layout(tmp_path):
    import scipy.io.wavfile

    path = write_wav(Waveform(np.linspace(-1, 1, 11), 8000), tmp_path / "b.wav")
    rate, data = scipy.io.wavfile.read(path)
    assert rate == 8000 and data.dtype == np.float32
    np.testing.assert_allclose(data, np.linspace(-1, 1, 11), rtol=1e-7)


def _pcm24(path, ints, rate=SR):
    data = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
    fmt = struct.pack("<HHIIHH", 1, 1, rate, rate * 3, 3, 24)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_read_pcm24(tmp_path, caplog, rng):
    ints = np.concatenate([[-(2**23), 2**23 - 1, 0, -1, 1], rng.integers(-(2**23), 2**23, 200)])
    _pcm24(tmp_path / "c.wav", ints)
    with caplog.at_level(logging.INFO, logger="modalsense.synth"):
        w = read_wav(tmp_path / "c.wav")
    assert np.max(np.abs(w.samples - ints / 2.0**23)) <= 2.0**-23
    assert w.samples[0] == -1.0
    assert "24-bit PCM" in caplog.text


def test_read_pcm16_via_scipy(tmp_path):
    import scipy.io.wavfile

    ints = np.array([-32768, -1, 0, 1, 32767], dtype=np.int16)
    scipy.io.wavfile.write(tmp_path / "d.wav", 22050, ints)
    w = read_wav(tmp_path / "d.wav")
    assert w.sample_rate == 22050
    np.testing.assert_array_equal(w.samples, ints / 32768.0)


def test_wav_errors(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"nope")
    with pytest.raises(WavError):
        read_wav(tmp_path / "x.wav")


def test_export_scale_round_trip(tmp_path):
    w = Waveform(np.array([0.0, 2e-9, -4e-9, 1e-9]), SR)
    wav, meta = export_wav(w, tmp_path / "e.wav", scenario_id="x")
    raw = read_wav(wav)
    assert np.max(np.abs(raw.samples)) == pytest.approx(0.5)
    np.testing.assert_allclose(import_wav(wav).samples, w.samples, rtol=1e-6)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.ones((2, 2)))
