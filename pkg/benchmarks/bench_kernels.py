"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each numba kernel is called once before timing so compilation is excluded.
Outputs are compared so a fast but wrong kernel shows up immediately.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from modalsense import kernels
from modalsense.fem import material
from modalsense.mesh import generate_bar


def _cases(rng):
    mesh = generate_bar(0.2, 0.02, 0.02, [40, 4, 4])
    lam, mu = material("aluminium").lame
    D = kernels.isotropic_elasticity(lam, mu)
    yield "element_matrices", (mesh.vertices, mesh.tets, D, 2700.0), f"{len(mesh.tets)} tets"

    r, n = 64, 44100
    h = 1 / 44100
    lam_ = (2 * np.pi * rng.uniform(100, 15000, r)) ** 2
    sigma = rng.uniform(0, 50, r)
    wd = np.sqrt(lam_ - sigma**2)
    a1 = 2 * np.exp(-sigma * h) * np.cos(wd * h)
    a2 = -np.exp(-2 * sigma * h) * np.ones(r)
    b = h * np.exp(-sigma * h) * np.sin(wd * h) / wd
    idx = np.array([0, 1000, 20000], dtype=np.int64)
    args = (rng.normal(size=n), rng.normal(size=r), rng.normal(size=r), a1, a2, b, idx, rng.normal(size=(3, r)))
    yield "modal_bank", args, f"{r} modes x {n} samples"

    drive = 40 + 5 * rng.normal(size=n)
    yield "two_dof_contact", (drive, h, 0.02, 0.22, 1e6, 50.0, 1e5, 20.0, 4.4e-4, 4e-4, 1.0), f"{n} samples"


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [b for b in ("numpy", "numba") if b in kernels.KERNELS]
    if "numba" not in backends:
        print("numba not installed; timing the numpy path only")
    print(f"{'kernel':<18}{'size':<24}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, call_args, size in _cases(rng):
        times, outs = [], []
        for b in backends:
            fn = kernels.KERNELS[b][name]
            outs.append(_first(fn(*call_args)))  # warmup / JIT compile
            t = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            times.append(1e3 * t)
        if len(outs) == 2:
            ref = outs[0]
            err = np.abs(outs[1] - ref).max() / max(np.abs(ref).max(), 1e-300)
            assert err < 1e-9, f"{name}: backends disagree ({err:.2e})"
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) == 2 else ""
        print(f"{name:<18}{size:<24}" + "".join(f"{t:>12.2f}" for t in times) + speed)


if __name__ == "__main__":
    main()
