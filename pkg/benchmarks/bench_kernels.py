"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the environment switch is not
needed. Prints the best-of-N wall time per kernel and the speedup, and
checks that the two backends agree.
"""

import argparse
import sys
import timeit

import numpy as np

from tdisac import _kernels_py
from tdisac.array_channel import element_positions
from tdisac.scenario import default_scenario

try:
    from tdisac import _kernels as _compiled
except ImportError:
    _compiled = None


def music_case(n_points=20_000, seed=0):
    cfg = default_scenario()
    rng = np.random.default_rng(seed)
    elements = np.stack([element_positions(m, cfg) for m in range(cfg.n_aps)])
    centers = cfg.ap_centers_array
    points = rng.uniform(1.0, 69.0, (n_points, 2))
    MN = elements.shape[0] * elements.shape[1]
    A = rng.standard_normal((MN, 12)) + 1j * rng.standard_normal((MN, 12))
    signal, _ = np.linalg.qr(A)
    return (points, elements, centers, cfg.carrier_wavelength, signal)


def error_case(n_samples=100_000, seed=0):
    cfg = default_scenario()
    n = cfg.n_half
    elements = np.column_stack([np.arange(-n, n + 1) * cfg.element_spacing, np.zeros(2 * n + 1)])
    angles = np.random.default_rng(seed).uniform(0, 2 * np.pi, n_samples)
    user = np.array([25 * np.cos(0.5), 25 * np.sin(0.5)])
    return (elements, np.zeros(2), user, 0.01, angles, cfg.carrier_wavelength)


def bench(name, fn_py, fn_c, args, repeat):
    t_py = min(timeit.repeat(lambda: fn_py(*args), number=1, repeat=repeat))
    line = f"{name:<20s} python {t_py * 1e3:9.2f} ms"
    if fn_c is not None:
        t_c = min(timeit.repeat(lambda: fn_c(*args), number=1, repeat=repeat))
        diff = np.max(np.abs(np.asarray(fn_py(*args)) - np.asarray(fn_c(*args))))
        line += f"   cython {t_c * 1e3:9.2f} ms   speedup {t_py / t_c:6.1f}x   max|diff| {diff:.1e}"
    print(line)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    bench("music_denominator", _kernels_py.music_denominator,
          _compiled and _compiled.music_denominator, music_case(), args.repeat)
    bench("mean_channel_error", _kernels_py.mean_channel_error,
          _compiled and _compiled.mean_channel_error, error_case(), args.repeat)


if __name__ == "__main__":
    main()
