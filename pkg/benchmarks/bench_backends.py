"""Wall-clock comparison of the compiled and numpy path loops.

    python3 benchmarks/bench_backends.py [--paths 200000] [--repeat 3]

Times the bare loops on pre-drawn noise, then the full simulators (which also
draw the innovations), on the nonlinear sine model with both backends. Outputs
must agree before any time is printed.
"""

import argparse
import time

import numpy as np

from rmparametrix import kernels
from rmparametrix.chains import simulate_V
from rmparametrix.diffusions import simulate_coupled_limit_and_cutoff, simulate_cutoff_sde
from rmparametrix.flows import DriftField
from rmparametrix.model import INNOVATIONS, build_grid, harmonic_schedule, sine_model


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--paths", type=int, default=200_000)
    parser.add_argument("--shift", type=int, default=400)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not built; run: python3 setup.py build_ext --inplace")

    model = sine_model(1.0, 0.2, sigma=1.0, theta0=1.0)
    field = DriftField.build(model, build_grid(harmonic_schedule(args.shift, 0.5)))
    inn = INNOVATIONS["logistic"]()
    n, M = args.paths, field.grid.m_of_n
    noise = np.ascontiguousarray(np.random.default_rng(0).standard_normal((M, n)))
    normals = np.ascontiguousarray(np.random.default_rng(1).standard_normal((4 * M, n)))
    cells = np.ascontiguousarray(np.repeat(np.arange(M), 4), dtype=np.int_)
    dts = np.ascontiguousarray(np.repeat(field.next_gamma[:M], 4) / 4)
    coeffs = (field.theta_bar, field.sqrt_gamma, field.alpha, field.ratio)
    modules = {"compiled": kernels.compiled_backend, "python": kernels.python_backend}

    def loop_v(b):
        x = np.zeros(n)
        modules[b].v_chain(x, noise, 0, *coeffs, field.next_gamma, field.a_N, 1.0, 0.2, 1.0)
        return x

    def loop_em(b):
        x = np.zeros(n)
        modules[b].em_cutoff(x, normals, cells, dts, *coeffs, field.a_N, 1.0, 0.2, 1.0, 1e6)
        return x

    cases = {
        "loop: V chain": loop_v,
        "loop: Euler-Maruyama": loop_em,
        "cutoff chain V": lambda b: simulate_V(field, inn, 0.3, n, 1, backend=b).paths,
        "cutoff diffusion X^N": lambda b: simulate_cutoff_sde(field, 0.0, 0.3, n, 2, 4,
                                                              backend=b),
        "coupled limit/cutoff": lambda b: np.concatenate(
            simulate_coupled_limit_and_cutoff(field, 0.0, 0.3, n, 3, 4, backend=b)),
    }
    print(f"M(N) = {M} steps, {n} paths, best of {args.repeat}")
    print(f"{'kernel':24s} {'compiled s':>11s} {'numpy s':>9s} {'speed-up':>9s}")
    for name, run in cases.items():
        tc, a = best_of(lambda: run("compiled"), args.repeat)
        tp, b = best_of(lambda: run("python"), args.repeat)
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:24s} {tc:11.3f} {tp:9.3f} {tp / tc:8.1f}x")

if __name__ == "__main__":
    main()
