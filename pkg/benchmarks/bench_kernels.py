"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Every kernel is called once before timing so numba compilation is excluded;
the reported figure is the best of ``--repeat`` runs.
"""
import argparse
import timeit

import numpy as np

from kklearn import _kernels
from kklearn._backend import HAVE_NUMBA
from kklearn.dynamics import builtin_system
from kklearn.neural import param_count


def cases():
    rng = np.random.default_rng(0)
    dims = np.array([2, 50, 50, 50, 50, 50, 5], dtype=np.int64)
    P = rng.normal(size=param_count(dims)) * 0.1
    X, V = rng.normal(size=(32, 2)), rng.normal(size=(32, 2))
    Gy, Gt = rng.normal(size=(32, 5)), rng.normal(size=(32, 5))
    act = _kernels.RELU
    duff = builtin_system("reverse_duffing")
    X0 = rng.uniform(-1, 1, (100, 2))
    lo, hi = -np.ones(2), np.ones(2)
    W0 = np.zeros((1, 1, 2))
    A, B = -np.diag(np.arange(1.0, 6.0)), np.ones((5, 1))
    U = rng.normal(size=(100, 2001, 1))
    Z0 = np.zeros((100, 5))
    maps = _kernels.rk4_linear_maps(A, B, 0.01)
    Um = np.ascontiguousarray(_kernels.midpoints(U, "cubic"))
    U1 = np.ascontiguousarray(U[:, 1:])
    return {
        "mlp forward (batch 32, 5x50)": (
            lambda: _kernels.mlp_forward_np(P, dims, act, X),
            lambda: _kernels.mlp_forward_nb(P, dims, act, X)),
        "mlp value+grad": (
            lambda: _kernels.mlp_value_grad_np(P, dims, act, X, Gy),
            lambda: _kernels.mlp_value_grad_nb(P, dims, act, X, Gy)),
        "mlp tangent grad (PDE residual)": (
            lambda: _kernels.mlp_tangent_grad_np(P, dims, act, X, V, Gy, Gt),
            lambda: _kernels.mlp_tangent_grad_nb(P, dims, act, X, V, Gy, Gt)),
        "rk4 batch (100 x 2000 steps)": (
            lambda: _kernels.rk4_batch_np(duff.f, X0, 0.01, 2000, lo, hi, True),
            lambda: _kernels.rk4_batch_nb(duff.f_jit, X0, 0.01, 2000, lo, hi, True, W0, False)),
        "linear filter (100 x 2000 steps)": (
            lambda: _kernels.linear_filter_np(*maps, U, Um, U1, Z0),
            lambda: _kernels.linear_filter_nb(*maps, U, Um, U1, Z0)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':36s} {'numpy':>11s} {'numba':>11s} {'speedup':>8s}")
    for name, (f_np, f_nb) in cases().items():
        f_np(), f_nb()  # warm up and compile
        n = 3 if "steps" in name else 200
        t_np = min(timeit.repeat(f_np, number=n, repeat=args.repeat)) / n
        t_nb = min(timeit.repeat(f_nb, number=n, repeat=args.repeat)) / n
        print(f"{name:36s} {t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
