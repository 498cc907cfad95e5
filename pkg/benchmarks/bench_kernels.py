"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel runs on the same inputs under both backends; outputs are checked
to agree before timings are reported. The last block times one labelled
forward/backward pass of the default multi-scale model.
"""

import argparse
import timeit

import numpy as np

from dagcnn._kernels import NUMBA_AVAILABLE, NUMBA_KERNELS, NUMPY_KERNELS
from dagcnn.graph import ExecContext, backward, forward
from dagcnn.multiscale import BackboneSpec, build_multiscale

LAYERS = ("conv 3 8", "relu", "conv 3 8", "relu", "pool 2", "conv 3 16", "relu", "conv 3 16", "relu", "pool 2",
          "conv 3 32", "relu", "conv 3 32", "relu")

# (H, W, Cin, K, Cout, stride, pad)
CONV_SHAPES = [(32, 32, 1, 3, 8, 1, 1), (32, 32, 8, 3, 8, 1, 1), (16, 16, 16, 3, 16, 1, 1), (8, 8, 32, 3, 32, 1, 1),
               (32, 32, 8, 5, 16, 2, 2)]
POOL_SHAPES = [(32, 32, 8, 2, 2), (16, 16, 16, 3, 2)]


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def conv_cases(rng):
    for H, W, C, K, O, s, p in CONV_SHAPES:
        x = rng.normal(size=(H, W, C))
        w = rng.normal(size=(K, K, C, O))
        b = rng.normal(size=O)
        Ho, Wo = (H + 2 * p - K) // s + 1, (W + 2 * p - K) // s + 1
        g = rng.normal(size=(Ho, Wo, O))
        label = f"conv {H}x{W}x{C} k{K} ->{O} s{s}"
        yield label + " fwd", lambda k, x=x, w=w, b=b, s=s, p=p: k.conv2d_forward(x, w, b, s, p)
        yield label + " bwd", lambda k, x=x, w=w, g=g, s=s, p=p: k.conv2d_backward(x, w, g, s, p)


def pool_cases(rng):
    for H, W, C, win, s in POOL_SHAPES:
        x = rng.normal(size=(H, W, C))
        out, arg = NUMPY_KERNELS.maxpool_forward(x, win, s)
        g = rng.normal(size=out.shape)
        label = f"pool {H}x{W}x{C} w{win} s{s}"
        yield label + " fwd", lambda k, x=x, win=win, s=s: k.maxpool_forward(x, win, s)
        yield label + " bwd", lambda k, g=g, arg=arg, shape=x.shape: k.maxpool_backward(g, arg, shape)


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy backend can run")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, fn in [*conv_cases(rng), *pool_cases(rng)]:
        if not agree(fn(NUMPY_KERNELS), fn(NUMBA_KERNELS)):
            raise SystemExit(f"backends disagree on {label}")
        t_np = best_of(lambda: fn(NUMPY_KERNELS), args.repeat)
        t_nb = best_of(lambda: fn(NUMBA_KERNELS), args.repeat)
        print(f"{label:38s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x")

    backbone = BackboneSpec.parse(LAYERS, (32, 32, 1))
    graph = build_multiscale(backbone, backbone.relu_indices, 16, seed=0)
    x = rng.uniform(size=(32, 32, 1))

    def step(kernels):
        ctx = ExecContext(kernels=kernels)
        forward(graph, ctx, x, 3)
        return backward(graph, ctx)

    ga, gb = step(NUMPY_KERNELS), step(NUMBA_KERNELS)
    if not all(agree(ga[k], gb[k]) for k in ga):
        raise SystemExit("backends disagree on the model gradient")
    t_np = best_of(lambda: step(NUMPY_KERNELS), args.repeat)
    t_nb = best_of(lambda: step(NUMBA_KERNELS), args.repeat)
    print(f"{'model forward+backward (1 image)':38s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
