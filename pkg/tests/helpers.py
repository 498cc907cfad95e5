"""Shared oracles for the test suite."""

import numpy as np

from dagcnn._kernels import NUMBA_AVAILABLE, NUMBA_KERNELS, NUMPY_KERNELS

KERNEL_SETS = [NUMPY_KERNELS] + ([NUMBA_KERNELS] if NUMBA_AVAILABLE else [])
KERNEL_IDS = [k.name for k in KERNEL_SETS]


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def conv_loop(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    H, W, _ = x.shape
    Kh, Kw, _, Co = w.shape
    xp = np.zeros((H + 2 * pad, W + 2 * pad, x.shape[2]))
    xp[pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - Kh) // stride + 1
    Wo = (W + 2 * pad - Kw) // stride + 1
    out = np.zeros((Ho, Wo, Co))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[i * stride:i * stride + Kh, j * stride:j * stride + Kw]
            for o in range(Co):
                out[i, j, o] = np.sum(patch * w[..., o]) + b[o]
    return out


def random_dag(seed, max_nodes=12, max_taps=4, K=3):
    """A random valid DAG: a short backbone with pooled heads summed by one Add.

    Heads hang off arbitrary backbone nodes (not only ReLUs); some heads skip the
    L2 normalization and sometimes the Add lists one head twice, so fan-outs of
    2+ and duplicate edges both occur. Weights are uniform in [-1, 1].
    """
    from dagcnn.graph import Graph, Kind

    rng = np.random.default_rng(seed)
    g = Graph()
    H, W = (int(v) for v in rng.integers(3, 7, size=2))
    C = int(rng.integers(1, 4))
    prev = g.add(Kind.INPUT, height=H, width=W, channels=C)
    budget = max_nodes - 3  # Input, Add, Loss
    n_taps = int(rng.integers(1, max_taps + 1))
    backbone_len = int(rng.integers(1, max(2, budget - 3 * n_taps + 1)))
    backbone = []
    for _ in range(backbone_len):
        h, w, c = g[prev].shape
        choice = rng.choice(["conv", "relu", "pool"])
        if choice == "pool" and min(h, w) >= 2:
            prev = g.add(Kind.MAXPOOL, [prev], window=2, stride=int(rng.integers(1, 3)))
        elif choice == "relu":
            prev = g.add(Kind.RELU, [prev])
        else:
            prev = g.add(Kind.CONV, [prev], kh=int(rng.integers(1, 4)), kw=int(rng.integers(1, 4)),
                         out_channels=int(rng.integers(1, 4)), stride=1, pad=1)
        backbone.append(prev)
    room = (max_nodes - len(g) - 2)
    heads = []
    taps = rng.choice(backbone, size=min(n_taps, len(backbone)), replace=False)
    for t in sorted(int(v) for v in taps):
        use_l2 = bool(rng.integers(0, 2))
        cost = 3 if use_l2 else 2
        if room < cost:
            break
        node = g.add(Kind.GLOBAL_AVG_POOL, [t])
        if use_l2:
            node = g.add(Kind.L2_NORMALIZE, [node])
        heads.append(g.add(Kind.FULLY_CONNECTED, [node], out_features=K))
        room -= cost
    if not heads:
        node = g.add(Kind.GLOBAL_AVG_POOL, [backbone[-1]])
        heads.append(g.add(Kind.FULLY_CONNECTED, [node], out_features=K))
    parents = list(heads)
    if rng.integers(0, 3) == 0:
        parents.append(heads[0])
    total = g.add(Kind.ADD, parents)
    g.add(Kind.SOFTMAX_LOSS, [total], num_classes=K)
    for _, _, arr in g.parameters():
        arr[...] = rng.uniform(-1, 1, size=arr.shape)
    x = rng.uniform(-1, 1, size=g.input_shape)
    return g, x, int(rng.integers(0, K))


def greedy_oracle(candidates, scorer):
    """Greedy selection by enumerating, each round, every subset one larger than
    the current one via itertools, instead of extending the current set."""
    from itertools import combinations

    pool = sorted(set(candidates))
    current, current_score, trace = (), 0.0, []
    for size in range(1, len(pool) + 1):
        options = [s for s in combinations(pool, size) if set(current) <= set(s)]
        scored = [(scorer(s), s) for s in options]
        best = max(v for v, _ in scored)
        # ties go to the lowest new member; combinations() yields them in that order
        subset = next(s for v, s in scored if v == best)
        if best <= current_score:
            break
        (added,) = set(subset) - set(current)
        trace.append((added, best))
        current, current_score = subset, best
    return trace
