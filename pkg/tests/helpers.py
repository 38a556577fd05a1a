"""Independent oracles shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np

from atsnas.tensor import OPS

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def _numeric_grad(f, x, h=FD_STEP):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck_op(op, inputs, params, attrs, rng):
    """Worst relative error between the analytic and central-difference
    gradients of ``sum(R * op(inputs, params))`` for a random ``R``."""
    fwd, bwd = OPS[op]
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = [np.array(p, dtype=np.float64) for p in params]
    out, cache = fwd(inputs, params, attrs)
    weights = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(fwd(inputs, params, attrs)[0] * weights))

    battrs = dict(attrs, _w=params[0]) if op == "conv" else attrs
    in_grads, p_grads = bwd(weights, cache, battrs)
    worst = 0.0
    for x, g in itertools.chain(zip(inputs, in_grads), zip(params, p_grads)):
        worst = max(worst, rel_error(np.asarray(g), _numeric_grad(loss, x)))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


CONV_VARIANTS = [
    # (k, stride, depthwise)
    (3, 1, False), (5, 1, False), (3, 2, False), (1, 1, False),
    (3, 1, True), (5, 2, True), (1, 2, False), (5, 1, True),
]


def random_op_instance(op, rng, i):
    """The ``i``-th random small instance of primitive ``op``."""
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(2, 4))
    w = 2 * int(rng.integers(2, 4))
    if op == "conv":
        k, stride, depthwise = CONV_VARIANTS[i % len(CONV_VARIANTS)]
        cout = c if depthwise else int(rng.integers(1, 4))
        per = 1 if depthwise else c
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((cout, per, k, k))
        b = rng.standard_normal(cout)
        return [x], [wt, b], {"k": k, "stride": stride, "pad": k // 2, "depthwise": depthwise}
    if op == "relu":
        return [_away_from_zero(rng, (n, c, h, w))], [], {}
    if op == "add":
        return [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))], [], {}
    if op == "upsample":
        return [rng.standard_normal((n, c, h // 2, w // 2))], [], {}
    if op == "gap":
        return [rng.standard_normal((n, c, h, w))], [], {}
    if op == "sigmoid":
        return [3 * rng.standard_normal((n, c, h, w))], [], {}
    if op == "scale":
        return [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, 1, 1))], [], {}
    raise KeyError(op)


def conv2d_loops(x, w, b, stride=1, pad=0, depthwise=False):
    """Direct nested-loop cross-correlation (NCHW)."""
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    chans = [o] if depthwise else range(c)
                    for ci in chans:
                        wi = 0 if depthwise else ci
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[s, ci, i * stride + di, j * stride + dj] * w[o, wi, di, dj]
                    out[s, o, i, j] = acc
    return out


def det_cofactor(m):
    """Laplace expansion along the first row (exact for integer input)."""
    m = [list(map(int, row)) for row in m]
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total = 0
    for j in range(n):
        if m[0][j] == 0:
            continue
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        total += (-1) ** j * m[0][j] * det_cofactor(minor)
    return total


def log_abs_det_cofactor(m):
    d = det_cofactor(m)
    return -math.inf if d == 0 else math.log(abs(d))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
