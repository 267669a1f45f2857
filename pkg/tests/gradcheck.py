"""Central finite-difference oracle shared by the gradient tests.

The analytic gradient is taken in float32; the oracle re-evaluates the same
function in float64 so its own rounding noise stays far below the tolerance.
"""

import numpy as np

from urebench import autodiff as ad

RTOL = 1e-2
ATOL = 1e-4
STEP = 1e-3


def fd_gradient(fn, inputs, which, h=STEP):
    base = [np.asarray(v, dtype=np.float64) for v in inputs]
    grad = np.zeros_like(base[which])
    with ad.precision(np.float64):
        for idx in np.ndindex(grad.shape):
            hi = [v.copy() for v in base]
            lo = [v.copy() for v in base]
            hi[which][idx] += h
            lo[which][idx] -= h
            f_hi = fn(*[ad.Tensor(v) for v in hi]).item()
            f_lo = fn(*[ad.Tensor(v) for v in lo]).item()
            grad[idx] = (f_hi - f_lo) / (2 * h)
    return grad


def check_gradients(fn, inputs):
    """Largest mismatch score over all inputs; <= 1 means within rtol OR atol everywhere."""
    tensors = [ad.Tensor(np.asarray(v, dtype=np.float32), requires_grad=True) for v in inputs]
    ad.backward(fn(*tensors))
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = fd_gradient(fn, inputs, i)
        err = np.abs(analytic - numeric)
        score = np.minimum(err / ATOL, err / (RTOL * np.maximum(np.abs(numeric), 1e-30)))
        worst = max(worst, float(score.max()))
    return worst


# ---------------------------------------------------------------------------
# one random case per call for every differentiable primitive; each returns
# (inputs, fn) where fn maps Tensors to a scalar Tensor
# ---------------------------------------------------------------------------

def _shape(rng, ndim, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def _weighted(out_shape, rng):
    wts = rng.standard_normal(out_shape)
    return lambda t: ad.mul(t, wts).sum()


def _case_add(rng):
    shape = _shape(rng, 2)
    proj = _weighted(shape, rng)
    return [rng.standard_normal(shape), rng.standard_normal((1, shape[1]))], lambda a, b: proj(ad.add(a, b))


def _case_mul(rng):
    shape = _shape(rng, 3)
    proj = _weighted(shape, rng)
    return [rng.standard_normal(shape), rng.standard_normal(shape[-1:])], lambda a, b: proj(ad.mul(a, b))


def _case_square(rng):
    shape = _shape(rng, 2)
    proj = _weighted(shape, rng)
    return [rng.standard_normal(shape)], lambda a: proj(ad.square(a))


def _case_sum(rng):
    shape = _shape(rng, 3)
    return [rng.standard_normal(shape)], lambda a: ad.square(ad.tsum(a))


def _case_reshape(rng):
    shape = _shape(rng, 3)
    target = (shape[0] * shape[1], shape[2])
    proj = _weighted(target, rng)
    return [rng.standard_normal(shape)], lambda a: proj(ad.reshape(a, target))


def _case_take(rng):
    n, k = _shape(rng, 2, 2, 6)
    rows = rng.integers(0, n, size=3)  # repeats exercise accumulation
    proj = _weighted((3, k), rng)
    return [rng.standard_normal((n, k))], lambda a: proj(ad.take(a, rows))


def _case_relu(rng):
    shape = _shape(rng, 2)
    x = rng.standard_normal(shape)
    x[np.abs(x) < 0.05] += 0.2  # keep away from the kink
    proj = _weighted(shape, rng)
    return [x], lambda a: proj(ad.relu(a))


def _case_pool(rng):
    shape = _shape(rng, 2, 1, 3) + _shape(rng, 2, 2, 4)
    proj = _weighted(shape[:2], rng)
    return [rng.standard_normal(shape)], lambda a: proj(ad.global_avg_pool(a))


def _case_dense(rng):
    n, d, k = _shape(rng, 3)
    proj = _weighted((n, k), rng)
    return [rng.standard_normal((n, d)), rng.standard_normal((d, k)), rng.standard_normal(k)], \
        lambda x, w, b: proj(ad.dense(x, w, b))


def _case_xent(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    return [rng.standard_normal((n, k)) * 2], lambda z: ad.softmax_cross_entropy(z, labels)


def _conv_case(padding):
    def build(rng):
        n, c, f = _shape(rng, 3, 1, 3)
        h, w = _shape(rng, 2, 3, 5)
        out = (n, f, h, w) if padding == "same" else (n, f, h - 2, w - 2)
        proj = _weighted(out, rng)
        return [rng.standard_normal((n, c, h, w)), rng.standard_normal((f, c, 3, 3)), rng.standard_normal(f)], \
            lambda x, k, b: proj(ad.conv2d(x, k, b, padding))
    return build


PRIMITIVE_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "square": _case_square,
    "sum": _case_sum,
    "reshape": _case_reshape,
    "take": _case_take,
    "relu": _case_relu,
    "global_avg_pool": _case_pool,
    "dense": _case_dense,
    "softmax_cross_entropy": _case_xent,
    "conv2d_same": _conv_case("same"),
    "conv2d_valid": _conv_case("valid"),
}
