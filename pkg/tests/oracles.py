"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np

from tla import dl


def naive_conv1d(x, w, b):
    n, c_in, length = x.shape
    c_out, _, k = w.shape
    out = np.zeros((n, c_out, length - k + 1))
    for i in range(n):
        for o in range(c_out):
            for t in range(length - k + 1):
                acc = 0.0
                for c in range(c_in):
                    for kk in range(k):
                        acc += x[i, c, t + kk] * w[o, c, kk]
                out[i, o, t] = acc + b[o]
    return out


def central_difference(f, x, h=1e-5):
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def _distinct(rng, shape):
    # a permutation with spacing 0.1 keeps every pooling window free of ties
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 - 1.0).astype(np.float64)


def gradient_cases(rng):
    """Yield ``(name, relative_error)`` for one random tiny instance of every backward op."""
    n, c, length, o, k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(4, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    x, w, b = rng.standard_normal((n, c, length)), rng.standard_normal((o, c, k)), rng.standard_normal(o)
    go = rng.standard_normal((n, o, length - k + 1))
    gx, gw, gb = dl.conv1d_backward(x, w, go)
    obj = lambda: float(np.sum(dl.conv1d_forward(x, w, b) * go))  # noqa: E731
    yield "conv1d.x", rel_error(gx, central_difference(obj, x))
    yield "conv1d.w", rel_error(gw, central_difference(obj, w))
    yield "conv1d.b", rel_error(gb, central_difference(obj, b))

    f_in, f_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    xd, wd, bd = rng.standard_normal((n, f_in)), rng.standard_normal((f_in, f_out)), rng.standard_normal(f_out)
    god = rng.standard_normal((n, f_out))
    gx, gw, gb = dl.dense_backward(xd, wd, god)
    obj = lambda: float(np.sum(dl.dense_forward(xd, wd, bd) * god))  # noqa: E731
    yield "dense.x", rel_error(gx, central_difference(obj, xd))
    yield "dense.w", rel_error(gw, central_difference(obj, wd))
    yield "dense.b", rel_error(gb, central_difference(obj, bd))

    xr = _away_from_zero(rng, (n, c, length))
    gor = rng.standard_normal(xr.shape)
    obj = lambda: float(np.sum(dl.relu_forward(xr) * gor))  # noqa: E731
    yield "relu", rel_error(dl.relu_backward(xr, gor), central_difference(obj, xr))

    width = int(rng.integers(1, 4))
    xp = _distinct(rng, (n, c, length))
    out, idx = dl.max_pool1d_forward(xp, width)
    gop = rng.standard_normal(out.shape)
    obj = lambda: float(np.sum(dl.max_pool1d_forward(xp, width)[0] * gop))  # noqa: E731
    yield "maxpool1d", rel_error(dl.max_pool1d_backward(xp.shape, idx, width, gop), central_difference(obj, xp, h=1e-3))

    classes = int(rng.integers(2, 6))
    logits, labels = rng.standard_normal((n, classes)), rng.integers(0, classes, n)
    _, g = dl.softmax_xent(logits, labels)
    yield "softmax_xent", rel_error(g, central_difference(lambda: dl.softmax_xent(logits, labels)[0], logits))


def model_gradient_error(rng):
    """Whole tiny conv net: backward_pass against finite differences of forward_pass."""
    model = dl.ModelSpec(
        (
            dl.conv_layer(rng, 2, 3, 2),
            dl.LayerSpec("relu"),
            dl.LayerSpec("maxpool1d", width=2),
            dl.LayerSpec("flatten"),
            dl.dense_layer(rng, 3 * 3, 3),
        )
    )
    x = rng.standard_normal((2, 2, 7))
    labels = rng.integers(0, 3, 2)
    acts, _ = dl.forward_pass(model, x, labels)
    grads = dl.backward_pass(model, acts, labels)
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        num = central_difference(lambda: dl.forward_pass(model, x, labels)[1], p)
        worst = max(worst, rel_error(g, num))
    return worst
