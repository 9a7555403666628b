"""The built-in primitive set.

Every evaluator takes a :class:`~tla.runtime.CallContext` followed by its
argument values and returns a value or a FutureCell.  Collective
primitives derive their tag from the node, so all localities agree on it
without coordination.
"""

from __future__ import annotations

import numpy as np

from . import arrays, dl
from .errors import ShapeMismatch
from .executor import map_async, reduce_async
from .resilience import checksum, fnv1a64, parse_policy, run_resilient
from .runtime import Primitive

REGISTRY: dict[str, Primitive] = {}


def primitive(name: str, min_arity: int, max_arity: int | None = -1, *, collective: bool = False, lazy: bool = False):
    if max_arity == -1:
        max_arity = min_arity

    def register(fn):
        REGISTRY[name] = Primitive(name, fn, min_arity, max_arity, collective, lazy)
        return fn

    return register


def default_registry() -> dict[str, Primitive]:
    return dict(REGISTRY)


def _arr(x) -> np.ndarray:
    if isinstance(x, arrays.DistArray):
        raise TypeError("distributed array used where a local array is expected; use (local d) or (gather d)")
    if isinstance(x, str):
        raise TypeError(f"expected a number or array, got string {x!r}")
    return np.asarray(x, dtype=np.float64)


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def _shape(x) -> tuple[int, ...]:
    dims = np.atleast_1d(_arr(x))
    if dims.ndim != 1 or np.any(dims < 0) or np.any(dims != np.floor(dims)):
        raise ValueError(f"not a shape: {x!r}")
    return tuple(int(d) for d in dims)


def _int(x) -> int:
    v = float(_arr(x))
    if v != int(v):
        raise ValueError(f"expected an integer, got {v}")
    return int(v)


def _elementwise(ctx, fn, args):
    vals = [_arr(a) for a in args]
    if len(vals) > 1 and all(v.shape == vals[0].shape for v in vals) and vals[0].size > ctx.env.sched.config.grain_threshold:
        return map_async(fn, vals, ctx.env.sched).then(_scalar_or_array)
    return _scalar_or_array(np.asarray(fn(*vals)))


def _fold(fn):
    def combine(*vals):
        acc = vals[0]
        for v in vals[1:]:
            acc = fn(acc, v)
        return acc

    return combine


# -- arithmetic -------------------------------------------------------------------------


@primitive("add", 2, None)
def _add(ctx, *xs):
    return _elementwise(ctx, _fold(np.add), xs)


@primitive("sub", 2)
def _sub(ctx, a, b):
    return _elementwise(ctx, np.subtract, (a, b))


@primitive("mul", 2, None)
def _mul(ctx, *xs):
    return _elementwise(ctx, _fold(np.multiply), xs)


@primitive("div", 2)
def _div(ctx, a, b):
    return _elementwise(ctx, np.divide, (a, b))


@primitive("maximum", 2)
def _maximum(ctx, a, b):
    return _elementwise(ctx, np.maximum, (a, b))


@primitive("minimum", 2)
def _minimum(ctx, a, b):
    return _elementwise(ctx, np.minimum, (a, b))


@primitive("pow", 2)
def _pow(ctx, a, b):
    return _elementwise(ctx, np.power, (a, b))


for _name, _fn in (("neg", np.negative), ("exp", np.exp), ("log", np.log), ("sqrt", np.sqrt), ("abs", np.abs)):
    primitive(_name, 1)(lambda ctx, x, _fn=_fn: _elementwise(ctx, _fn, (x,)))


@primitive("lt", 2)
def _lt(ctx, a, b):
    return _scalar_or_array(np.less(_arr(a), _arr(b)).astype(np.float64))


@primitive("gt", 2)
def _gt(ctx, a, b):
    return _scalar_or_array(np.greater(_arr(a), _arr(b)).astype(np.float64))


@primitive("eq", 2)
def _eq(ctx, a, b):
    return _scalar_or_array(np.equal(_arr(a), _arr(b)).astype(np.float64))


@primitive("if", 3)
def _if(ctx, cond, a, b):
    return a if float(_arr(cond)) != 0.0 else b


# -- construction and shape ----------------------------------------------------------------


@primitive("list", 0, None)
def _list(ctx, *xs):
    items = [_arr(x) for x in xs]
    if len({a.shape for a in items}) <= 1:
        return np.array(items, dtype=np.float64).reshape((len(items),) + (items[0].shape if items else ()))
    return list(items)  # ragged: kept as a plain list


@primitive("constant", 2)
def _constant(ctx, value, shape):
    return np.full(_shape(shape), float(_arr(value)))


@primitive("zeros", 1)
def _zeros(ctx, shape):
    return np.zeros(_shape(shape))


@primitive("ones", 1)
def _ones(ctx, shape):
    return np.ones(_shape(shape))


@primitive("iota", 1)
def _iota(ctx, n):
    return np.arange(_int(n), dtype=np.float64)


def _rng(ctx) -> np.random.Generator:
    # same stream on every locality: seeded by run seed and node id
    return np.random.default_rng([ctx.env.seed, ctx.node.id, fnv1a64(ctx.env.stream.encode())])


@primitive("random", 1)
def _random(ctx, shape):
    return _rng(ctx).random(_shape(shape))


@primitive("randn", 1)
def _randn(ctx, shape):
    return _rng(ctx).standard_normal(_shape(shape))


@primitive("shape", 1)
def _shape_of(ctx, x):
    if isinstance(x, arrays.DistArray):
        return np.array(x.meta.global_shape.dims, dtype=np.float64)
    return np.array(_arr(x).shape, dtype=np.float64)


@primitive("size", 1)
def _size(ctx, x):
    return float(_arr(x).size)


@primitive("reshape", 2)
def _reshape(ctx, x, shape):
    return _arr(x).reshape(_shape(shape))


@primitive("transpose", 1)
def _transpose(ctx, x):
    return np.ascontiguousarray(_arr(x).T)


@primitive("slice", 3)
def _slice(ctx, x, lo, hi):
    return _arr(x)[_int(lo) : _int(hi)].copy()


@primitive("concat", 2, None)
def _concat(ctx, *xs):
    return np.concatenate([np.atleast_1d(_arr(x)) for x in xs])


@primitive("nth", 2)
def _nth(ctx, x, i):
    if isinstance(x, list):
        return _scalar_or_array(np.asarray(x[_int(i)]).copy())
    return _scalar_or_array(np.asarray(_arr(x)[_int(i)]).copy())


@primitive("dot", 2)
def _dot(ctx, a, b):
    a, b = _arr(a), _arr(b)
    if a.ndim and b.ndim and a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"dot of {a.shape} and {b.shape}")
    return _scalar_or_array(np.asarray(np.dot(a, b)))


# -- reductions ---------------------------------------------------------------------------------


@primitive("sum", 1)
def _sum(ctx, x):
    return reduce_async(_arr(x), ctx.env.sched, "sum")


@primitive("max", 1)
def _max(ctx, x):
    return reduce_async(_arr(x), ctx.env.sched, "max")


@primitive("mean", 1)
def _mean(ctx, x):
    x = _arr(x)
    return reduce_async(x, ctx.env.sched, "sum").then(lambda s: s / x.size)


@primitive("checksum", 1)
def _checksum(ctx, x):
    return f"{checksum(_arr(x)):#018x}"


# -- localities and distributed arrays --------------------------------------------------------


@primitive("locality", 0)
def _locality(ctx):
    return float(ctx.env.rank)


@primitive("num-localities", 0)
def _num_localities(ctx):
    return float(ctx.env.size)


@primitive("distribute", 1, 3)
def _distribute(ctx, x, axis=0.0, overlap=0.0):
    x = _arr(x)
    meta = arrays.make_meta(f"a{ctx.node.id}", x.shape, ctx.env.size, _int(axis), _int(overlap))
    return arrays.distribute(x, meta, ctx.env.rank)


def _dist(x) -> arrays.DistArray:
    if not isinstance(x, arrays.DistArray):
        raise TypeError("expected a distributed array (see distribute)")
    return x


@primitive("local", 1)
def _local(ctx, d):
    return _dist(d).core().copy()


@primitive("gather", 1, collective=True)
def _gather(ctx, d):
    return arrays.gather_global(_dist(d), ctx.env.comm, ctx.tag)


@primitive("halo", 1, collective=True)
def _halo(ctx, d):
    return arrays.halo_exchange(_dist(d), ctx.env.comm, ctx.tag)


@primitive("dist-sum", 1, collective=True)
def _dist_sum(ctx, d):
    partial = reduce_async(_dist(d).core(), ctx.env.sched, "sum")
    return partial.then(lambda s: ctx.env.comm.all_reduce(np.array([s]), "sum", tag=ctx.tag)).then(lambda r: float(r[0]))


@primitive("all-reduce", 1, collective=True)
def _all_reduce(ctx, x):
    x = _arr(x)
    return ctx.env.comm.all_reduce(x, "sum", tag=ctx.tag).then(lambda r: _scalar_or_array(r.reshape(x.shape)))


@primitive("all-reduce-max", 1, collective=True)
def _all_reduce_max(ctx, x):
    x = _arr(x)
    return ctx.env.comm.all_reduce(x, "max", tag=ctx.tag).then(lambda r: _scalar_or_array(r.reshape(x.shape)))


@primitive("all-gather", 1, collective=True)
def _all_gather(ctx, x):
    def stack(parts):
        if all(p.shape == parts[0].shape for p in parts):
            return np.stack(parts)
        return np.concatenate([np.atleast_1d(p) for p in parts])

    return ctx.env.comm.all_gather(_arr(x), tag=ctx.tag).then(stack)


@primitive("broadcast", 1, 2, collective=True)
def _broadcast(ctx, x, root=0.0):
    root = _int(root)
    value = _arr(x) if ctx.env.rank == root else None
    return ctx.env.comm.broadcast(root, value, tag=ctx.tag).then(_scalar_or_array)


# -- deep learning ---------------------------------------------------------------------------------


@primitive("relu", 1)
def _relu(ctx, x):
    return dl.relu_forward(_arr(x))


@primitive("conv1d", 3)
def _conv1d(ctx, x, w, b):
    return dl.conv1d_forward(_arr(x), _arr(w), np.atleast_1d(_arr(b)))


@primitive("dense", 3)
def _dense(ctx, x, w, b):
    return dl.dense_forward(_arr(x), _arr(w), np.atleast_1d(_arr(b)))


@primitive("softmax-xent", 2)
def _softmax_xent(ctx, logits, labels):
    return dl.softmax_xent(_arr(logits), _arr(labels))[0]


@primitive("spatial-conv", 3, collective=True)
def _spatial_conv(ctx, d, w, b):
    d = _dist(d)
    w, b = _arr(w), np.atleast_1d(_arr(b))
    return ctx.env.sched.spawn(lambda: dl.spatial_conv_forward(d, w, b, ctx.env.comm, ctx.tag))


@primitive("cnn4-loss", 1, 2, collective=True)
def _cnn4_loss(ctx, batch, seed=None):
    """Mean loss of the reference CNN on a synthetic batch split over the localities."""
    n = _int(batch)
    seed = ctx.env.seed if seed is None else _int(seed)
    x, labels = dl.synthetic_har(n, seed=seed)
    model = dl.reference_cnn4(seed)
    meta = arrays.make_meta(f"batch{ctx.node.id}", x.shape, ctx.env.size, 0, 0)
    span = arrays.local_span(meta, ctx.env.rank)
    local_sum = dl.forward_pass_parallel(model, x[span.begin : span.end], labels[span.begin : span.end], ctx.env.sched, "sum")
    return ctx.env.comm.all_reduce(np.array([local_sum]), "sum", tag=ctx.tag).then(lambda s: float(s[0]) / n)


# -- resilience -----------------------------------------------------------------------------------------


@primitive("resilient", 1, 2, lazy=True)
def _resilient(ctx, *thunks):
    """``(resilient body)`` uses the run's policy; ``(resilient "replicate:3:checksum" body)`` overrides it."""
    if len(thunks) == 2:
        spec = thunks[0]()
        if not isinstance(spec, str):
            raise TypeError("resilience policy must be a string such as \"replay:3\"")
        policy = parse_policy(spec)
    else:
        policy = ctx.env.policy
    body = thunks[-1]
    result = run_resilient(lambda: _plain(body()), policy, ctx.env.injector)
    return result


def _plain(v):
    if isinstance(v, (arrays.DistArray, str)) or v is None:
        raise TypeError("resilient bodies must produce a number or a local array")
    return _scalar_or_array(_arr(v))
