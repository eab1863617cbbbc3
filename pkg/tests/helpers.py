"""Independent oracles shared by the test modules.

Everything here is plain numpy written separately from the package so that
agreement is evidence, not tautology.
"""

import numpy as np

from mvplam import diffcore as dc
from mvplam.worldgen import DatasetConfig, WorldParams, generate_dataset


def rng(seed=0):
    return np.random.default_rng(seed)


def rel_err(a, b, floor=1e-8):
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_fd(f, params: dc.ParamSet, direction: dict, h=1e-6):
    """Central difference of scalar ``f()`` along ``direction`` in parameter space."""
    base = {k: v.copy() for k, v in params.values.items()}
    out = []
    for sign in (1.0, -1.0):
        for k, d in direction.items():
            params.values[k][...] = base[k] + sign * h * d
        out.append(f())
    for k in base:
        params.values[k][...] = base[k]
    return (out[0] - out[1]) / (2.0 * h)


def random_direction(params: dc.ParamSet, gen, names=None):
    names = params.names() if names is None else names
    return {k: gen.standard_normal(params.values[k].shape) for k in names}


def ad_directional(params: dc.ParamSet, direction: dict):
    return sum(float(np.sum(params.grads[k] * d)) for k, d in direction.items())


# -- numpy re-implementation of the LAM objective ------------------------------------


def np_mlp(values, prefix, n_layers, x, act=np.tanh):
    h = x
    for i in range(n_layers):
        h = h @ values[f"{prefix}W{i}"] + values[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


def surrogate_mvp_loss(model, o_t, o_next, frozen, cross=True):
    """The multi-view objective as a smooth function of the parameters.

    ``frozen`` holds the code indices, encoder output and selected codes at
    the expansion point.  The straight-through latent is ``e + (z0 - e0)``,
    stop-gradient operands are the frozen values; at the expansion point the
    value equals the real loss and the gradient equals the estimator's.
    """
    cfg = model.config
    v = model.params.values
    n, nv, d = o_t.shape
    ft, fn = o_t.reshape(n * nv, d), o_next.reshape(n * nv, d)
    layers = cfg.depth + 1
    e = np_mlp(v, "enc.", layers, np.concatenate([ft, fn], axis=1))
    book = v["codebook"]
    idx = frozen["idx"]
    z_code = book[np.arange(cfg.n_tokens)[None, :], idx].reshape(len(idx), -1)
    z_st = e + (frozen["z"] - frozen["e"])

    def dec(o, z):
        return o + np_mlp(v, "dec.", layers, np.concatenate([o, z], axis=1))

    loss = np.sum((dec(ft, z_st) - fn) ** 2) / n
    loss += np.sum((frozen["e"] - z_code) ** 2) / n
    loss += cfg.beta * np.sum((e - frozen["z"]) ** 2) / n
    if cross:
        dst, src = [], []
        for r in range(n):
            for a in range(nv):
                for b in range(nv):
                    if a != b:
                        dst.append(r * nv + a)
                        src.append(r * nv + b)
        loss += np.sum((dec(ft[dst], z_st[src]) - fn[dst]) ** 2) / n
    return loss


def freeze_point(model, o_t, o_next):
    from mvplam import lam

    n, nv, d = o_t.shape
    e = lam.encode(model, o_t.reshape(-1, d), o_next.reshape(-1, d))
    code, _, _ = lam.quantize(model.codebook, e)
    return {"idx": code.indices, "e": e, "z": code.embedding}


# -- small datasets ---------------------------------------------------------------


def tiny_dataset(seed=0, trajectories=4, length=6, views=2, **kw):
    cfg = DatasetConfig(num_views=views, trajectories=trajectories, length=length, seed=seed,
                        world=WorldParams(), **kw)
    return generate_dataset(cfg)


# -- exact KSG by brute force -------------------------------------------------------


def ksg_bruteforce(x, y, k):
    """Variant-1 KSG in nats with O(N^2) max-norm distances (no jitter)."""
    from scipy.special import digamma

    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    dx = np.max(np.abs(x[:, None] - x[None]), axis=2)
    dy = np.max(np.abs(y[:, None] - y[None]), axis=2)
    dz = np.maximum(dx, dy)
    np.fill_diagonal(dz, np.inf)
    eps = np.sort(dz, axis=1)[:, k - 1]
    np.fill_diagonal(dx, np.inf)
    np.fill_diagonal(dy, np.inf)
    nx = np.sum(dx < eps[:, None], axis=1)
    ny = np.sum(dy < eps[:, None], axis=1)
    n = len(x)
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


# -- gradient probes over every differentiable op -------------------------------------


def _pos(x):
    return x * x + 0.5


OP_CASES = {
    # name: (shapes of the inputs, graph builder from input tensors)
    "add": (((3, 4), (4,)), lambda a, b: dc.add(a, b)),
    "sub": (((3, 4), (3, 1)), lambda a, b: dc.sub(a, b)),
    "mul": (((3, 4), (1, 4)), lambda a, b: dc.mul(a, b)),
    "scale": (((5,),), lambda a: dc.scale(a, -1.7)),
    "neg": (((2, 3),), lambda a: -a),
    "tanh": (((3, 4),), lambda a: dc.tanh(a)),
    "relu": (((3, 4),), lambda a: dc.relu(a)),
    "exp": (((3, 4),), lambda a: dc.exp(a)),
    "log": (((3, 4),), lambda a: dc.log(dc.add(dc.square(a), 0.5))),
    "square": (((3, 4),), lambda a: dc.square(a)),
    "sum_all": (((3, 4),), lambda a: dc.sum(a)),
    "sum_axis0": (((3, 4),), lambda a: dc.sum(a, axis=0)),
    "sum_axis1": (((3, 4),), lambda a: dc.sum(a, axis=1)),
    "mean": (((3, 4),), lambda a: dc.mean(a, axis=1)),
    "logsumexp_all": (((3, 4),), lambda a: dc.logsumexp(a)),
    "logsumexp_axis": (((3, 4),), lambda a: dc.logsumexp(a, axis=0)),
    "matmul": (((3, 4), (4, 2)), lambda a, b: dc.matmul(a, b)),
    "linear": (((3, 4), (4, 2), (2,)), lambda x, w, b: dc.linear(x, w, b)),
    "concat": (((3, 2), (3, 4)), lambda a, b: dc.concat([a, b], axis=1)),
    "reshape": (((3, 4),), lambda a: dc.reshape(a, (2, 6))),
    "take": (((5, 3),), lambda a: dc.take(a, np.array([0, 2, 2, 4, 0, 1]))),
    "stop_gradient": (((3,), (3,)), lambda a, b: dc.mul(a, dc.stop_gradient(b))),
    "mlp_tanh": (((4, 3),), None),
    "mlp_relu": (((4, 3),), None),
}


def run_op_probe(name, seed):
    """Return (autodiff, finite-difference) directional derivatives for one op."""
    gen = np.random.default_rng(seed)
    shapes, build = OP_CASES[name]
    params = dc.ParamSet({f"x{i}": gen.standard_normal(s) for i, s in enumerate(shapes)})
    if name.startswith("mlp"):
        spec = dc.MlpSpec((3, 5, 2), name.split("_")[1], seed)
        dc.init_mlp(spec, params, "m.")
        build = lambda x: dc.mlp(spec, params, x, "m.")  # noqa: E731
    if name == "relu":
        v = params.values["x0"]
        v[np.abs(v) < 0.05] += 0.1
    out_shape = None

    def loss(record=False):
        nonlocal out_shape
        tape = dc.Tape()
        ins = [tape.param(params, f"x{i}") for i in range(len(shapes))]
        out = build(*ins)
        weight = np.random.default_rng(seed + 1).standard_normal(out.shape)
        total = dc.sum(dc.mul(out, weight))
        if record:
            params.zero_grad()
            dc.backward(tape, total)
        return float(total.value)

    loss(record=True)
    # stop_gradient hides b from autodiff by design; probe along a only
    direction = random_direction(params, gen, ["x0"] if name == "stop_gradient" else None)
    return ad_directional(params, direction), directional_fd(loss, params, direction)
