"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to :class:`Tensor` objects in
creation order; :func:`backward` walks it in reverse and accumulates exact
gradients into the :class:`ParamSet` the leaves were bound to.  Only the ops
needed by MLPs, the VQ bottleneck and the MI critics are provided.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamSet",
    "MlpSpec",
    "AdamState",
    "TapeError",
    "forward",
    "backward",
    "init_mlp",
    "mlp",
    "optimizer_step",
    "global_norm",
    "save_checkpoint",
    "load_checkpoint",
]


class TapeError(RuntimeError):
    """Raised when a tape is replayed after its parameters changed."""


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "param", "op")

    def __init__(self, value, tape: "Tape", parents=(), vjp=None, op="leaf", param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = vjp
        self.tape = tape
        self.param = param
        self.op = op
        _check_finite(self.value, op)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"


class Tape:
    """Ordered record of a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._versions: dict[int, tuple[ParamSet, int]] = {}

    def param(self, params: "ParamSet", name: str) -> Tensor:
        self._versions[id(params)] = (params, params.version)
        return Tensor(params.values[name], self, op=f"param:{name}", param=(params, name))

    def const(self, value) -> Tensor:
        return Tensor(value, self, op="const")

    def check_fresh(self) -> None:
        for params, version in self._versions.values():
            if params.version != version:
                raise TapeError("parameters were mutated after this tape was recorded")


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value + b.value, tape, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value - b.value, tape, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    av, bv = a.value, b.value
    return Tensor(
        av * bv, tape, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, a.tape, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return Tensor(y, a.tape, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), a.tape, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            y = np.exp(a.value)
        except FloatingPointError as err:
            raise FloatingPointError("overflow in exp") from err
    return Tensor(y, a.tape, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise FloatingPointError("log of non-positive value")
    x = a.value
    return Tensor(np.log(x), a.tape, (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.value
    return Tensor(x * x, a.tape, (a,), lambda g: (2.0 * g * x,), "square")


# -- reductions and shape ops -----------------------------------------------


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(a.value.sum(axis=axis), a.tape, (a,), vjp, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a: Tensor, axis=None) -> Tensor:
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    w = np.exp(x - m)
    s = w.sum(axis=axis, keepdims=True)
    soft = w / s
    out = np.log(s) + m
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out, a.tape, (a,), vjp, "logsumexp")


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    av, bv = a.value, b.value
    return Tensor(av @ bv, tape, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as one node; ``x`` is (N, in), ``w`` (in, out), ``b`` (out,)."""
    xv, wv = x.value, w.value
    return Tensor(
        xv @ wv + b.value, x.tape, (x, w, b),
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)), "linear",
    )


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*parts)
    parts = [_as_tensor(p, tape) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([p.value for p in parts], axis=axis), tape, tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.value.reshape(shape), a.tape, (a,), lambda g: (g.reshape(old),), "reshape")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` with scatter-add backward."""
    index = np.asarray(index)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(table.value[index], table.tape, (table,), vjp, "take")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.value.copy(), a.tape, (), None, "stop_gradient")


def straight_through(e: Tensor, z: Tensor) -> Tensor:
    """Forward value of ``z``; backward passes the upstream gradient to ``e`` unchanged.

    ``z`` receives nothing through this node, so codebook gradients can only
    come from the quantization loss.
    """
    if e.shape != z.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {z.shape}")
    return Tensor(z.value.copy(), e.tape, (e,), lambda g: (g,), "straight_through")


# -- parameters -------------------------------------------------------------


class ParamSet:
    """Named float64 parameters with matching gradient accumulators."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0
        for k, v in (values or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.version += 1

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.zeros(0)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()]) if self.grads else np.zeros(0)

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def __len__(self):
        return len(self.values)


def backward(tape: Tape, output: Tensor, upstream=None) -> None:
    """Accumulate d(output)/d(param) into every ParamSet bound on ``tape``."""
    tape.check_fresh()
    if output.tape is not tape:
        raise TapeError("output does not belong to this tape")
    upstream = np.ones_like(output.value) if upstream is None else np.asarray(upstream, dtype=np.float64)
    if upstream.shape != output.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {output.shape}")
    for node in tape.nodes:
        node.grad = None
    output.grad = upstream.copy()
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        if node.param is not None:
            params, name = node.param
            params.grads[name] += g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            _check_finite(pg, f"backward of {node.op}")
            parent.grad = pg if parent.grad is None else parent.grad + pg


# -- MLPs -------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MlpSpec, params: ParamSet | None = None, prefix: str = "") -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    params = ParamSet() if params is None else params
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        params.add(f"{prefix}W{i}", rng.uniform(-bound, bound, size=(n_in, n_out)))
        params.add(f"{prefix}b{i}", rng.uniform(-bound, bound, size=(n_out,)))
    return params


def mlp(spec: MlpSpec, params: ParamSet, x: Tensor, prefix: str = "") -> Tensor:
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {spec.widths[0]}")
    act = tanh if spec.activation == "tanh" else relu
    h = x
    tape = x.tape
    for i in range(spec.n_layers):
        h = linear(h, tape.param(params, f"{prefix}W{i}"), tape.param(params, f"{prefix}b{i}"))
        if i < spec.n_layers - 1:
            h = act(h)
    return h


def forward(spec: MlpSpec, params: ParamSet, x) -> tuple[Tensor, Tape]:
    tape = Tape()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return mlp(spec, params, tape.const(x)), tape


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))


def optimizer_step(
    params: ParamSet,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    grad_clip: float = 0.0,
) -> float:
    """One AdamW update.  Returns the pre-clip global gradient norm."""
    norm = global_norm(params.grads.values())
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient; refusing to update")
    factor = 1.0
    if grad_clip > 0 and norm > grad_clip:
        factor = grad_clip / norm
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, value in params.values.items():
        g = params.grads[name] * factor
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            value -= lr * weight_decay * value
        value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.bump()
    return norm


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(params: ParamSet, path: str, meta: dict | None = None) -> None:
    """Write ``<path>.manifest`` (key:value text) and ``<path>.params`` (float32 LE)."""
    blob = bytearray()
    lines = ["format: mvplam-params-1"]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}: {v}")
    offset = 0
    for name, value in params.values.items():
        data = value.astype("<f4").tobytes()
        shape = "x".join(str(s) for s in value.shape) or "scalar"
        lines.append(f"param.{name}: offset={offset} shape={shape}")
        blob += data
        offset += len(data)
    lines.append(f"bytes: {offset}")
    lines.append(f"sha256: {hashlib.sha256(bytes(blob)).hexdigest()}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".params", "wb") as fh:
        fh.write(bytes(blob))
    with open(path + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> tuple[ParamSet, dict[str, str]]:
    with open(path + ".manifest") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    with open(path + ".params", "rb") as fh:
        blob = fh.read()
    params = ParamSet()
    meta: dict[str, str] = {}
    for line in lines:
        key, _, rest = line.partition(": ")
        if key.startswith("meta."):
            meta[key[5:]] = rest
        elif key.startswith("param."):
            fields = dict(item.split("=") for item in rest.split())
            shape = () if fields["shape"] == "scalar" else tuple(int(s) for s in fields["shape"].split("x"))
            n = int(np.prod(shape)) if shape else 1
            off = int(fields["offset"])
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
            params.add(key[6:], arr.reshape(shape))
        elif key == "bytes" and int(rest) != len(blob):
            raise ValueError(f"{path}.params: expected {rest} bytes, found {len(blob)}")
    return params, meta
