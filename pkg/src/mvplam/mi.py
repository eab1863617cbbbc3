"""Mutual information between latents and actions.

Estimators
----------
* :func:`ksg_estimate` - Kraskov-Stoegbauer-Grassberger kNN estimator (variant 1).
* :func:`mine_estimate` - Donsker-Varadhan critic bound with in-batch shuffles.
* :func:`ba_estimate` - Barber-Agakov bound with a Gaussian decoder.
* :func:`discrete_mi_exact` - exact (conditional) MI on an enumerated joint table.

All reported values are in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import diffcore as dc
from .worldgen import JointTable

LN2 = math.log(2.0)
SPLITS = ("train", "val", "test")


# -- special functions ----------------------------------------------------------

_EULER = 0.57721566490153286061
# Bernoulli-number coefficients of the asymptotic expansion, B_2n / (2n)
_PSI_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760)


def digamma(x) -> np.ndarray:
    """psi(x) for x > 0: upward recurrence to x >= 10, then the asymptotic series."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0):
        raise ValueError("digamma is only implemented for positive arguments")
    acc = np.zeros_like(x)
    small = x < 10.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 10.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    power = inv2.copy()
    for c in _PSI_SERIES:
        series += c * power
        power *= inv2
    return acc + np.log(x) - 0.5 / x - series


def gaussian_mi_bits(rho: float) -> float:
    """Closed-form I(X;Y) for a bivariate normal with correlation ``rho``."""
    return -0.5 * math.log2(1.0 - rho * rho)


def bivariate_gaussian(n: int, rho: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x[:, None], y[:, None]


# -- containers -----------------------------------------------------------------


@dataclass
class PairedSamples:
    """Row-aligned latents ``z`` (N, d_z) and actions ``a`` (N, d_a) with split tags."""

    z: np.ndarray
    a: np.ndarray
    split: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64).reshape(len(self.z), -1))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64).reshape(len(self.a), -1))
        if len(self.z) != len(self.a):
            raise ValueError(f"z has {len(self.z)} rows, a has {len(self.a)}")

    def __len__(self):
        return len(self.z)

    def with_splits(self, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> "PairedSamples":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 5])))
        order = rng.permutation(len(self))
        cuts = np.floor(np.cumsum(fractions)[:-1] * len(self)).astype(int)
        tags = np.empty(len(self), dtype=object)
        for name, rows in zip(SPLITS, np.split(order, cuts)):
            tags[rows] = name
        return PairedSamples(self.z, self.a, tags)

    def part(self, name: str) -> "PairedSamples":
        if self.split is None:
            raise ValueError("samples carry no split tags")
        mask = self.split == name
        if not mask.any():
            raise ValueError(f"split {name!r} is empty")
        return PairedSamples(self.z[mask], self.a[mask])


@dataclass
class MIEstimate:
    estimator: str
    value: float  # bits
    seed: int = 0
    preprocessing: str = ""
    split: str = "all"
    permuted: bool = False
    raw: float | None = None  # KSG value before clamping at zero
    details: dict = field(default_factory=dict)

    @property
    def clamped(self) -> float:
        return max(self.value, 0.0)


# -- preprocessing --------------------------------------------------------------


@dataclass(frozen=True)
class ZStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask, std == 0 columns left untouched


def zscore(x, stats: ZStats | None = None) -> tuple[np.ndarray, ZStats]:
    x = np.asarray(x, dtype=np.float64)
    if stats is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        stats = ZStats(mean, std, constant)
    out = x.copy()
    live = ~stats.constant
    out[:, live] = (x[:, live] - stats.mean[live]) / stats.std[live]
    return out, stats


def destandardize(x, stats: ZStats) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    live = ~stats.constant
    out[:, live] = out[:, live] * stats.std[live] + stats.mean[live]
    return out


def projection_matrix(d_in: int, target_d: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 17])))
    return rng.standard_normal((target_d, d_in))


def random_project(z, target_d: int, seed: int = 0, matrix: np.ndarray | None = None) -> np.ndarray:
    """``z @ W.T`` with ``W`` of i.i.d. standard normals (or the supplied matrix)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    w = projection_matrix(z.shape[1], target_d, seed) if matrix is None else np.asarray(matrix, dtype=np.float64)
    if w.shape != (target_d, z.shape[1]):
        raise ValueError(f"projection matrix shape {w.shape} != {(target_d, z.shape[1])}")
    return z @ w.T


def default_projection_dim(d_z: int) -> int:
    return min(d_z, 32)


def prepare_pairs(z, a, target_d: int | None = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray, str]:
    """Standardize both sides, drop constant columns, randomly project ``z``.

    The projected latents are re-standardized; per-column rescaling leaves MI
    unchanged but keeps the joint max-norm balanced between the two sides.
    """
    z, zs = zscore(z)
    a, az = zscore(a)
    z, a = z[:, ~zs.constant], a[:, ~az.constant]
    desc = "zscore"
    if z.shape[1] == 0:
        return z, a, desc + "+constant-z"
    d = default_projection_dim(z.shape[1]) if target_d is None else target_d
    z = random_project(z, d, seed)
    z, _ = zscore(z)
    return z, a, f"{desc}+proj{d}+zscore"


# -- KSG --------------------------------------------------------------------------


def ksg_mi(x, y, k: int = 5, seed: int = 0, jitter: float = 1e-10) -> float:
    """KSG variant-1 estimate in nats, max-norm neighbourhoods."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64).reshape(len(x), -1))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).reshape(len(y), -1))
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    if jitter:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 23])))
        x = x + jitter * rng.standard_normal(x.shape)
        y = y + jitter * rng.standard_normal(y.shape)
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = dist[:, k]
    radius = np.nextafter(eps, 0.0)  # strict inequality
    nx = cKDTree(x).query_ball_point(x, radius, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, radius, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def ksg_estimate(samples: PairedSamples, k: int = 5, seed: int = 0, split: str = "all",
                 preprocessing: str = "") -> MIEstimate:
    data = samples if split == "all" else samples.part(split)
    if len(data) <= k:
        raise ValueError(f"need more than k={k} samples, got {len(data)}")
    raw = ksg_mi(data.z, data.a, k, seed) / LN2
    return MIEstimate("ksg", max(raw, 0.0), seed, preprocessing, split, raw=raw)


# -- neural estimators ----------------------------------------------------------


@dataclass(frozen=True)
class NeuralSchedule:
    steps: int = 1500
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    hidden: int = 64
    depth: int = 2
    activation: str = "tanh"
    eval_every: int = 50
    patience: int = 8
    shuffles: int = 8


def dv_bound(t_joint: np.ndarray, t_marginals: Sequence[np.ndarray]) -> float:
    """mean T(z,a) - average over shuffles of log mean exp T(z, a_shuffled), in nats."""
    second = [float(np.logaddexp.reduce(t) - math.log(len(t))) for t in t_marginals]
    return float(np.mean(t_joint)) - float(np.mean(second))


def _shuffle_index(n: int, shuffles: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.permutation(n) for _ in range(shuffles)])


def _critic_values(spec: dc.MlpSpec, params: dc.ParamSet, z: np.ndarray, a: np.ndarray, perms: np.ndarray):
    tape = dc.Tape()
    rows = [np.hstack([z, a])] + [np.hstack([z, a[p]]) for p in perms]
    t = dc.mlp(spec, params, tape.const(np.vstack(rows)))
    return tape, t


def _dv_tensor(tape: dc.Tape, t: dc.Tensor, n: int, shuffles: int) -> dc.Tensor:
    flat = dc.reshape(t, (shuffles + 1, n))
    idx_joint = np.arange(n)
    joint = dc.mean(dc.take(dc.reshape(flat, ((shuffles + 1) * n,)), idx_joint))
    marg = dc.take(dc.reshape(flat, ((shuffles + 1) * n,)), np.arange(n, (shuffles + 1) * n))
    lse = dc.logsumexp(dc.reshape(marg, (shuffles, n)), axis=1)
    second = dc.scale(dc.sum(dc.sub(lse, math.log(n))), 1.0 / shuffles)
    return dc.sub(joint, second)


def mine_bound(spec: dc.MlpSpec, params: dc.ParamSet, z, a, shuffles: int, seed: int) -> float:
    """DV bound of a fixed critic on ``(z, a)`` in bits."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 31])))
    perms = _shuffle_index(len(z), shuffles, rng)
    _, t = _critic_values(spec, params, z, a, perms)
    t = t.value.reshape(shuffles + 1, len(z))
    return dv_bound(t[0], list(t[1:])) / LN2


def mine_estimate(samples: PairedSamples, schedule: NeuralSchedule = NeuralSchedule(), seed: int = 0,
                  preprocessing: str = "") -> MIEstimate:
    """Train a critic on the train split, early-stop on val, report the test bound."""
    tr, va, te = (samples.part(s) for s in SPLITS)
    d_in = tr.z.shape[1] + tr.a.shape[1]
    spec = dc.MlpSpec((d_in,) + (schedule.hidden,) * schedule.depth + (1,), schedule.activation, seed)
    params = dc.init_mlp(spec)
    state = dc.AdamState()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 29])))
    best, best_params, stale, trace = -np.inf, params.copy(), 0, []
    b = min(schedule.batch_size, len(tr))
    for step in range(schedule.steps):
        rows = rng.choice(len(tr), size=b, replace=False)
        z, a = tr.z[rows], tr.a[rows]
        perms = _shuffle_index(b, schedule.shuffles, rng)
        tape, t = _critic_values(spec, params, z, a, perms)
        bound = _dv_tensor(tape, dc.reshape(t, (t.shape[0],)), b, schedule.shuffles)
        params.zero_grad()
        dc.backward(tape, dc.scale(bound, -1.0))
        try:
            dc.optimizer_step(params, state, schedule.lr, schedule.weight_decay, schedule.grad_clip)
        except FloatingPointError as err:
            raise FloatingPointError(f"MINE critic diverged at step {step}: {err}") from err
        if (step + 1) % schedule.eval_every == 0:
            val = mine_bound(spec, params, va.z, va.a, schedule.shuffles, seed)
            if not np.isfinite(val):
                raise FloatingPointError(f"MINE validation bound non-finite at step {step}")
            trace.append((step + 1, val))
            if val > best:
                best, best_params, stale = val, params.copy(), 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    value = mine_bound(spec, best_params, te.z, te.a, schedule.shuffles, seed + 1)
    if not np.isfinite(value):
        raise FloatingPointError("MINE test bound non-finite")
    return MIEstimate("mine", value, seed, preprocessing, "test", details={"val_trace": trace, "best_val": best})


SIGMA_FLOOR = 1e-6


def gaussian_loglik(a: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Per-row log N(a; mu, diag(sigma^2)) in nats."""
    r = (a - mu) / sigma
    return -0.5 * np.sum(r * r, axis=1) - np.sum(np.log(sigma)) - 0.5 * a.shape[1] * math.log(2 * math.pi)


def ba_bits(mean_fn: Callable[[np.ndarray], np.ndarray], sigma, marg_mu, marg_sigma, z, a) -> float:
    """(E log q(a|z) - E log q(a)) / log 2 on the given rows."""
    cond = gaussian_loglik(a, mean_fn(z), np.broadcast_to(sigma, a.shape[1:]))
    marg = gaussian_loglik(a, np.broadcast_to(marg_mu, a.shape), np.broadcast_to(marg_sigma, a.shape[1:]))
    return float(np.mean(cond) - np.mean(marg)) / LN2


def ba_estimate(samples: PairedSamples, schedule: NeuralSchedule = NeuralSchedule(), seed: int = 0,
                linear: bool = False, preprocessing: str = "") -> MIEstimate:
    """Gaussian decoder q(a|z) with MLP mean and one learned global std per dim."""
    tr, va, te = (samples.part(s) for s in SPLITS)
    d_z, d_a = tr.z.shape[1], tr.a.shape[1]
    widths = (d_z, d_a) if linear else (d_z,) + (schedule.hidden,) * schedule.depth + (d_a,)
    spec = dc.MlpSpec(widths, schedule.activation, seed)
    params = dc.init_mlp(spec)
    params.add("log_sigma", np.zeros(d_a))
    marg_mu = tr.a.mean(axis=0)
    marg_sigma = tr.a.std(axis=0)
    floored = bool(np.any(marg_sigma < SIGMA_FLOOR))
    marg_sigma = np.maximum(marg_sigma, SIGMA_FLOOR)

    def mean_fn(p):
        return lambda z: dc.forward(spec, p, z)[0].value

    def sigma_of(p):
        return np.maximum(np.exp(p["log_sigma"]), SIGMA_FLOOR)

    state = dc.AdamState()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 37])))
    best, best_params, stale = -np.inf, params.copy(), 0
    b = min(schedule.batch_size, len(tr))
    for step in range(schedule.steps):
        rows = rng.choice(len(tr), size=b, replace=False)
        tape = dc.Tape()
        mu = dc.mlp(spec, params, tape.const(tr.z[rows]))
        log_sigma = tape.param(params, "log_sigma")
        inv_var = dc.exp(dc.scale(log_sigma, -2.0))
        sq = dc.mul(dc.square(dc.sub(mu, tr.a[rows])), inv_var)
        nll = dc.add(dc.scale(dc.sum(sq), 0.5 / b), dc.sum(log_sigma))
        params.zero_grad()
        dc.backward(tape, nll)
        params.grads["log_sigma"][:] = params.grads["log_sigma"]
        try:
            dc.optimizer_step(params, state, schedule.lr, schedule.weight_decay, schedule.grad_clip)
        except FloatingPointError as err:
            raise FloatingPointError(f"BA model diverged at step {step}: {err}") from err
        if (step + 1) % schedule.eval_every == 0:
            val = ba_bits(mean_fn(params), sigma_of(params), marg_mu, marg_sigma, va.z, va.a)
            if val > best:
                best, best_params, stale = val, params.copy(), 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    sigma = np.exp(best_params["log_sigma"])
    floored = floored or bool(np.any(sigma < SIGMA_FLOOR))
    value = ba_bits(mean_fn(best_params), np.maximum(sigma, SIGMA_FLOOR), marg_mu, marg_sigma, te.z, te.a)
    return MIEstimate("ba", value, seed, preprocessing, "test",
                      details={"best_val": best, "sigma_floored": floored})


# -- permutation control ----------------------------------------------------------


def permutation_control(samples: PairedSamples, estimator: Callable[[PairedSamples], MIEstimate],
                        seed: int = 0) -> MIEstimate:
    """Break the pairing with a seeded uniform permutation of the actions, then re-estimate."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 41])))
    perm = rng.permutation(len(samples))
    shuffled = PairedSamples(samples.z, samples.a[perm], samples.split)
    est = estimator(shuffled)
    return replace(est, permuted=True)


# -- exact discrete quantities ----------------------------------------------------


def _check_table(table: JointTable) -> None:
    total = float(np.sum(table.p))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"joint probabilities sum to {total!r}")


def _group_mass(table: JointTable, cols: Sequence[str]) -> np.ndarray:
    if not cols:
        return np.array([float(np.sum(table.p))])
    keys = np.stack([np.asarray(table.columns[c]) for c in cols], axis=1)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return np.bincount(inverse.ravel(), weights=table.p)


def _h(table: JointTable, cols: Sequence[str]) -> float:
    m = _group_mass(table, cols)
    m = m[m > 0]
    return float(-np.sum(m * np.log2(m)))


def entropy_exact(table: JointTable, cols: Sequence[str], given: Sequence[str] = ()) -> float:
    _check_table(table)
    cols, given = list(cols), list(given)
    return max(_h(table, cols + given) - _h(table, given), 0.0)


def discrete_mi_exact(table: JointTable, x: Sequence[str], y: Sequence[str],
                      given: Sequence[str] = ()) -> float:
    """I(X;Y|C) = H(X,C) + H(Y,C) - H(X,Y,C) - H(C), clamped at 0 for round-off."""
    _check_table(table)
    x, y, c = list(x), list(y), list(given)
    val = _h(table, x + c) + _h(table, y + c) - _h(table, x + y + c) - _h(table, c)
    return max(val, 0.0)


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class BoundReport:
    i_za: float
    h_z: float
    i_zv_given_ss: float
    h_ss_given_a: float

    @property
    def rhs(self) -> float:
        return self.h_z - self.i_zv_given_ss - self.h_ss_given_a

    @property
    def slack(self) -> float:
        return self.i_za - self.rhs


def _encode_table(table: JointTable, encoder) -> np.ndarray:
    pairs = list(zip(np.asarray(table.columns["O"]).tolist(), np.asarray(table.columns["O2"]).tolist()))
    codes: dict = {}
    for pair in set(pairs):
        if isinstance(encoder, Mapping):
            z = encoder[pair]
            if isinstance(z, Mapping):
                support = [k for k, p in z.items() if p > 0]
                if len(support) != 1:
                    raise ValueError(f"stochastic encoder at {pair}: support {support}")
                z = support[0]
        else:
            z = encoder(*pair)
            if encoder(*pair) != z:
                raise ValueError(f"stochastic encoder at {pair}")
        codes[pair] = z
    labels = {z: i for i, z in enumerate(sorted(set(codes.values()), key=repr))}
    return np.array([labels[codes[p]] for p in pairs])


def verify_bound(table: JointTable, encoder, tol: float = 1e-9) -> BoundReport:
    """Exact terms of I(Z;A) >= H(Z) - I(Z;V,V'|S,S') - H(S,S'|A) for a deterministic Z = E(O,O')."""
    _check_table(table)
    t = table.with_column("Z", _encode_table(table, encoder))
    report = BoundReport(
        i_za=discrete_mi_exact(t, ["Z"], ["A"]),
        h_z=entropy_exact(t, ["Z"]),
        i_zv_given_ss=discrete_mi_exact(t, ["Z"], ["V", "V2"], ["S", "S2"]),
        h_ss_given_a=entropy_exact(t, ["S", "S2"], ["A"]),
    )
    if report.slack < -tol:
        raise BoundViolation(f"bound violated: slack {report.slack!r}")
    return report
