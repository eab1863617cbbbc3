"""Action-centricity probing.

Per-step actions are stored z-scored with dataset statistics.  Before probing
they are collapsed into one horizon-consistent "net relative action": undo the
normalization, sum the six continuous dims over the horizon, keep the final
gripper command, and re-normalize with statistics scaled for the horizon
(mean * H and std * sqrt(H) on the summed dims).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

N_CONT = 6  # summed control dims; the seventh (gripper) takes the last step


@dataclass(frozen=True)
class ActionStats:
    mu: np.ndarray  # (7,)
    sigma: np.ndarray  # (7,)

    @classmethod
    def fit(cls, actions: np.ndarray) -> "ActionStats":
        """Per-dimension mean/std over every step of an (..., 7) action array."""
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def constant(self) -> np.ndarray:
        return self.sigma <= 0.0

    def horizon(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        mu_hat, sigma_hat = self.mu.copy(), self.sigma.copy()
        mu_hat[:N_CONT] *= h
        sigma_hat[:N_CONT] *= math.sqrt(h)
        return mu_hat, sigma_hat

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        out = np.zeros_like(raw, dtype=np.float64)
        live = ~self.constant
        out[..., live] = (raw[..., live] - self.mu[live]) / self.sigma[live]
        return out

    def denormalize(self, a_norm: np.ndarray) -> np.ndarray:
        return a_norm * self.sigma + self.mu


def net_relative_action(a_norm, stats: ActionStats, eps: float = 1e-8) -> np.ndarray:
    """Collapse (..., H, 7) normalized steps into (..., 7) net actions.

    Computed as ``sum_t(a_norm * sigma) / (sqrt(H) sigma + eps)``, which is
    the de-normalize / sum / re-normalize chain with the means cancelled
    analytically; with H = 1 and eps = 0 it is exactly the identity.
    Constant dimensions (sigma = 0) map to zero.
    """
    a_norm = np.asarray(a_norm, dtype=np.float64)
    if a_norm.ndim < 2:
        raise ValueError("expected (..., H, 7) actions")
    h = a_norm.shape[-2]
    if h == 0:
        raise ValueError("horizon H must be >= 1")
    _, sigma_hat = stats.horizon(h)
    live = ~stats.constant
    gain = np.zeros_like(stats.sigma)
    gain[live] = stats.sigma[live] / (sigma_hat[live] + eps)
    out = np.empty(a_norm.shape[:-2] + a_norm.shape[-1:])
    out[..., :N_CONT] = a_norm[..., :, :N_CONT].sum(axis=-2) * gain[:N_CONT]
    out[..., N_CONT:] = a_norm[..., -1, N_CONT:] * gain[N_CONT:]
    return out


def net_actions_from_raw(actions_raw: np.ndarray, stats: ActionStats | None = None,
                         eps: float = 1e-8) -> tuple[np.ndarray, ActionStats]:
    """(N, H, 7) raw steps -> (N, 7) net-normalized targets, fitting stats if absent."""
    stats = ActionStats.fit(actions_raw) if stats is None else stats
    return net_relative_action(stats.normalize(actions_raw), stats, eps), stats


# -- PCA -------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (keep, d), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def transform(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.mean) @ self.components.T

    def inverse(self, y) -> np.ndarray:
        return np.asarray(y) @ self.components + self.mean


def default_pca_dim(d_z: int) -> int:
    return min(d_z, 32)


def pca_reduce(z, keep: int) -> tuple[np.ndarray, PcaBasis]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, d = z.shape
    if keep < 1 or keep > min(n, d):
        raise ValueError(f"keep={keep} must lie in [1, {min(n, d)}]")
    mean = z.mean(axis=0)
    xc = z - mean
    cov = xc.T @ xc / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    comps = vecs[:, :keep].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    total = vals.sum()
    ratio = vals[:keep] / total if total > 0 else np.zeros(keep)
    basis = PcaBasis(mean, comps, vals[:keep], ratio)
    return basis.transform(z), basis


# -- linear probe ----------------------------------------------------------------


@dataclass
class LinearProbe:
    W: np.ndarray  # (d_in, d_out)
    b: np.ndarray  # (d_out,)

    def predict(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.W.shape[0]:
            raise ValueError(f"probe expects {self.W.shape[0]} inputs, got {z.shape[1]}")
        return z @ self.W + self.b


@dataclass(frozen=True)
class ProbeSchedule:
    """Minibatch Adam with cosine decay; defaults follow the linear-probing table."""

    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0


def _check_rows(z, a):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    if len(z) != len(a):
        raise ValueError(f"z has {len(z)} rows, a has {len(a)}")
    return z, a


def train_probe(z, a, method: str = "closed_form", schedule: ProbeSchedule = ProbeSchedule(),
                jitter: float = 1e-8) -> LinearProbe:
    """Least-squares readout ``a ~ z W + b``.

    ``closed_form`` solves the normal equations with ``jitter`` on the
    diagonal; ``sgd`` runs the minibatch schedule from zero initialization.
    """
    z, a = _check_rows(z, a)
    if method == "closed_form":
        x = np.hstack([z, np.ones((len(z), 1))])
        gram = x.T @ x + jitter * np.eye(x.shape[1])
        try:
            coef = np.linalg.solve(gram, x.T @ a)
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError("rank-deficient probe design; increase jitter") from err
        return LinearProbe(coef[:-1], coef[-1])
    if method == "sgd":
        return _train_probe_sgd(z, a, schedule)
    raise ValueError(f"unknown probe method {method!r}")


def _train_probe_sgd(z, a, schedule: ProbeSchedule) -> LinearProbe:
    n, d = z.shape
    params = dc.ParamSet({"W": np.zeros((d, a.shape[1])), "b": np.zeros(a.shape[1])})
    state = dc.AdamState()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([schedule.seed, 43])))
    per_epoch = max(1, math.ceil(n / schedule.batch_size))
    total = schedule.epochs * per_epoch
    step = 0
    for _ in range(schedule.epochs):
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            rows = order[start:start + schedule.batch_size]
            resid = z[rows] @ params["W"] + params["b"] - a[rows]
            # gradient of mean_i ||resid_i||^2
            params.grads["W"][:] = 2.0 * z[rows].T @ resid / len(rows)
            params.grads["b"][:] = 2.0 * resid.sum(axis=0) / len(rows)
            lr = 0.5 * schedule.lr * (1.0 + math.cos(math.pi * step / total))
            dc.optimizer_step(params, state, lr)
            step += 1
    return LinearProbe(params["W"].copy(), params["b"].copy())


@dataclass(frozen=True)
class NmseReport:
    total: float
    per_dim: np.ndarray  # nan where the target is constant


def nmse_report(probe: LinearProbe, z, a) -> NmseReport:
    z, a = _check_rows(z, a)
    var = a.var(axis=0)
    if var.sum() <= 0:
        raise ValueError("targets have zero variance")
    err = (a - probe.predict(z)) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        per_dim = np.where(var > 0, err.mean(axis=0) / np.where(var > 0, var, 1.0), np.nan)
    return NmseReport(float(err.sum(axis=1).mean() / var.sum()), per_dim)


def nmse(probe: LinearProbe, z, a) -> float:
    """E||a - a_hat||^2 over the summed per-dimension variance of ``a``."""
    return nmse_report(probe, z, a).total
