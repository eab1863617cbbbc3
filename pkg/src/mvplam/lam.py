"""Latent action model: MLP encoder, product vector quantizer, MLP decoder.

Three training regimes share one model:

``single_view``
    plain VQ-VAE objective on one declared camera.
``multi_view_self_only``
    every camera reconstructs its own future; no latent swapping.
``mvp``
    self reconstruction plus cross-viewpoint reconstruction, where the
    latent inferred from one camera must explain another camera's future.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .worldgen import Dataset

MODES = ("single_view", "multi_view_self_only", "mvp")


class IncompatibleDataError(ValueError):
    """Dataset layout cannot be used with the requested training mode."""


# -- types ------------------------------------------------------------------


@dataclass(frozen=True)
class LamConfig:
    d_obs: int = 64
    n_tokens: int = 4  # L
    codebook_size: int = 16  # K
    d_code: int = 16
    hidden: int = 128
    depth: int = 2
    activation: str = "tanh"
    beta: float = 0.25
    seed: int = 0

    @property
    def d_latent(self) -> int:
        return self.n_tokens * self.d_code


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (L, K, d)

    def __post_init__(self):
        if self.entries.ndim != 3 or self.entries.shape[1] == 0:
            raise ValueError("codebook must be a non-empty (L, K, d) array")
        if self.entries.shape[1] < 2:
            raise ValueError("each sub-book needs at least two entries")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook contains non-finite entries")

    @property
    def n_tokens(self) -> int:
        return self.entries.shape[0]

    @property
    def size(self) -> int:
        return self.entries.shape[1]

    @property
    def d_code(self) -> int:
        return self.entries.shape[2]

    def gather(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        rows = self.entries[np.arange(self.n_tokens), indices]
        return rows.reshape(*indices.shape[:-1], self.n_tokens * self.d_code)


@dataclass(frozen=True)
class LatentCode:
    """Selected indices (..., L) and their concatenated embeddings (..., L*d)."""

    indices: np.ndarray
    embedding: np.ndarray


@dataclass
class LamModel:
    config: LamConfig
    params: dc.ParamSet

    @property
    def enc_spec(self) -> dc.MlpSpec:
        c = self.config
        return dc.MlpSpec((2 * c.d_obs,) + (c.hidden,) * c.depth + (c.d_latent,), c.activation, c.seed)

    @property
    def dec_spec(self) -> dc.MlpSpec:
        c = self.config
        return dc.MlpSpec((c.d_obs + c.d_latent,) + (c.hidden,) * c.depth + (c.d_obs,), c.activation, c.seed + 1)

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.params["codebook"])

    def copy(self) -> "LamModel":
        return LamModel(self.config, self.params.copy())


def init_model(config: LamConfig) -> LamModel:
    params = dc.ParamSet()
    model = LamModel(config, params)
    dc.init_mlp(model.enc_spec, params, "enc.")
    dc.init_mlp(model.dec_spec, params, "dec.")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 3])))
    params.add("codebook", rng.normal(0.0, 0.3, size=(config.n_tokens, config.codebook_size, config.d_code)))
    return model


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mvp"
    lr: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    beta: float = 0.25
    batch_size: int = 32
    steps: int = 6000
    seed: int = 0
    view: int = 0  # camera used by single_view mode
    guard_warmup: int = 500
    guard_every: int = 500
    codebook_init: str = "data"  # "data": seed entries from encoder outputs; "random": keep init
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.codebook_init not in ("data", "random"):
            raise ValueError(f"codebook_init must be 'data' or 'random', got {self.codebook_init!r}")


# -- tape-level building blocks ---------------------------------------------


def _encode_t(model: LamModel, tape: dc.Tape, o_t: np.ndarray, o_next: np.ndarray) -> dc.Tensor:
    x = tape.const(np.concatenate([o_t, o_next], axis=-1))
    return dc.mlp(model.enc_spec, model.params, x, "enc.")


def _decode_t(model: LamModel, tape: dc.Tape, o_t, z: dc.Tensor) -> dc.Tensor:
    o = o_t if isinstance(o_t, dc.Tensor) else tape.const(o_t)
    # residual form: the network predicts the change in features
    return dc.add(o, dc.mlp(model.dec_spec, model.params, dc.concat([o, z], axis=1), "dec."))


def nearest_codes(entries: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Per-sub-book Euclidean nearest neighbour; ``e`` is (N, L*d), returns (N, L)."""
    n_tok, k, d = entries.shape
    er = e.reshape(len(e), n_tok, d)
    # ||e||^2 - 2 e.c + ||c||^2, with ties resolved to the lowest index by argmin
    dist = (
        np.einsum("nld,nld->nl", er, er)[:, :, None]
        - 2.0 * np.einsum("nld,lkd->nlk", er, entries)
        + np.einsum("lkd,lkd->lk", entries, entries)[None]
    )
    return np.argmin(dist, axis=2)


def _quantize_t(model: LamModel, tape: dc.Tape, e: dc.Tensor, beta: float, n_groups: float):
    cfg = model.config
    book = tape.param(model.params, "codebook")
    idx = nearest_codes(book.value, e.value)
    flat_idx = idx + np.arange(cfg.n_tokens)[None, :] * cfg.codebook_size
    flat_book = dc.reshape(book, (cfg.n_tokens * cfg.codebook_size, cfg.d_code))
    z = dc.reshape(dc.take(flat_book, flat_idx), (len(idx), cfg.d_latent))
    l_quant = dc.scale(dc.sum(dc.square(dc.sub(dc.stop_gradient(e), z))), 1.0 / n_groups)
    l_commit = dc.scale(dc.sum(dc.square(dc.sub(e, dc.stop_gradient(z)))), beta / n_groups)
    return dc.straight_through(e, z), idx, l_quant, l_commit


def _sqerr(pred: dc.Tensor, target: np.ndarray, n_groups: float) -> dc.Tensor:
    return dc.scale(dc.sum(dc.square(dc.sub(pred, target))), 1.0 / n_groups)


# -- public numpy-level operations ---------------------------------------------


def _check_obs(model: LamModel, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[-1] != model.config.d_obs:
            raise ValueError(f"observation width {a.shape[-1]} != model d_obs {model.config.d_obs}")


def encode(model: LamModel, o_t, o_next) -> np.ndarray:
    o_t, o_next = np.atleast_2d(o_t), np.atleast_2d(o_next)
    _check_obs(model, o_t, o_next)
    return _encode_t(model, dc.Tape(), o_t, o_next).value


def quantize(codebook: Codebook, e, beta: float = 0.25) -> tuple[LatentCode, float, float]:
    """Nearest-code selection plus the quantization and commitment losses.

    Losses are summed over the latent vector and averaged over rows.
    """
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    e2 = np.atleast_2d(e)
    if e2.shape[1] != codebook.n_tokens * codebook.d_code:
        raise ValueError(f"latent width {e2.shape[1]} != {codebook.n_tokens * codebook.d_code}")
    idx = nearest_codes(codebook.entries, e2)
    z = codebook.gather(idx)
    sq = float(np.sum((e2 - z) ** 2)) / len(e2)
    code = LatentCode(idx[0], z[0]) if single else LatentCode(idx, z)
    return code, sq, beta * sq


def decode(model: LamModel, o_t, z) -> np.ndarray:
    z = z.embedding if isinstance(z, LatentCode) else z
    o_t, z = np.atleast_2d(o_t), np.atleast_2d(z)
    _check_obs(model, o_t)
    if z.shape[-1] != model.config.d_latent:
        raise ValueError(f"latent width {z.shape[-1]} != {model.config.d_latent}")
    tape = dc.Tape()
    return _decode_t(model, tape, o_t, tape.const(z)).value


def latent_of(model: LamModel, o_t, o_next) -> LatentCode:
    code, _, _ = quantize(model.codebook, encode(model, o_t, o_next), model.config.beta)
    return code


@dataclass
class LossReport:
    total: float
    components: dict[str, float]


def loss_vqvae(model: LamModel, o_t, o_next, beta: float | None = None, grad: bool = True) -> LossReport:
    """Reconstruction + quantization + commitment on a single-view batch."""
    o_t, o_next = np.atleast_2d(o_t), np.atleast_2d(o_next)
    if o_t.ndim != 2:
        raise ValueError("loss_vqvae expects a single-view (N, d_obs) batch")
    _check_obs(model, o_t, o_next)
    beta = model.config.beta if beta is None else beta
    n = float(len(o_t))
    tape = dc.Tape()
    e = _encode_t(model, tape, o_t, o_next)
    z, _, lq, lc = _quantize_t(model, tape, e, beta, n)
    rec = _sqerr(_decode_t(model, tape, o_t, z), o_next, n)
    total = dc.add(dc.add(rec, lq), lc)
    if grad:
        model.params.zero_grad()
        dc.backward(tape, total)
    comps = {"L_recon_self": float(rec.value), "L_cross": 0.0, "L_quant": float(lq.value), "L_commit": float(lc.value)}
    return LossReport(float(total.value), comps)


def _cross_pairs(n_views: int) -> list[tuple[int, int]]:
    return [(v, w) for v in range(n_views) for w in range(n_views) if v != w]


def loss_mvp(
    model: LamModel,
    o_t,
    o_next,
    cross: bool = True,
    beta: float | None = None,
    grad: bool = True,
) -> LossReport:
    """Self (+ cross) viewpoint objective on (N, V, d_obs) synchronized batches.

    The cross term sums over every ordered pair of distinct cameras.
    """
    o_t, o_next = np.asarray(o_t, dtype=np.float64), np.asarray(o_next, dtype=np.float64)
    if o_t.ndim != 3 or o_t.shape[1] < 2:
        raise IncompatibleDataError("multi-view objective needs (N, V>=2, d_obs) records")
    _check_obs(model, o_t, o_next)
    beta = model.config.beta if beta is None else beta
    n, nv, d = o_t.shape
    flat_t, flat_next = o_t.reshape(n * nv, d), o_next.reshape(n * nv, d)
    tape = dc.Tape()
    e = _encode_t(model, tape, flat_t, flat_next)
    z, _, lq, lc = _quantize_t(model, tape, e, beta, float(n))
    self_loss = _sqerr(_decode_t(model, tape, flat_t, z), flat_next, float(n))
    total = dc.add(dc.add(self_loss, lq), lc)
    cross_val = 0.0
    if cross:
        pairs = _cross_pairs(nv)
        rows = np.arange(n)[:, None] * nv
        dst = (rows + np.array([v for v, _ in pairs])[None]).ravel()
        src = (rows + np.array([w for _, w in pairs])[None]).ravel()
        pred = _decode_t(model, tape, flat_t[dst], dc.take(z, src))
        cross_loss = _sqerr(pred, flat_next[dst], float(n))
        total = dc.add(total, cross_loss)
        cross_val = float(cross_loss.value)
    if grad:
        model.params.zero_grad()
        dc.backward(tape, total)
    comps = {
        "L_recon_self": float(self_loss.value),
        "L_cross": cross_val,
        "L_quant": float(lq.value),
        "L_commit": float(lc.value),
    }
    return LossReport(float(total.value), comps)


# -- training ---------------------------------------------------------------


def check_compatible(dataset: Dataset, config: TrainConfig) -> None:
    nv = dataset.num_views
    if config.mode in ("mvp", "multi_view_self_only") and nv < 2:
        raise IncompatibleDataError(
            f"mode {config.mode!r} requires a dataset with at least 2 views; this one has {nv}"
        )
    if config.mode == "single_view" and not 0 <= config.view < nv:
        raise IncompatibleDataError(f"view {config.view} not present (dataset has {nv} views)")


@dataclass
class TrainResult:
    model: LamModel
    history: list[dict[str, float]] = field(default_factory=list)
    collapse_events: list[dict[str, float]] = field(default_factory=list)


def code_usage(indices: np.ndarray, k: int) -> np.ndarray:
    """(L, K) usage fractions per sub-book."""
    indices = np.asarray(indices)
    return np.stack([np.bincount(indices[:, l], minlength=k) for l in range(indices.shape[1])]) / len(indices)


def train(
    model: LamModel,
    dataset: Dataset,
    config: TrainConfig,
    record_index: Sequence[int] | None = None,
) -> TrainResult:
    """Train in place on ``dataset.obs`` (hidden labels are never touched)."""
    check_compatible(dataset, config)
    if dataset.manifest.d_obs != model.config.d_obs:
        raise ValueError("dataset and model observation widths differ")
    pool = np.arange(len(dataset)) if record_index is None else np.asarray(record_index)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 11])))
    state = dc.AdamState()
    result = TrainResult(model)
    obs = dataset.obs
    if config.steps > 0 and config.codebook_init == "data":
        _data_init(model, obs, pool, config)
    for step in range(config.steps):
        batch = obs[rng.choice(pool, size=config.batch_size, replace=True)]
        if config.mode == "single_view":
            rep = loss_vqvae(model, batch[:, config.view, 0], batch[:, config.view, 1], config.beta)
        else:
            rep = loss_mvp(model, batch[:, :, 0], batch[:, :, 1], cross=config.mode == "mvp", beta=config.beta)
        if not np.isfinite(rep.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        try:
            dc.optimizer_step(model.params, state, config.lr, config.weight_decay, config.grad_clip)
        except FloatingPointError as err:
            raise FloatingPointError(f"{err} at step {step}") from err
        result.history.append({"step": step, **rep.components, "total": rep.total})
        if step + 1 >= config.guard_warmup and (step + 1 - config.guard_warmup) % config.guard_every == 0:
            _collapse_guard(model, dataset, pool, config, step, rng, result)
    if config.checkpoint_dir:
        save_model(model, os.path.join(config.checkpoint_dir, f"lam_{config.mode}_s{config.seed}"))
        write_history(result.history, os.path.join(config.checkpoint_dir, f"lam_{config.mode}_s{config.seed}_loss.csv"))
    return result


def _data_init(model: LamModel, obs: np.ndarray, pool: np.ndarray, config: TrainConfig) -> None:
    # k-means style seeding: each entry starts at the encoder output of a
    # random training transition, so every code is reachable from step one
    c = model.config
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 13])))
    rows = rng.choice(pool, size=c.codebook_size, replace=len(pool) < c.codebook_size)
    views = rng.integers(0, obs.shape[1], size=c.codebook_size)
    if config.mode == "single_view":
        views[:] = config.view
    pairs = obs[rows, views]
    e = encode(model, pairs[:, 0], pairs[:, 1]).reshape(c.codebook_size, c.n_tokens, c.d_code)
    model.params.values["codebook"][:] = e.transpose(1, 0, 2)
    model.params.bump()


def _collapse_guard(model, dataset, pool, config, step, rng, result) -> None:
    take = rng.choice(pool, size=min(1000, len(pool)), replace=False)
    view = config.view if config.mode == "single_view" else 0
    o = dataset.obs[take, view]
    idx = latent_of(model, o[:, 0], o[:, 1]).indices
    top = code_usage(idx, model.config.codebook_size).max(axis=1)
    if np.any(top > 0.95):
        event = {"step": step, **{f"top_share_{l}": float(t) for l, t in enumerate(top)}}
        result.collapse_events.append(event)
        warnings.warn(f"codebook collapse at step {step}: top-code share {top.max():.3f}", RuntimeWarning)


HISTORY_COLUMNS = ("step", "L_recon_self", "L_cross", "L_quant", "L_commit", "total")


def write_history(history: Iterable[dict], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def save_model(model: LamModel, path: str) -> None:
    meta = {k: v for k, v in asdict(model.config).items()}
    dc.save_checkpoint(model.params, path, meta)


def load_model(path: str) -> LamModel:
    params, meta = dc.load_checkpoint(path)
    kinds = {f.name: f.type for f in LamConfig.__dataclass_fields__.values()}
    kwargs = {}
    for k, v in meta.items():
        if k in kinds:
            kwargs[k] = v if kinds[k] in ("str", str) else (float(v) if kinds[k] in ("float", float) else int(v))
    return LamModel(LamConfig(**kwargs), params)


# -- inference and entropy ----------------------------------------------------


@dataclass
class LatentSet:
    """Latents aligned row-by-row with their (evaluation-only) labels."""

    indices: np.ndarray  # (M, L)
    embedding: np.ndarray  # (M, L*d)
    record: np.ndarray  # (M,)
    view: np.ndarray  # (M,)
    actions_raw: np.ndarray | None = None  # (M, H, 7)
    s_t: np.ndarray | None = None
    s_next: np.ndarray | None = None

    def __len__(self):
        return len(self.record)


def infer_latents(
    model: LamModel,
    dataset: Dataset,
    views: int | Sequence[int] | str = "all",
    record_index: Sequence[int] | None = None,
) -> LatentSet:
    """Quantized latents, record-major then view order."""
    if dataset.manifest.d_obs != model.config.d_obs:
        raise ValueError("dataset and model observation widths differ")
    if views == "all":
        views = list(range(dataset.num_views))
    elif isinstance(views, (int, np.integer)):
        views = [int(views)]
    views = list(views)
    if any(not 0 <= v < dataset.num_views for v in views):
        raise ValueError(f"view selector {views} out of range")
    rec = np.arange(len(dataset)) if record_index is None else np.asarray(record_index)
    obs = dataset.obs[rec][:, views]  # (R, V', 2, D)
    flat = obs.reshape(-1, 2, obs.shape[-1])
    code = latent_of(model, flat[:, 0], flat[:, 1])
    rec_col = np.repeat(rec, len(views))
    view_col = np.tile(np.asarray(views), len(rec))
    out = LatentSet(code.indices, code.embedding, rec_col, view_col)
    if dataset.hidden is not None:
        out.actions_raw = dataset.hidden["actions_raw"][rec_col]
        out.s_t = dataset.hidden["s_t"][rec_col]
        out.s_next = dataset.hidden["s_next"][rec_col]
    return out


def latent_entropy(codes) -> float:
    """Plug-in Shannon entropy (bits) of whole L-tuples treated as symbols."""
    if isinstance(codes, LatentSet):
        arr = codes.indices
    elif isinstance(codes, LatentCode):
        arr = np.atleast_2d(codes.indices)
    elif len(codes) and isinstance(codes[0], LatentCode):
        arr = np.stack([c.indices for c in codes])
    else:
        arr = np.asarray(codes)
    if arr.size == 0 or len(arr) == 0:
        raise ValueError("latent_entropy of an empty collection")
    arr = arr.reshape(len(arr), -1)
    _, counts = np.unique(arr, axis=0, return_counts=True)
    p = counts / counts.sum()
    h = float(-np.sum(p * np.log2(p)))
    return 0.0 if h == 0 else h


def with_config(model: LamModel, **changes) -> LamModel:
    return LamModel(replace(model.config, **changes), model.params)
