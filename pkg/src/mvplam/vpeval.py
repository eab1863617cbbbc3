"""Viewpoint-perturbation evaluation.

Perturbed transitions keep the original ``o_t`` and re-render ``o_next`` from
the true next state through a jittered camera.  Because the world renders
exactly, the perturbed frame differs from the original only through the
camera, which is the nuisance this evaluation is meant to isolate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lam, mi, probe
from .worldgen import (
    CameraPose,
    Dataset,
    TransitionRecord,
    _canonical_pose,
    _f32,
    perturb_pose,
    render_view,
)

DEFAULT_SIGMA_THETA = 0.075
DEFAULT_SIGMA_P = 0.03
N_PERTURB = 5
STRESS_GRID = (0.0, 0.075, 0.15, 0.3)


def _pose_rng(seed: int, record: int, view: int, rep: int) -> np.random.Generator:
    # one stream per (record, view, replica): the same standard normals are
    # reused at every noise scale, giving common random numbers across sigmas
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 97, record, view, rep])))


def perturbed_transition(
    record: TransitionRecord,
    sigma_theta: float = DEFAULT_SIGMA_THETA,
    sigma_p: float = DEFAULT_SIGMA_P,
    seed: int = 0,
    rep: int = 0,
    record_id: int = 0,
    perturb_both: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(o_t, o_next_tilde)``, each (views, d_obs).

    With ``perturb_both`` the first frame is re-rendered too, using an
    independent draw.
    """
    if record.poses_next is None or record.s_next is None or record.poses is None:
        raise ValueError("record carries no camera poses; load the dataset with hidden labels")
    d_obs = record.o_t.shape[-1]
    o_t = record.o_t.copy()
    o_tilde = record.o_next.copy()
    for i, v in enumerate(record.view_ids):
        rng = _pose_rng(seed, record_id, v, rep)
        pose = perturb_pose(record.poses_next[i], sigma_theta, sigma_p, rng)
        if pose is not record.poses_next[i]:
            o_tilde[i] = _f32(render_view(record.s_next, _canonical_pose(pose), d_obs))
        if perturb_both:
            first = perturb_pose(record.poses[i], sigma_theta, sigma_p, rng)
            if first is not record.poses[i]:
                o_t[i] = _f32(render_view(record.s_t, _canonical_pose(first), d_obs))
    return o_t, o_tilde


def _sq(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1)


def mse_pair(
    model: lam.LamModel,
    record: TransitionRecord,
    perturbed: tuple[np.ndarray, np.ndarray],
    latent_override: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-view ``(MSE, MSE_tilde)``.

    Both decode from the original ``o_t`` and score against the original
    ``o_next``; only the latent differs.  ``latent_override`` replaces the
    perturbed latent (used to check that equal latents give equal errors).
    """
    o_t, o_tilde = perturbed
    if o_tilde.shape != record.o_next.shape or o_t.shape != record.o_t.shape:
        raise ValueError(f"perturbed shapes {o_t.shape}/{o_tilde.shape} != record {record.o_next.shape}")
    z = lam.latent_of(model, record.o_t, record.o_next).embedding
    z_tilde = latent_override if latent_override is not None else lam.latent_of(model, o_t, o_tilde).embedding
    mse = _sq(record.o_next - lam.decode(model, record.o_t, z))
    mse_tilde = _sq(record.o_next - lam.decode(model, record.o_t, z_tilde))
    return mse, mse_tilde


# -- action-centricity metrics --------------------------------------------------


@dataclass
class Centricity:
    ksg_bits: float
    probe_nmse: float
    ksg_raw: float = 0.0
    nmse_per_dim: np.ndarray | None = None


@dataclass
class FittedProbe:
    """PCA basis plus linear readout, fit once on original-view latents."""

    basis: probe.PcaBasis
    readout: probe.LinearProbe

    def nmse(self, z, a) -> probe.NmseReport:
        return probe.nmse_report(self.readout, self.basis.transform(z), a)


def fit_probe(z, a, keep: int | None = None) -> FittedProbe:
    z = np.asarray(z, dtype=np.float64)
    keep = probe.default_pca_dim(z.shape[1]) if keep is None else keep
    keep = min(keep, len(z), z.shape[1])
    zp, basis = probe.pca_reduce(z, keep)
    return FittedProbe(basis, probe.train_probe(zp, a))


def ksg_bits(z, a, k: int = 5, seed: int = 0) -> mi.MIEstimate:
    zz, aa, desc = mi.prepare_pairs(z, a, seed=seed)
    if zz.shape[1] == 0:
        # a constant latent carries no information
        return mi.MIEstimate("ksg", 0.0, seed, desc, raw=0.0)
    return mi.ksg_estimate(mi.PairedSamples(zz, aa), k=k, seed=seed, preprocessing=desc)


def centricity(fitted: FittedProbe, z, a, k: int = 5, seed: int = 0) -> Centricity:
    est = ksg_bits(z, a, k, seed)
    rep = fitted.nmse(z, a)
    return Centricity(est.value, rep.total, est.raw, rep.per_dim)


# -- evaluation set -------------------------------------------------------------


def split_records(dataset: Dataset, train_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Split records by trajectory so no trajectory feeds both probe fit and test."""
    traj = dataset.require_hidden()["trajectory"].astype(np.int64)
    ids = np.unique(traj)
    cut = ids[: max(1, int(round(train_fraction * len(ids))))]
    train = np.isin(traj, cut)
    return np.flatnonzero(train), np.flatnonzero(~train)


def net_targets(latents: lam.LatentSet, stats: probe.ActionStats) -> np.ndarray:
    return probe.net_relative_action(stats.normalize(latents.actions_raw), stats)


@dataclass
class PerturbationReport:
    sigma_theta: float
    sigma_p: float
    original: Centricity
    perturbed: Centricity
    mse: np.ndarray  # (records, views, replicas)
    mse_tilde: np.ndarray
    replicas: list[Centricity] = field(default_factory=list)

    @property
    def mse_mean(self) -> float:
        return float(self.mse.mean())

    @property
    def mse_tilde_mean(self) -> float:
        return float(self.mse_tilde.mean())


def _perturbed_obs(dataset, records, sigma_theta, sigma_p, n_perturb, seed, perturb_both):
    v, d = dataset.num_views, dataset.manifest.d_obs
    o_t = np.empty((len(records), n_perturb, v, d))
    o_tilde = np.empty_like(o_t)
    for j, r in enumerate(records):
        rec = dataset.record(int(r))
        for rep in range(n_perturb):
            o_t[j, rep], o_tilde[j, rep] = perturbed_transition(
                rec, sigma_theta, sigma_p, seed, rep, int(r), perturb_both)
    return o_t, o_tilde


def perturbed_action_centricity(
    model: lam.LamModel,
    dataset: Dataset,
    sigma_theta: float = DEFAULT_SIGMA_THETA,
    sigma_p: float = DEFAULT_SIGMA_P,
    n_perturb: int = N_PERTURB,
    seed: int = 0,
    k: int = 5,
    fitted: FittedProbe | None = None,
    perturb_both: bool = False,
) -> PerturbationReport:
    """Compare action-centricity of original and perturbed latents.

    The probe is fit on original-view latents of the training trajectories
    and applied unchanged.  Metrics are computed on the held-out trajectories,
    once for the original latents and once per perturbation replica (each
    replica has exactly the original's row structure); replica metrics are
    averaged.
    """
    train_rec, test_rec = split_records(dataset)
    h = dataset.require_hidden()
    stats = probe.ActionStats.fit(h["actions_raw"])
    if fitted is None:
        lat_train = lam.infer_latents(model, dataset, record_index=train_rec)
        fitted = fit_probe(lat_train.embedding, net_targets(lat_train, stats))

    lat = lam.infer_latents(model, dataset, record_index=test_rec)
    a = net_targets(lat, stats)
    original = centricity(fitted, lat.embedding, a, k, seed)

    o_t, o_tilde = _perturbed_obs(dataset, test_rec, sigma_theta, sigma_p, n_perturb, seed, perturb_both)
    v, d = dataset.num_views, dataset.manifest.d_obs
    obs = dataset.obs[test_rec]
    o_t0, o_next = obs[:, :, 0], obs[:, :, 1]
    pred = lam.decode(model, o_t0.reshape(-1, d), lat.embedding).reshape(len(test_rec), v, d)
    mse = np.repeat(_sq(o_next - pred)[:, :, None], n_perturb, axis=2)
    mse_tilde = np.empty_like(mse)
    replicas = []
    for rep in range(n_perturb):
        code = lam.latent_of(model, o_t[:, rep].reshape(-1, d), o_tilde[:, rep].reshape(-1, d))
        pred_t = lam.decode(model, o_t0.reshape(-1, d), code.embedding).reshape(len(test_rec), v, d)
        mse_tilde[:, :, rep] = _sq(o_next - pred_t)
        replicas.append(centricity(fitted, code.embedding, a, k, seed))
    perturbed = Centricity(
        float(np.mean([c.ksg_bits for c in replicas])),
        float(np.mean([c.probe_nmse for c in replicas])),
        float(np.mean([c.ksg_raw for c in replicas])),
        np.mean([c.nmse_per_dim for c in replicas], axis=0),
    )
    return PerturbationReport(sigma_theta, sigma_p, original, perturbed, mse, mse_tilde, replicas)


def stress_curve(model: lam.LamModel, dataset: Dataset, grid=STRESS_GRID, sigma_p: float = 0.0,
                 n_perturb: int = N_PERTURB, seed: int = 0) -> list[tuple[float, float]]:
    """Median MSE_tilde per rotation scale, common random numbers across the grid."""
    _, test_rec = split_records(dataset)
    out = []
    d = dataset.manifest.d_obs
    obs = dataset.obs[test_rec]
    for s in grid:
        o_t, o_tilde = _perturbed_obs(dataset, test_rec, s, sigma_p, n_perturb, seed, False)
        errs = []
        for rep in range(n_perturb):
            code = lam.latent_of(model, o_t[:, rep].reshape(-1, d), o_tilde[:, rep].reshape(-1, d))
            pred = lam.decode(model, obs[:, :, 0].reshape(-1, d), code.embedding)
            errs.append(_sq(obs[:, :, 1].reshape(-1, d) - pred))
        out.append((float(s), float(np.median(np.concatenate(errs)))))
    return out
