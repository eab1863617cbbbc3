"""Command-line orchestration.

Every subcommand resolves its settings from built-in defaults, then an
optional ``--config`` file, then explicit flags, and writes the resolved
settings as a ``key: value`` file next to its outputs.  Feeding that file
back through ``--config`` reproduces the run.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import lam, mi, probe, vpeval
from .worldgen import (
    DatasetConfig,
    WorldParams,
    generate_dataset,
    load_dataset,
    load_observations,
    write_dataset,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- config files -----------------------------------------------------------------


def read_config(path: str) -> dict[str, str]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    out = {}
    for n, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key: value'")
        out[key.strip()] = value.strip()
    return out


def write_config(path: str, values: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}: {_fmt(v)}\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> list[int]:
    if isinstance(s, (list, tuple)):
        return [int(x) for x in s]
    return [int(x) for x in str(s).split(",") if x.strip()]


def _mixture(s) -> tuple[float, float]:
    if isinstance(s, (list, tuple)):
        return float(s[0]), float(s[1])
    # written back to config files as "e,p"
    parts = str(s).replace(",", ":").split(":")
    if len(parts) != 2:
        raise ValueError(f"expected expert:play, got {s!r}")
    return float(parts[0]), float(parts[1])


def _strs(s) -> list[str]:
    if isinstance(s, (list, tuple)):
        return list(s)
    return [x.strip() for x in str(s).split(",") if x.strip()]


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable
    default: object = None
    help: str = ""
    required: bool = False
    aliases: tuple[str, ...] = ()


WORLD_OPTS = [
    Opt("views", int, 2, "cameras per trajectory"),
    Opt("trajectories", int, 100),
    Opt("length", int, 20, "frames per trajectory", aliases=("--len",)),
    Opt("stride", int, 1, "action horizon H between paired frames"),
    Opt("expert_fraction", float, 0.5, "share of scripted-expert trajectories"),
    Opt("d_obs", int, 64),
    Opt("camera_jitter", float, DatasetConfig.camera_jitter),
    Opt("shake_theta", float, DatasetConfig.shake_theta),
    Opt("shake_p", float, DatasetConfig.shake_p),
    Opt("distractor_noise", float, WorldParams.distractor_noise),
]

MODEL_OPTS = [
    Opt("mode", str, "mvp", "single_view | multi_view_self_only | mvp"),
    Opt("n_tokens", int, 4),
    Opt("codebook_size", int, 16),
    Opt("d_code", int, 16),
    Opt("hidden", int, 128),
    Opt("depth", int, 2),
    Opt("steps", int, lam.TrainConfig.steps),
    Opt("lr", float, 1e-3),
    Opt("batch_size", int, 32),
    Opt("weight_decay", float, 1e-2),
    Opt("grad_clip", float, 1.0),
    Opt("beta", float, 0.25),
    Opt("view", int, 0, "camera used by single_view mode"),
]

SUBCOMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("out", str, required=True, help="output directory"),
        Opt("name", str, "world"),
        Opt("seed", int, 0),
        *WORLD_OPTS,
        Opt("mixture", _mixture, None, "expert:play fractions; overrides expert_fraction"),
    ],
    "train-lam": [
        Opt("data", str, required=True, help="dataset directory"),
        Opt("name", str, "world"),
        Opt("out", str, required=True, help="output directory"),
        Opt("seed", int, 0),
        *MODEL_OPTS,
    ],
    "eval-mi": [
        Opt("model", str, required=True, help="checkpoint path (without suffix)"),
        Opt("data", str, required=True),
        Opt("name", str, "world"),
        Opt("out", str, required=True, help="CSV path"),
        Opt("estimators", _strs, ["ksg", "mine", "ba"]),
        Opt("seeds", _ints, [0]),
        Opt("k", int, 5),
        Opt("permute", _bool, True, "also run permutation controls"),
        Opt("mine_steps", int, mi.NeuralSchedule.steps),
    ],
    "probe": [
        Opt("model", str, required=True),
        Opt("data", str, required=True),
        Opt("name", str, "world"),
        Opt("out", str, required=True),
        Opt("seed", int, 0),
        Opt("keep", int, 0, "PCA components, 0 for min(d_z, 32)"),
    ],
    "vp-eval": [
        Opt("model", str, required=True),
        Opt("data", str, required=True),
        Opt("name", str, "world"),
        Opt("out", str, required=True),
        Opt("seed", int, 0),
        Opt("sigma_theta", float, vpeval.DEFAULT_SIGMA_THETA),
        Opt("sigma_p", float, vpeval.DEFAULT_SIGMA_P),
        Opt("n_perturb", int, vpeval.N_PERTURB),
        Opt("k", int, 5),
        Opt("perturb_both", _bool, False),
    ],
    "ablate": [
        Opt("out", str, required=True),
        Opt("seeds", _ints, [0, 1, 2, 3]),
        Opt("data_seed", int, 1),
        Opt("eval_seed", int, 999),
        Opt("eval_trajectories", int, 100),
        Opt("workers", int, 1),
        Opt("k", int, 5),
        Opt("trajectories", int, 200, "training trajectories per data mixture"),
        *[o for o in WORLD_OPTS if o.name not in ("expert_fraction", "trajectories")],
        *[o for o in MODEL_OPTS if o.name not in ("mode", "view")],
    ],
    "report": [
        Opt("inputs", _strs, required=True, help="comma-separated CSV files"),
        Opt("out", str, required=True, help="Markdown path"),
        Opt("group", str, "config"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvplam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in SUBCOMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key: value file with defaults for this subcommand")
        for o in opts:
            p.add_argument("--" + o.name.replace("_", "-"), *o.aliases, dest=o.name, default=None, help=o.help)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    opts = {o.name: o for o in SUBCOMMANDS[command]}
    raw: dict[str, object] = {k: o.default for k, o in opts.items()}
    if args.config:
        from_file = read_config(args.config)
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        raw.update({k: (None if v == "" else v) for k, v in from_file.items()})
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    out = {}
    for k, o in opts.items():
        if raw[k] is None:
            if o.required:
                raise ConfigError(f"--{k.replace('_', '-')} is required")
            out[k] = None
            continue
        try:
            out[k] = o.kind(raw[k]) if isinstance(raw[k], str) else raw[k]
        except ValueError as err:
            raise ConfigError(f"bad value for {k}: {raw[k]!r} ({err})") from err
    return out


# -- shared pipeline pieces -------------------------------------------------------


def dataset_config(cfg: dict, seed: int, expert_fraction: float, trajectories: int | None = None,
                   mixture: tuple[float, float] | None = None) -> DatasetConfig:
    return DatasetConfig(
        num_views=cfg["views"],
        trajectories=cfg["trajectories"] if trajectories is None else trajectories,
        length=cfg["length"],
        stride=cfg["stride"],
        mixture=(expert_fraction, 1.0 - expert_fraction) if mixture is None else mixture,
        seed=seed,
        d_obs=cfg["d_obs"],
        camera_jitter=cfg["camera_jitter"],
        shake_theta=cfg["shake_theta"],
        shake_p=cfg["shake_p"],
        world=WorldParams(distractor_noise=cfg["distractor_noise"], d_obs=cfg["d_obs"]),
    )


def model_configs(cfg: dict, seed: int, mode: str, d_obs: int) -> tuple[lam.LamConfig, lam.TrainConfig]:
    mc = lam.LamConfig(
        d_obs=d_obs, n_tokens=cfg["n_tokens"], codebook_size=cfg["codebook_size"], d_code=cfg["d_code"],
        hidden=cfg["hidden"], depth=cfg["depth"], beta=cfg["beta"], seed=seed,
    )
    tc = lam.TrainConfig(
        mode=mode, lr=cfg["lr"], weight_decay=cfg["weight_decay"], grad_clip=cfg["grad_clip"],
        beta=cfg["beta"], batch_size=cfg["batch_size"], steps=cfg["steps"], seed=seed,
        view=cfg.get("view", 0),
    )
    return mc, tc


def train_model(dataset, mc: lam.LamConfig, tc: lam.TrainConfig) -> lam.TrainResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return lam.train(lam.init_model(mc), dataset, tc)


def evaluate_centricity(model: lam.LamModel, eval_ds, k: int = 5, seed: int = 0, keep: int | None = None):
    """Probe NMSE and KSG bits on held-out trajectories of ``eval_ds``."""
    train_rec, test_rec = vpeval.split_records(eval_ds)
    stats = probe.ActionStats.fit(eval_ds.require_hidden()["actions_raw"])
    lat_train = lam.infer_latents(model, eval_ds, record_index=train_rec)
    fitted = vpeval.fit_probe(lat_train.embedding, vpeval.net_targets(lat_train, stats), keep)
    lat = lam.infer_latents(model, eval_ds, record_index=test_rec)
    return vpeval.centricity(fitted, lat.embedding, vpeval.net_targets(lat, stats), k, seed), lat


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _load_obs(cfg):
    try:
        return load_observations(cfg["data"], cfg["name"])
    except (OSError, ValueError) as err:
        raise DataError(f"cannot load dataset {cfg['data']}/{cfg['name']}: {err}") from err


def _load_full(cfg):
    try:
        return load_dataset(cfg["data"], cfg["name"])
    except (OSError, ValueError) as err:
        raise DataError(f"cannot load dataset {cfg['data']}/{cfg['name']}: {err}") from err


def _load_model(path: str) -> lam.LamModel:
    try:
        return lam.load_model(path)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot load checkpoint {path}: {err}") from err


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> None:
    dcfg = dataset_config(cfg, cfg["seed"], cfg["expert_fraction"], mixture=cfg["mixture"])
    try:
        dcfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    write_dataset(generate_dataset(dcfg), cfg["out"], cfg["name"])
    write_config(os.path.join(cfg["out"], f"{cfg['name']}.gen-data.config"), cfg)


def cmd_train_lam(cfg: dict) -> None:
    ds = _load_obs(cfg)
    try:
        mc, tc = model_configs(cfg, cfg["seed"], cfg["mode"], ds.manifest.d_obs)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    try:
        lam.check_compatible(ds, tc)
    except lam.IncompatibleDataError as err:
        raise DataError(str(err)) from err
    result = train_model(ds, mc, tc)
    lam.save_model(result.model, os.path.join(cfg["out"], "lam"))
    lam.write_history(result.history, os.path.join(cfg["out"], "lam_loss.csv"))
    write_config(os.path.join(cfg["out"], "train-lam.config"), cfg)


MI_HEADER = ("estimator", "seed", "split", "bits", "preprocessing", "permuted")


def cmd_eval_mi(cfg: dict) -> None:
    model, ds = _load_model(cfg["model"]), _load_full(cfg)
    known = {"ksg", "mine", "ba"}
    if not set(cfg["estimators"]) <= known:
        raise ConfigError(f"estimators must be drawn from {sorted(known)}")
    lat = lam.infer_latents(model, ds)
    stats = probe.ActionStats.fit(ds.require_hidden()["actions_raw"])
    a = vpeval.net_targets(lat, stats)
    rows = []
    for seed in cfg["seeds"]:
        z, aa, desc = mi.prepare_pairs(lat.embedding, a, seed=seed)
        samples = mi.PairedSamples(z, aa).with_splits(seed=seed)
        sched = mi.NeuralSchedule(steps=cfg["mine_steps"])
        runners = {
            "ksg": lambda s: mi.ksg_estimate(s, k=cfg["k"], seed=seed, preprocessing=desc),
            "mine": lambda s: mi.mine_estimate(s, sched, seed=seed),
            "ba": lambda s: mi.ba_estimate(s, sched, seed=seed),
        }
        for name in cfg["estimators"]:
            est = runners[name](samples)
            rows.append((name, seed, est.split, est.value, desc, False))
            if cfg["permute"]:
                ctl = mi.permutation_control(samples, runners[name], seed)
                rows.append((name, seed, ctl.split, ctl.value, desc, True))
    _write_csv(cfg["out"], MI_HEADER, rows)
    md = ["| estimator | bits (mean ± std) | permuted control |", "|---|---|---|"]
    for name in cfg["estimators"]:
        real = [r[3] for r in rows if r[0] == name and not r[5]]
        ctl = [r[3] for r in rows if r[0] == name and r[5]]
        md.append(f"| {name} | {mean_std(real)} | {mean_std(ctl) if ctl else '-'} |")
    with open(os.path.splitext(cfg["out"])[0] + ".md", "w") as fh:
        fh.write("\n".join(md) + "\n")
    write_config(cfg["out"] + ".config", cfg)


PROBE_HEADER = ("model", "dataset", "seed", "split", "nmse_total") + tuple(f"nmse_dim{i}" for i in range(7))


def cmd_probe(cfg: dict) -> None:
    model, ds = _load_model(cfg["model"]), _load_full(cfg)
    cen, _ = evaluate_centricity(model, ds, seed=cfg["seed"], keep=cfg["keep"] or None)
    row = (cfg["model"], os.path.join(cfg["data"], cfg["name"]), cfg["seed"], "test", cen.probe_nmse, *cen.nmse_per_dim)
    _write_csv(cfg["out"], PROBE_HEADER, [row])
    write_config(cfg["out"] + ".config", cfg)


VP_HEADER = ("model", "sigma_theta", "sigma_p", "mse_mean", "mse_tilde_mean", "ksg_bits", "probe_nmse", "seed")


def cmd_vp_eval(cfg: dict) -> None:
    model, ds = _load_model(cfg["model"]), _load_full(cfg)
    if cfg["sigma_theta"] < 0 or cfg["sigma_p"] < 0 or cfg["n_perturb"] < 1:
        raise ConfigError("noise scales must be >= 0 and n_perturb >= 1")
    rep = vpeval.perturbed_action_centricity(
        model, ds, cfg["sigma_theta"], cfg["sigma_p"], cfg["n_perturb"], cfg["seed"], cfg["k"],
        perturb_both=cfg["perturb_both"],
    )
    rows = [
        (cfg["model"], 0.0, 0.0, rep.mse_mean, rep.mse_mean, rep.original.ksg_bits, rep.original.probe_nmse, cfg["seed"]),
        (cfg["model"], cfg["sigma_theta"], cfg["sigma_p"], rep.mse_mean, rep.mse_tilde_mean,
         rep.perturbed.ksg_bits, rep.perturbed.probe_nmse, cfg["seed"]),
    ]
    _write_csv(cfg["out"], VP_HEADER, rows)
    write_config(cfg["out"] + ".config", cfg)


# the three training configurations of the ablation matrix: (label, expert share, mode)
ABLATION_ROWS = (
    ("expert+cross", 1.0, "mvp"),
    ("mixed+self", 0.5, "multi_view_self_only"),
    ("mixed+cross", 0.5, "mvp"),
)
ABLATION_HEADER = ("config", "data", "mode", "seed", "nmse", "ksg_bits", "entropy_bits")


def _ablation_job(job):
    cfg, label, frac, mode, seed = job
    out = cfg["out"]
    train_ds = load_observations(os.path.join(out, "data"), f"train_{frac:g}")
    eval_ds = load_dataset(os.path.join(out, "data"), "eval")
    mc, tc = model_configs(cfg, seed, mode, train_ds.manifest.d_obs)
    model = train_model(train_ds, mc, tc).model
    lam.save_model(model, os.path.join(out, "models", f"{label}_s{seed}"))
    cen, lat = evaluate_centricity(model, eval_ds, cfg["k"], seed)
    return (label, f"train_{frac:g}", mode, seed, cen.probe_nmse, cen.ksg_bits, lam.latent_entropy(lat))


def run_ablation(cfg: dict) -> list[tuple]:
    """Generate data, train the three configurations per seed, evaluate; returns CSV rows."""
    out = cfg["out"]
    data_dir = os.path.join(out, "data")
    for frac in sorted({r[1] for r in ABLATION_ROWS}):
        write_dataset(generate_dataset(dataset_config(cfg, cfg["data_seed"], frac)), data_dir, f"train_{frac:g}")
    eval_cfg = dataset_config(cfg, cfg["eval_seed"], 0.5, cfg["eval_trajectories"])
    write_dataset(generate_dataset(eval_cfg), data_dir, "eval")
    jobs = [(cfg, label, frac, mode, seed) for label, frac, mode in ABLATION_ROWS for seed in cfg["seeds"]]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    _write_csv(os.path.join(out, "ablation.csv"), ABLATION_HEADER, rows)
    write_config(os.path.join(out, "ablate.config"), cfg)
    return rows


def cmd_ablate(cfg: dict) -> None:
    if not cfg["seeds"]:
        raise ConfigError("at least one seed is required")
    run_ablation(cfg)


def mean_std(values: Sequence[float]) -> str:
    """``mean±std`` with three decimals; std is the sample standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return "-"
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return f"{v.mean():.3f}±{sd:.3f}"


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def build_report(paths: Sequence[str], group: str = "config") -> str:
    """Aggregate CSV rows into a Markdown table; one row per ``group`` value."""
    rows: list[dict[str, str]] = []
    header: list[str] = []
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"missing input {p}; report only aggregates existing results")
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or group not in reader.fieldnames:
                raise DataError(f"{p} has no {group!r} column")
            header = header or list(reader.fieldnames)
            rows.extend(reader)
    if not rows:
        raise DataError("no rows to report")
    skip = {group, "seed"}
    metrics = [c for c in header if c not in skip and all(_is_number(r[c]) for r in rows if r.get(c, "") != "")
               and any(r.get(c, "") != "" for r in rows)]
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r[group], []).append(r)
    lines = ["| " + " | ".join([group, "n"] + metrics) + " |", "|" + "---|" * (len(metrics) + 2)]
    for name, members in groups.items():
        cells = [mean_std([float(m[c]) for m in members if m.get(c, "") != ""]) for c in metrics]
        lines.append("| " + " | ".join([name, str(len(members))] + cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: dict) -> None:
    text = build_report(cfg["inputs"], cfg["group"])
    os.makedirs(os.path.dirname(os.path.abspath(cfg["out"])), exist_ok=True)
    with open(cfg["out"], "w") as fh:
        fh.write(text)
    write_config(cfg["out"] + ".config", cfg)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-lam": cmd_train_lam,
    "eval-mi": cmd_eval_mi,
    "probe": cmd_probe,
    "vp-eval": cmd_vp_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
