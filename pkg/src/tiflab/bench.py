"""Config-driven experiment harness and command-line interface.

Subcommands: ``gen-world`` (persist sampled tasks as PGM directories),
``pretrain`` (train and save the frozen base network), ``run`` (train
per-class adapters, evaluate the time-step classifier against the
baselines), ``curves`` (emit error/weight curve CSVs) and ``ablate``
(sweep weight schemes, adapter ranks or injection subsets).  Every command
takes ``--config`` and ``--out`` and writes the exact config it ran with
into the output directory.  ``TIF_THREADS`` caps the worker pool used for
per-class adapter training; results never depend on the pool size because
each class owns a seeded random stream.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baseline as bl
from . import tif as tifmod
from . import worldgen as wg
from .attrloss import loss_curve
from .denoiser import (
    AdapterBank,
    Arch,
    DenoiserParams,
    OptConfig,
    inject_lora,
    load_base,
    pretrain_base,
    sample_images,
    save_base,
    train_adapter,
)
from .schedule import Schedule, make_linear_schedule

SCHEMA_VERSION = 1

# seed-stream tags: every random draw in a run descends from
# (seed, stream tag, indices...) so commands are reproducible and
# parallelism-safe
_S_TASK = 23
_S_ADAPT = 37
_S_EVAL = 53
_S_SAMPLE = 97

RESULT_FIELDS = [
    "task_id", "method", "weight_scheme", "rank", "subset", "K", "N",
    "rho", "test_mode", "seed", "accuracy", "macro_f1", "wall_time_seconds",
]

ABLATION_SCHEMES = ("tif", "uniform", "snr_gamma(1)", "snr_gamma(0.1)")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class WorldConfig:
    shape: tuple[int, int, int] = (1, 16, 16)
    n_classes: int = 8
    n_envs: int = 4
    footprint_ratio: float = 4.0
    render_noise: float = 0.02


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TaskConfig:
    k_way: int = 4
    shots: tuple[int, ...] = (4,)
    rho: float = 1.0
    test_mode: str = "anti"
    test_size: int = 25


@dataclass
class DenoiserConfig:
    hidden: tuple[int, int] = (512, 512)
    t_embed_dim: int = 32
    cond_dim: int = 16
    pool_per_combo: int = 12
    pretrain_lr: float = 0.05
    pretrain_momentum: float = 0.9
    pretrain_iters: int = 6000
    pretrain_batch: int = 64
    pretrain_seed: int = 1


@dataclass
class LoraConfig:
    rank: int = 8
    subset: tuple[str, ...] = ("last",)
    rank_sweep: tuple[int, ...] = (2, 8, 16)
    subset_sweep: tuple[tuple[str, ...], ...] = (
        ("last",), ("last", "w1"), ("last", "w1", "w0"))
    lr: float = 0.05
    momentum: float = 0.9
    iters: int = 1500


@dataclass
class InferenceConfig:
    scheme: str = "tif"
    grid_size: int = 20
    n_noise: int = 4
    sample_steps: int = 200
    n_sample_images: int = 8


@dataclass
class CurveConfig:
    distances: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4, 0.7)
    delta_star: float = 1.0
    scheme: str = "tif"


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    curves: CurveConfig = field(default_factory=CurveConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {data.get('schema_version')}")
        cfg = ExperimentConfig()
        sections = {
            "world": WorldConfig, "schedule": ScheduleConfig, "task": TaskConfig,
            "denoiser": DenoiserConfig, "lora": LoraConfig,
            "inference": InferenceConfig, "curves": CurveConfig,
        }
        for key, value in data.items():
            if key == "schema_version":
                continue
            if key == "seeds":
                cfg.seeds = tuple(int(v) for v in value)
            elif key in sections:
                section = sections[key]()
                valid = {f.name for f in dataclasses.fields(section)}
                for name, entry in value.items():
                    if name not in valid:
                        raise ValueError(f"unknown config field {key}.{name}")
                    default = getattr(section, name)
                    if isinstance(default, tuple):
                        entry = _as_tuple(entry)
                    setattr(section, name, entry)
                setattr(cfg, key, section)
            else:
                raise ValueError(f"unknown config section {key!r}")
        return cfg


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)


def world_spec(cfg: ExperimentConfig) -> wg.WorldSpec:
    w = cfg.world
    return wg.make_world(
        shape=tuple(w.shape), n_classes=w.n_classes, n_envs=w.n_envs,
        footprint_ratio=w.footprint_ratio, render_noise=w.render_noise,
    )


def schedule_of(cfg: ExperimentConfig) -> Schedule:
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def eval_grid(cfg: ExperimentConfig) -> np.ndarray:
    return np.unique(np.round(np.linspace(1, cfg.schedule.T, cfg.inference.grid_size)).astype(int))


def arch_of(cfg: ExperimentConfig) -> Arch:
    return Arch(
        image_shape=tuple(cfg.world.shape), hidden=tuple(cfg.denoiser.hidden),
        t_embed_dim=cfg.denoiser.t_embed_dim, cond_dim=cfg.denoiser.cond_dim,
    )


def build_pool(spec: wg.WorldSpec, per_combo: int) -> np.ndarray:
    """Renders of every class-environment combination, several jitters each.

    Pool jitter seeds live in their own stream, so no pool image coincides
    with any task image.
    """
    images = [
        wg.render(spec, c, e, [11, c, e, j])
        for c in range(spec.n_classes)
        for e in range(spec.n_envs)
        for j in range(per_combo)
    ]
    return np.stack(images)


def macro_f1(y_true, y_pred, classes) -> float:
    """Unweighted mean of per-class F1 scores."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in classes:
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# shared run machinery


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("TIF_THREADS", "1")))
    except ValueError:
        return 1


def train_bank(
    params: DenoiserParams,
    task: wg.FewShotTask,
    s: Schedule,
    lora_cfg: LoraConfig,
    seed: int,
    rank: int | None = None,
    subset: tuple[str, ...] | None = None,
) -> AdapterBank:
    """One adapter per class, each on an independent seeded stream."""
    rank = lora_cfg.rank if rank is None else rank
    subset = tuple(lora_cfg.subset) if subset is None else tuple(subset)
    opt = OptConfig(lr=lora_cfg.lr, momentum=lora_cfg.momentum, iters=lora_cfg.iters, batch_size=0)
    by_class: dict[int, list[np.ndarray]] = {}
    for img, label in task.train:
        by_class.setdefault(label, []).append(img)

    def fit(label: int):
        adapter = inject_lora(params, rank, subset, seed=[seed, _S_ADAPT, label, 0])
        return label, train_adapter(
            params, adapter, np.stack(by_class[label]), s, opt, seed=[seed, _S_ADAPT, label, 1]
        )

    workers = min(_n_workers(), len(by_class))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = dict(pool.map(fit, sorted(by_class)))
    else:
        fitted = dict(fit(label) for label in sorted(by_class))
    return AdapterBank(adapters=fitted)


def eval_loss_matrices(
    params: DenoiserParams,
    bank: AdapterBank,
    task: wg.FewShotTask,
    s: Schedule,
    grid: np.ndarray,
    n_noise: int,
    seed: int,
):
    """Per-test-image loss matrices L[class, t]; reusable across weight schemes."""
    out = []
    for idx, (img, label) in enumerate(task.test):
        classes, losses = tifmod.per_class_losses(
            params, bank, img, s, grid, n_noise, seed=[seed, _S_EVAL, idx]
        )
        out.append((classes, losses, label))
    return out


def accuracy_from_losses(loss_matrices, weights: tifmod.TimestepWeights):
    y_true, y_pred = [], []
    for classes, losses, label in loss_matrices:
        scores = -(losses * weights.weights[None, :]).sum(axis=1)
        y_pred.append(classes[int(np.argmax(scores))])
        y_true.append(label)
    classes = sorted(set(y_true))
    acc = float(np.mean(np.asarray(y_pred) == np.asarray(y_true)))
    return acc, macro_f1(y_true, y_pred, classes)


def _baseline_row(task, mode, task_id, seed) -> dict:
    start = time.perf_counter()
    model = bl.fit_baseline(task, mode)
    y_true = [label for _, label in task.test]
    y_pred = [bl.classify_baseline(model, img) for img, _ in task.test]
    wall = time.perf_counter() - start
    return {
        "task_id": task_id, "method": f"baseline_{mode}", "weight_scheme": "",
        "rank": "", "subset": "", "K": task.k_way, "N": task.n_shot,
        "rho": task.rho, "test_mode": task.test_mode, "seed": seed,
        "accuracy": float(np.mean(np.asarray(y_pred) == np.asarray(y_true))),
        "macro_f1": macro_f1(y_true, y_pred, sorted(set(y_true))),
        "wall_time_seconds": wall,
    }


def _subset_tag(subset) -> str:
    return "+".join(subset)


def write_result_rows(rows, path) -> None:
    exists = os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if not exists:
            writer.writeheader()
        writer.writerows(rows)


def read_result_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(cfg: ExperimentConfig, out_dir) -> None:
    spec = world_spec(cfg)
    save_config(cfg, out_dir)
    stats = wg.premise_stats(spec)
    with open(os.path.join(out_dir, "world_premise.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    print(f"world premise: {stats}")
    for seed in cfg.seeds:
        for n in cfg.task.shots:
            task = wg.sample_task(
                spec, cfg.task.k_way, n, cfg.task.rho, cfg.task.test_size,
                cfg.task.test_mode, seed=[seed, _S_TASK, n],
            )
            directory = os.path.join(out_dir, "tasks", f"seed{seed}_N{n}")
            wg.save_task(task, directory)
            print(f"wrote {directory}: {len(task.train)} train / {len(task.test)} test images")


def cmd_pretrain(cfg: ExperimentConfig, out_dir) -> None:
    spec = world_spec(cfg)
    save_config(cfg, out_dir)
    s = schedule_of(cfg)
    pool = build_pool(spec, cfg.denoiser.pool_per_combo)
    opt = OptConfig(
        lr=cfg.denoiser.pretrain_lr, momentum=cfg.denoiser.pretrain_momentum,
        iters=cfg.denoiser.pretrain_iters, batch_size=cfg.denoiser.pretrain_batch,
    )
    start = time.perf_counter()
    params = pretrain_base(arch_of(cfg), pool, s, opt, seed=cfg.denoiser.pretrain_seed)
    path = os.path.join(out_dir, "base.bin")
    save_base(params, path)
    print(f"pretrained base on {len(pool)} pool images in {time.perf_counter() - start:.1f}s -> {path}")


def _require_base(cfg: ExperimentConfig, out_dir) -> DenoiserParams:
    path = os.path.join(out_dir, "base.bin")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing artifact {path}; run `tiflab pretrain --config <config> --out {out_dir}` first"
        )
    return load_base(path, arch_of(cfg))


def _task_for(cfg, spec, seed, n) -> wg.FewShotTask:
    return wg.sample_task(
        spec, cfg.task.k_way, n, cfg.task.rho, cfg.task.test_size,
        cfg.task.test_mode, seed=[seed, _S_TASK, n],
    )


def cmd_run(cfg: ExperimentConfig, out_dir) -> None:
    spec = world_spec(cfg)
    save_config(cfg, out_dir)
    params = _require_base(cfg, out_dir)
    s = schedule_of(cfg)
    grid = eval_grid(cfg)
    rows = []
    for seed in cfg.seeds:
        for n in cfg.task.shots:
            task = _task_for(cfg, spec, seed, n)
            task_id = f"K{task.k_way}N{n}rho{task.rho}{task.test_mode}seed{seed}"
            start = time.perf_counter()
            bank = train_bank(params, task, s, cfg.lora, seed)
            delta_star = tifmod.estimate_delta_star(task.train)
            weights = tifmod.timestep_weights(s, delta_star, grid, cfg.inference.scheme)
            matrices = eval_loss_matrices(params, bank, task, s, grid, cfg.inference.n_noise, seed)
            acc, f1 = accuracy_from_losses(matrices, weights)
            rows.append({
                "task_id": task_id, "method": "tif", "weight_scheme": cfg.inference.scheme,
                "rank": cfg.lora.rank, "subset": _subset_tag(cfg.lora.subset),
                "K": task.k_way, "N": n, "rho": task.rho, "test_mode": task.test_mode,
                "seed": seed, "accuracy": acc, "macro_f1": f1,
                "wall_time_seconds": time.perf_counter() - start,
            })
            for mode in ("prototype", "linear"):
                rows.append(_baseline_row(task, mode, task_id, seed))
            print(f"{task_id}: tif={acc:.3f} "
                  + " ".join(f"{r['method']}={r['accuracy']:.3f}" for r in rows[-2:]))
    write_result_rows(rows, os.path.join(out_dir, "results.csv"))


def cmd_curves(cfg: ExperimentConfig, out_dir, which: str) -> None:
    save_config(cfg, out_dir)
    s = schedule_of(cfg)
    if which == "err":
        curve = loss_curve(cfg.curves.distances, s)
        path = os.path.join(out_dir, "err_curve.csv")
        curve.write_csv(path)
    elif which == "weights":
        path = os.path.join(out_dir, "weight_curve.csv")
        tifmod.write_weight_csv(s, cfg.curves.delta_star, cfg.curves.scheme, path)
    else:
        raise ValueError(f"unknown curve kind {which!r}; expected 'err' or 'weights'")
    print(f"wrote {path}")


def glyph_correlation(spec: wg.WorldSpec, image: np.ndarray, c: int) -> float:
    """Correlation between an image's glyph zone and class c's on/off pattern.

    The rank-selection rule ("does the model draw this class's glyph?") is
    evaluated on the mean of a batch of samples, which suppresses sampling
    noise the way eyeballing a contact sheet does.
    """
    zs = wg._zone_slices(spec)
    zone = np.asarray(image, dtype=np.float64).mean(axis=0)[zs]
    pattern = np.where(wg._PATTERNS[c], 1.0, -1.0)
    zc = zone - zone.mean()
    pc = pattern - pattern.mean()
    denom = np.sqrt((zc**2).sum() * (pc**2).sum())
    return float((zc * pc).sum() / denom) if denom > 0 else 0.0


def choose_rank(corr_by_rank: dict[int, float], tolerance: float = 0.95) -> int:
    """Smallest rank whose mean glyph correlation reaches ``tolerance`` x best.

    This is the codified version of picking the cheapest adapter whose
    synthesized images still show the class nuance clearly.
    """
    best = max(corr_by_rank.values())
    for rank in sorted(corr_by_rank):
        if corr_by_rank[rank] >= tolerance * best:
            return rank
    return max(corr_by_rank)


def cmd_ablate(cfg: ExperimentConfig, out_dir, axis: str) -> None:
    spec = world_spec(cfg)
    save_config(cfg, out_dir)
    params = _require_base(cfg, out_dir)
    s = schedule_of(cfg)
    grid = eval_grid(cfg)
    n = cfg.task.shots[0]
    rows = []

    if axis == "weights":
        for seed in cfg.seeds:
            task = _task_for(cfg, spec, seed, n)
            task_id = f"K{task.k_way}N{n}rho{task.rho}{task.test_mode}seed{seed}"
            start = time.perf_counter()
            bank = train_bank(params, task, s, cfg.lora, seed)
            delta_star = tifmod.estimate_delta_star(task.train)
            matrices = eval_loss_matrices(params, bank, task, s, grid, cfg.inference.n_noise, seed)
            shared = time.perf_counter() - start
            for scheme in ABLATION_SCHEMES:
                weights = tifmod.timestep_weights(s, delta_star, grid, scheme)
                acc, f1 = accuracy_from_losses(matrices, weights)
                rows.append({
                    "task_id": task_id, "method": "tif", "weight_scheme": scheme,
                    "rank": cfg.lora.rank, "subset": _subset_tag(cfg.lora.subset),
                    "K": task.k_way, "N": n, "rho": task.rho, "test_mode": task.test_mode,
                    "seed": seed, "accuracy": acc, "macro_f1": f1,
                    "wall_time_seconds": shared,
                })
            print(f"{task_id}: " + " ".join(
                f"{r['weight_scheme']}={r['accuracy']:.3f}" for r in rows[-len(ABLATION_SCHEMES):]))
    elif axis == "rank":
        corr_by_rank: dict[int, list[float]] = {}
        for rank in cfg.lora.rank_sweep:
            for seed in cfg.seeds:
                task = _task_for(cfg, spec, seed, n)
                task_id = f"K{task.k_way}N{n}rho{task.rho}{task.test_mode}seed{seed}"
                start = time.perf_counter()
                bank = train_bank(params, task, s, cfg.lora, seed, rank=rank)
                delta_star = tifmod.estimate_delta_star(task.train)
                weights = tifmod.timestep_weights(s, delta_star, grid, cfg.inference.scheme)
                matrices = eval_loss_matrices(params, bank, task, s, grid, cfg.inference.n_noise, seed)
                acc, f1 = accuracy_from_losses(matrices, weights)
                rows.append({
                    "task_id": task_id, "method": "tif", "weight_scheme": cfg.inference.scheme,
                    "rank": rank, "subset": _subset_tag(cfg.lora.subset),
                    "K": task.k_way, "N": n, "rho": task.rho, "test_mode": task.test_mode,
                    "seed": seed, "accuracy": acc, "macro_f1": f1,
                    "wall_time_seconds": time.perf_counter() - start,
                })
                if seed == cfg.seeds[0]:
                    sample_dir = os.path.join(out_dir, "samples", f"rank{rank}")
                    os.makedirs(sample_dir, exist_ok=True)
                    for c in bank.classes():
                        batch = sample_images(
                            params, bank.adapters[c], s, cfg.inference.sample_steps,
                            seed=[seed, _S_SAMPLE, rank, c], n=cfg.inference.n_sample_images,
                        )
                        for i, img in enumerate(batch):
                            wg.write_pgm(img, os.path.join(sample_dir, f"class{c}_{i:02d}.pgm"))
                        corr = glyph_correlation(spec, batch.mean(axis=0), c)
                        corr_by_rank.setdefault(rank, []).append(corr)
                print(f"{task_id} rank={rank}: acc={acc:.3f}")
        mean_corr = {rank: float(np.mean(v)) for rank, v in corr_by_rank.items()}
        chosen = choose_rank(mean_corr)
        with open(os.path.join(out_dir, "rank_choice.json"), "w") as fh:
            json.dump({"glyph_correlation": mean_corr, "chosen_rank": chosen}, fh, indent=2)
        print(f"rank choice by sample inspection: {chosen} (correlations {mean_corr})")
    elif axis == "subset":
        for subset in cfg.lora.subset_sweep:
            for seed in cfg.seeds:
                task = _task_for(cfg, spec, seed, n)
                task_id = f"K{task.k_way}N{n}rho{task.rho}{task.test_mode}seed{seed}"
                start = time.perf_counter()
                bank = train_bank(params, task, s, cfg.lora, seed, subset=subset)
                delta_star = tifmod.estimate_delta_star(task.train)
                weights = tifmod.timestep_weights(s, delta_star, grid, cfg.inference.scheme)
                matrices = eval_loss_matrices(params, bank, task, s, grid, cfg.inference.n_noise, seed)
                acc, f1 = accuracy_from_losses(matrices, weights)
                rows.append({
                    "task_id": task_id, "method": "tif", "weight_scheme": cfg.inference.scheme,
                    "rank": cfg.lora.rank, "subset": _subset_tag(subset),
                    "K": task.k_way, "N": n, "rho": task.rho, "test_mode": task.test_mode,
                    "seed": seed, "accuracy": acc, "macro_f1": f1,
                    "wall_time_seconds": time.perf_counter() - start,
                })
                print(f"{task_id} subset={_subset_tag(subset)}: acc={acc:.3f}")
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; expected weights, rank or subset")
    write_result_rows(rows, os.path.join(out_dir, f"ablate_{axis}.csv"))


# ---------------------------------------------------------------------------
# CLI


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tiflab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-world", "pretrain", "run", "curves", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        if name == "curves":
            p.add_argument("--which", choices=("err", "weights"), default="err")
        if name == "ablate":
            p.add_argument("--axis", choices=("weights", "rank", "subset"), required=True)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-world":
            cmd_gen_world(cfg, args.out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.out)
        elif args.command == "run":
            cmd_run(cfg, args.out)
        elif args.command == "curves":
            cmd_curves(cfg, args.out, args.which)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.out, args.axis)
    except Exception as exc:  # single machine-parsable diagnostic line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
