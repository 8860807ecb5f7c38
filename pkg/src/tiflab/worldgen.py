"""Parametric synthetic worlds with a nuanced class attribute and a prominent environment.

Every image is rendered from a class index and an environment index.  The
class attribute is a small glyph (a 4-pixel row or column pattern inside a
fixed 4x4 zone); the environment is a full-background half-plane shading
pattern whose pixel mass exceeds the glyph's by a configurable ratio.  Tasks
sampled from a world can link environments to class labels with adjustable
strength, which is the spurious correlation the classifiers must survive.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attrloss import fosd_check

# Hard ceiling keeping env amplitude + jitter inside the value range.
_ENV_AMPLITUDE_MAX = 0.95
# Nominal glyph on/off contrast (on minus off pixel value).
_GLYPH_CONTRAST = 0.7
_ZONE = 4  # glyph zone side length

_PREMISE_SEED = 71  # fixed stream for the build-time dominance check


class WorldPremiseError(RuntimeError):
    """The generated world violates the environment-dominance premise."""


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of one synthetic world.

    ``footprint_ratio`` is the target ratio between the smallest
    environment-flip distance and the largest class-flip distance; values
    above 1 make environment changes strictly more prominent than class
    changes.  ``render_noise`` is the amplitude of per-image uniform jitter
    applied to background (non-glyph) pixels so repeated shots are not
    literal duplicates.
    """

    shape: tuple[int, int, int] = (1, 16, 16)
    n_classes: int = 8
    n_envs: int = 4
    footprint_ratio: float = 4.0
    render_noise: float = 0.02

    def __post_init__(self):
        c, h, w = self.shape
        if c < 1 or h < 2 * _ZONE or w < 2 * _ZONE:
            raise ValueError(f"shape {self.shape} too small for a {_ZONE}x{_ZONE} glyph zone")
        if not 1 <= self.n_classes <= 2 * _ZONE:
            raise ValueError(f"n_classes must lie in 1..{2 * _ZONE}, got {self.n_classes}")
        if not 1 <= self.n_envs <= 4:
            raise ValueError(f"n_envs must lie in 1..4, got {self.n_envs}")
        if self.footprint_ratio <= 0:
            raise ValueError("footprint_ratio must be positive")
        if self.render_noise < 0:
            raise ValueError("render_noise must be >= 0")


def _zone_slices(spec: WorldSpec) -> tuple[slice, slice]:
    _, h, w = spec.shape
    r0, c0 = h // 2 - _ZONE // 2, w // 2 - _ZONE // 2
    return slice(r0, r0 + _ZONE), slice(c0, c0 + _ZONE)


def _zone_mask(spec: WorldSpec) -> np.ndarray:
    _, h, w = spec.shape
    m = np.zeros((h, w), dtype=bool)
    m[_zone_slices(spec)] = True
    return m


def _glyph_patterns() -> np.ndarray:
    """The eight 4x4 glyph masks: four rows then four columns, 4 pixels each."""
    pats = np.zeros((2 * _ZONE, _ZONE, _ZONE), dtype=bool)
    for i in range(_ZONE):
        pats[i, i, :] = True
        pats[_ZONE + i, :, i] = True
    return pats


_PATTERNS = _glyph_patterns()
# Largest pairwise symmetric difference within the glyph family (8 pixels for
# two distinct rows or columns); used to calibrate the footprint ratio.
_MAX_GLYPH_DIFF_PX = 8


def _env_patterns(spec: WorldSpec) -> np.ndarray:
    """Unit-amplitude half-plane shading fields: +-top-bright, +-left-bright."""
    _, h, w = spec.shape
    rows = np.arange(h)[:, None] < h // 2
    cols = np.arange(w)[None, :] < w // 2
    top = np.where(rows, 1.0, -1.0) * np.ones((h, w))
    left = np.where(cols, 1.0, -1.0) * np.ones((h, w))
    return np.stack([top, -top, left, -left])[: spec.n_envs]


def _calibration(spec: WorldSpec) -> tuple[float, float]:
    """Environment amplitude and glyph contrast hitting the footprint ratio.

    The ratio is enforced between the minimum environment-flip distance and
    the maximum glyph-flip distance; when the required amplitude would leave
    the value range, the glyph contrast is shrunk instead.
    """
    pats = _env_patterns(spec)
    bg = ~_zone_mask(spec)
    n_chan = spec.shape[0]
    if len(pats) > 1:
        d_unit = min(
            float(np.sqrt(n_chan * ((pats[i] - pats[j])[bg] ** 2).sum()))
            for i in range(len(pats))
            for j in range(i + 1, len(pats))
        )
    else:
        d_unit = 1.0
    contrast = _GLYPH_CONTRAST
    nu_max = contrast * np.sqrt(n_chan * _MAX_GLYPH_DIFF_PX)
    amp = spec.footprint_ratio * nu_max / d_unit
    if amp > _ENV_AMPLITUDE_MAX:
        amp = _ENV_AMPLITUDE_MAX
        contrast = amp * d_unit / (spec.footprint_ratio * np.sqrt(n_chan * _MAX_GLYPH_DIFF_PX))
    return amp, contrast


def render(spec: WorldSpec, c: int, e: int, jitter_seed) -> np.ndarray:
    """Render the image for (class c, environment e); deterministic in all args.

    The jitter field depends only on the seed, never on the attribute
    indices, so two renders with equal seeds differ exactly on the footprint
    of whichever attribute was flipped.
    """
    if not 0 <= c < spec.n_classes:
        raise ValueError(f"class index {c} outside 0..{spec.n_classes - 1}")
    if not 0 <= e < spec.n_envs:
        raise ValueError(f"env index {e} outside 0..{spec.n_envs - 1}")
    amp, contrast = _calibration(spec)
    n_chan, h, w = spec.shape
    zs = _zone_slices(spec)

    img2d = amp * _env_patterns(spec)[e].copy()
    glyph = np.full((_ZONE, _ZONE), -contrast / 2.0)
    glyph[_PATTERNS[c]] = contrast / 2.0
    img2d[zs] = glyph

    img = np.broadcast_to(img2d, (n_chan, h, w)).copy()
    if spec.render_noise > 0:
        rng = np.random.default_rng(jitter_seed)
        jitter = rng.uniform(-spec.render_noise, spec.render_noise, size=(n_chan, h, w))
        img += np.where(_zone_mask(spec), 0.0, jitter)
    return np.clip(img, -1.0, 1.0)


def _flip_pair(spec: WorldSpec, which: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if which not in ("nuance", "env"):
        raise ValueError(f"which must be 'nuance' or 'env', got {which!r}")
    c = int(rng.integers(spec.n_classes))
    e = int(rng.integers(spec.n_envs))
    jseed = int(rng.integers(2**63))
    if which == "nuance":
        others = [k for k in range(spec.n_classes) if k != c]
        c2 = int(rng.choice(others)) if others else c
        return render(spec, c, e, jseed), render(spec, c2, e, jseed)
    others = [k for k in range(spec.n_envs) if k != e]
    e2 = int(rng.choice(others)) if others else e
    return render(spec, c, e, jseed), render(spec, c, e2, jseed)


def pair_sampler(spec: WorldSpec, which: str):
    """A sampler of image pairs differing only in the designated attribute."""

    def sample(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return _flip_pair(spec, which, rng)

    return sample


def flip_distance_samples(spec: WorldSpec, which: str, n: int, seed) -> np.ndarray:
    """n pixel distances between renders where exactly one attribute was resampled."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for i in range(n):
        a, b = _flip_pair(spec, which, rng)
        out[i] = np.linalg.norm((a - b).ravel())
    return out


def premise_stats(spec: WorldSpec, n: int = 192, seed=_PREMISE_SEED) -> dict:
    """Distance distributions of both flips plus the dominance verdict."""
    env_d = flip_distance_samples(spec, "env", n, [seed, 0])
    nu_d = flip_distance_samples(spec, "nuance", n, [seed, 1])
    return {
        "env_median": float(np.median(env_d)),
        "nuance_median": float(np.median(nu_d)),
        "env_min": float(env_d.min()),
        "nuance_max": float(nu_d.max()),
        "fosd_env_over_nuance": fosd_check(env_d, nu_d),
    }


def make_world(**kwargs) -> WorldSpec:
    """Build a world and, when its ratio exceeds 1, assert environment dominance."""
    spec = WorldSpec(**kwargs)
    if spec.footprint_ratio > 1 and spec.n_envs > 1 and spec.n_classes > 1:
        stats = premise_stats(spec)
        if not stats["fosd_env_over_nuance"]:
            raise WorldPremiseError(
                f"environment distances do not dominate nuance distances: {stats}"
            )
    return spec


@dataclass
class FewShotTask:
    """A K-way-N-shot training split plus a labelled test split.

    ``rho`` is the probability that a training image of class c receives its
    class-linked environment (c mod n_envs); ``test_mode`` is ``balanced``
    (environments cycle uniformly) or ``anti`` (each test image gets an
    environment linked to a different class).
    """

    k_way: int
    n_shot: int
    train: list[tuple[np.ndarray, int]]
    test: list[tuple[np.ndarray, int]]
    rho: float
    test_mode: str
    train_envs: list[int] = field(default_factory=list)
    test_envs: list[int] = field(default_factory=list)


def sample_task(
    spec: WorldSpec,
    k: int,
    n: int,
    rho: float,
    test_size: int,
    test_mode: str,
    seed,
) -> FewShotTask:
    """Sample a biased few-shot task; reproducible from (spec, seed)."""
    if not 2 <= k <= spec.n_classes:
        raise ValueError(f"k must lie in 2..{spec.n_classes}, got {k}")
    if spec.n_envs < 2:
        raise ValueError("need at least 2 environments")
    if n < 1 or test_size < 1:
        raise ValueError("n and test_size must be >= 1")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if test_mode not in ("balanced", "anti"):
        raise ValueError(f"test_mode must be 'balanced' or 'anti', got {test_mode!r}")

    rng = np.random.default_rng(seed)
    link = lambda c: c % spec.n_envs

    train, train_envs = [], []
    for c in range(k):
        for _ in range(n):
            e = link(c) if rng.random() < rho else int(rng.integers(spec.n_envs))
            train.append((render(spec, c, e, int(rng.integers(2**63))), c))
            train_envs.append(e)

    test, test_envs = [], []
    for c in range(k):
        if test_mode == "anti":
            envs = sorted({link(c2) for c2 in range(k) if c2 != c} - {link(c)})
            if not envs:
                raise ValueError("anti mode needs another class with a distinct environment")
        else:
            envs = list(range(spec.n_envs))
        for i in range(test_size):
            e = envs[i % len(envs)]
            test.append((render(spec, c, e, int(rng.integers(2**63))), c))
            test_envs.append(e)

    return FewShotTask(
        k_way=k, n_shot=n, train=train, test=test, rho=rho, test_mode=test_mode,
        train_envs=train_envs, test_envs=test_envs,
    )


# ---------------------------------------------------------------------------
# persistence: binary PGM images plus a manifest


def write_pgm(img: np.ndarray, path) -> None:
    """Write a single-channel image as binary PGM (P5, maxval 65535).

    Values are mapped from [-1, 1] by round((v+1)/2 * 65535); the mapping
    round-trips bit-exactly through ``read_pgm``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"PGM persistence requires a single channel, got shape {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got shape {img.shape}")
    q = np.rint((np.clip(img, -1.0, 1.0) + 1.0) / 2.0 * 65535.0).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5/maxval-65535 PGM back into a (1, H, W) float image in [-1, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 65535:
        raise ValueError(f"{path}: expected maxval 65535")
    q = np.frombuffer(parts[3], dtype=">u2", count=h * w).reshape(h, w)
    return (q.astype(np.float64) / 65535.0 * 2.0 - 1.0)[None, :, :]


def save_task(task: FewShotTask, directory) -> None:
    """Persist a task as one directory of PGM files plus manifest.csv."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for split, items, envs in (("train", task.train, task.train_envs),
                               ("test", task.test, task.test_envs)):
        for i, (img, label) in enumerate(items):
            name = f"{split}_{i:04d}.pgm"
            write_pgm(img, os.path.join(directory, name))
            env = envs[i] if i < len(envs) else -1
            rows.append([name, split, label, env])
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "split", "class", "env"])
        writer.writerows(rows)
    meta = {"schema_version": 1, "k_way": task.k_way, "n_shot": task.n_shot,
            "rho": task.rho, "test_mode": task.test_mode}
    with open(os.path.join(directory, "task.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_task(directory) -> FewShotTask:
    """Load a task saved by ``save_task``; images round-trip bit-exactly."""
    with open(os.path.join(directory, "task.json")) as fh:
        meta = json.load(fh)
    train, test, train_envs, test_envs = [], [], [], []
    with open(os.path.join(directory, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_pgm(os.path.join(directory, row["filename"]))
            item = (img, int(row["class"]))
            if row["split"] == "train":
                train.append(item)
                train_envs.append(int(row["env"]))
            else:
                test.append(item)
                test_envs.append(int(row["env"]))
    return FewShotTask(
        k_way=meta["k_way"], n_shot=meta["n_shot"], train=train, test=test,
        rho=meta["rho"], test_mode=meta["test_mode"],
        train_envs=train_envs, test_envs=test_envs,
    )
