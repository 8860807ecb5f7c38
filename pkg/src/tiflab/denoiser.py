"""A small conditional denoising MLP trained from scratch, with low-rank adapters.

The network predicts the noise component of a diffused image from the noisy
image, a sinusoidal time-step embedding and a learned condition embedding
shared by all classes.  The base weights are trained once on a broad pool
and then frozen; per-class specialisation happens exclusively through
low-rank adapter matrices injected into a chosen subset of layers.  All
gradients are hand-derived, which keeps training single-threaded,
reproducible and easy to verify against finite differences.
"""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .schedule import Schedule, forward_sample

# Layers that can host a low-rank adapter: the two hidden layers, the output
# layer ("last") and the condition-embedding projection.
ADAPTER_LAYERS = ("w0", "w1", "last", "cond")

X0_CLAMP = 1.5  # predicted clean images are clamped to [-X0_CLAMP, X0_CLAMP]

_BASE_MAGIC = b"TIFBASE1"
_ADPT_MAGIC = b"TIFADPT1"
_LAYER_IDS = {"w0": 0, "w1": 1, "last": 2, "cond": 3, "cond_embed": 4}
_ID_LAYERS = {v: k for k, v in _LAYER_IDS.items()}


class AdapterDivergenceError(RuntimeError):
    """Adapter training produced a non-finite loss."""


@dataclass(frozen=True)
class Arch:
    """Network dimensions: flat image + time embedding + condition embedding in,
    two hidden layers, image-shaped noise prediction out."""

    image_shape: tuple[int, int, int]
    hidden: tuple[int, int] = (512, 512)
    t_embed_dim: int = 32
    cond_dim: int = 16

    @property
    def image_size(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    @property
    def input_dim(self) -> int:
        return self.image_size + self.t_embed_dim + self.cond_dim

    def layer_shape(self, name: str) -> tuple[int, int]:
        shapes = {
            "w0": (self.hidden[0], self.input_dim),
            "w1": (self.hidden[1], self.hidden[0]),
            "last": (self.image_size, self.hidden[1]),
            "cond": (self.cond_dim, self.cond_dim),
        }
        if name not in shapes:
            raise ValueError(f"unknown layer {name!r}; expected one of {ADAPTER_LAYERS}")
        return shapes[name]


@dataclass
class DenoiserParams:
    """Base network weights plus the learned condition embedding.

    Frozen by convention after pretraining: adapter training never writes to
    these arrays, which ``weights_hash`` makes checkable.
    """

    arch: Arch
    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    cond_embed: np.ndarray


@dataclass
class LoraAdapter:
    """Per-layer low-rank deltas: effective weight becomes W + scale * B @ A.

    B starts at zero, so a freshly injected adapter leaves the network
    exactly equal to the base.
    """

    layers: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A, B)
    rank: int
    scale: float = 1.0


@dataclass
class AdapterBank:
    """One independently trained adapter per class index."""

    adapters: dict[int, LoraAdapter] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(self.adapters)


@dataclass(frozen=True)
class OptConfig:
    """Stochastic gradient descent with momentum and a fixed iteration budget.

    ``batch_size=0`` means full-batch steps (used for the tiny per-class
    adapter sets).
    """

    lr: float = 0.05
    momentum: float = 0.9
    iters: int = 1500
    batch_size: int = 0


# ---------------------------------------------------------------------------
# forward / backward


def _silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # exp overflow saturates cleanly to 0 or 1
        s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _dsilu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _time_embedding(ts: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _eff_weight(params: DenoiserParams, adapter: LoraAdapter | None, name: str) -> np.ndarray:
    w = params.weights[name][0]
    if adapter is not None and name in adapter.layers:
        a, b = adapter.layers[name]
        w = w + adapter.scale * (b @ a)
    return w


def _forward(params, adapter, x2d, ts, want_cache=False):
    n = x2d.shape[0]
    arch = params.arch
    temb = _time_embedding(ts, arch.t_embed_dim)
    wc = _eff_weight(params, adapter, "cond")
    y_proj = params.cond_embed @ wc.T + params.weights["cond"][1]
    h = np.concatenate([x2d, temb, np.tile(y_proj, (n, 1))], axis=1)

    w0 = _eff_weight(params, adapter, "w0")
    z1 = h @ w0.T + params.weights["w0"][1]
    a1 = _silu(z1)
    w1 = _eff_weight(params, adapter, "w1")
    z2 = a1 @ w1.T + params.weights["w1"][1]
    a2 = _silu(z2)
    wl = _eff_weight(params, adapter, "last")
    out = a2 @ wl.T + params.weights["last"][1]
    if want_cache:
        return out, (h, z1, a1, z2, a2, w0, w1, wl, wc)
    return out


def _backward(params, cache, g_out):
    """Gradients of the loss w.r.t. every effective weight, bias and the
    condition embedding, given dL/d(output)."""
    h, z1, a1, z2, a2, w0, w1, wl, wc = cache
    d_img = params.arch.image_size
    d_split = d_img + params.arch.t_embed_dim
    grads = {}
    grads["last"] = (g_out.T @ a2, g_out.sum(axis=0))
    ga2 = g_out @ wl
    gz2 = ga2 * _dsilu(z2)
    grads["w1"] = (gz2.T @ a1, gz2.sum(axis=0))
    ga1 = gz2 @ w1
    gz1 = ga1 * _dsilu(z1)
    grads["w0"] = (gz1.T @ h, gz1.sum(axis=0))
    gh = gz1 @ w0
    g_yproj = gh[:, d_split:].sum(axis=0)
    grads["cond"] = (np.outer(g_yproj, params.cond_embed), g_yproj)
    grads["cond_embed"] = g_yproj @ wc
    return grads


def _eps_loss_and_grads(params, adapter, x0_batch, s: Schedule, rng):
    """One noise-prediction step: per-sample uniform t, fresh noise, MSE loss."""
    n = x0_batch.shape[0]
    ts = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal(x0_batch.shape)
    ab = s.alpha_bars[ts - 1][:, None]
    xt = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps
    out, cache = _forward(params, adapter, xt, ts, want_cache=True)
    diff = out - eps
    loss = float((diff**2).mean())
    grads = _backward(params, cache, 2.0 * diff / diff.size)
    return loss, grads


# ---------------------------------------------------------------------------
# training


def _init_params(arch: Arch, rng: np.random.Generator) -> DenoiserParams:
    weights = {}
    for name in ADAPTER_LAYERS:
        out_d, in_d = arch.layer_shape(name)
        weights[name] = (rng.normal(0.0, np.sqrt(2.0 / in_d), (out_d, in_d)), np.zeros(out_d))
    cond_embed = rng.normal(0.0, 1.0, arch.cond_dim)
    return DenoiserParams(arch=arch, weights=weights, cond_embed=cond_embed)


def pretrain_base(
    arch: Arch,
    pool: np.ndarray,
    s: Schedule,
    opt: OptConfig,
    seed,
) -> DenoiserParams:
    """Train the base network on a broad image pool, then treat it as frozen.

    The pool should cover every class-environment combination so later
    adapters only need to encode what a few-shot class adds.  Training is
    driven by a single seeded generator, so identical arguments reproduce
    identical weights.
    """
    pool = np.asarray(pool, dtype=np.float64).reshape(len(pool), -1)
    if pool.shape[0] == 0:
        raise ValueError("pretraining pool is empty")
    if pool.shape[1] != arch.image_size:
        raise ValueError(f"pool images have {pool.shape[1]} elements, arch expects {arch.image_size}")
    rng = np.random.default_rng(seed)
    params = _init_params(arch, rng)
    batch = opt.batch_size if opt.batch_size > 0 else min(64, pool.shape[0])
    vel = {name: (np.zeros_like(w), np.zeros_like(b)) for name, (w, b) in params.weights.items()}
    vel_y = np.zeros_like(params.cond_embed)
    for i in range(opt.iters):
        idx = rng.integers(0, pool.shape[0], size=batch)
        loss, grads = _eps_loss_and_grads(params, None, pool[idx], s, rng)
        if not np.isfinite(loss):
            raise AdapterDivergenceError(f"pretraining diverged at step {i}: loss={loss}")
        for name, (w, b) in params.weights.items():
            gw, gb = grads[name]
            vw, vb = vel[name]
            vw *= opt.momentum
            vw -= opt.lr * gw
            vb *= opt.momentum
            vb -= opt.lr * gb
            w += vw
            b += vb
        vel_y *= opt.momentum
        vel_y -= opt.lr * grads["cond_embed"]
        params.cond_embed += vel_y
    return params


def inject_lora(params: DenoiserParams, rank: int, subset, seed=0) -> LoraAdapter:
    """Create a zero-effect adapter (B = 0) on the named layers.

    A is given a small random initialisation so that training can move B off
    zero; because B starts at zero the adapted network initially equals the
    base network exactly.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    subset = tuple(subset)
    if not subset:
        raise ValueError("subset must name at least one layer")
    rng = np.random.default_rng(seed)
    layers = {}
    for name in subset:
        out_d, in_d = params.arch.layer_shape(name)
        if rank > min(out_d, in_d):
            raise ValueError(f"rank {rank} exceeds min dim {min(out_d, in_d)} of layer {name!r}")
        a = rng.normal(0.0, 1.0 / np.sqrt(in_d), (rank, in_d))
        b = np.zeros((out_d, rank))
        layers[name] = (a, b)
    return LoraAdapter(layers=layers, rank=rank, scale=1.0)


def adapter_param_count(adapter: LoraAdapter) -> int:
    return sum(a.size + b.size for a, b in adapter.layers.values())


def train_adapter(
    params: DenoiserParams,
    adapter: LoraAdapter,
    class_images: np.ndarray,
    s: Schedule,
    opt: OptConfig,
    seed,
) -> LoraAdapter:
    """Fit the adapter to one class's images by noise-prediction descent.

    Only the A/B matrices move; the base stays untouched.  Returns a trained
    copy, leaving the input adapter as injected.
    """
    imgs = np.asarray(class_images, dtype=np.float64).reshape(len(class_images), -1)
    if imgs.shape[0] == 0:
        raise ValueError("class_images is empty")
    if imgs.shape[1] != params.arch.image_size:
        raise ValueError("class image size does not match the architecture")
    adapter = LoraAdapter(
        layers={k: (a.copy(), b.copy()) for k, (a, b) in adapter.layers.items()},
        rank=adapter.rank,
        scale=adapter.scale,
    )
    rng = np.random.default_rng(seed)
    batch = opt.batch_size if opt.batch_size > 0 else imgs.shape[0]
    vel = {name: (np.zeros_like(a), np.zeros_like(b)) for name, (a, b) in adapter.layers.items()}
    for i in range(opt.iters):
        x0 = imgs if batch >= imgs.shape[0] else imgs[rng.integers(0, imgs.shape[0], size=batch)]
        loss, grads = _eps_loss_and_grads(params, adapter, x0, s, rng)
        if not np.isfinite(loss):
            raise AdapterDivergenceError(f"adapter training diverged at step {i}: loss={loss}")
        for name, (a, b) in adapter.layers.items():
            gw = grads[name][0]
            ga = adapter.scale * (b.T @ gw)
            gb = adapter.scale * (gw @ a.T)
            va, vb = vel[name]
            va *= opt.momentum
            va -= opt.lr * ga
            vb *= opt.momentum
            vb -= opt.lr * gb
            a += va
            b += vb
    return adapter


def adapter_grads(params, adapter, x0_batch, ts, eps, s: Schedule):
    """Analytic adapter gradients for a fixed (t, noise) minibatch.

    Exposed for verification: the finite-difference oracle perturbs A/B
    entries on the same fixed batch and must agree with these values.
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64).reshape(len(x0_batch), -1)
    ab = s.alpha_bars[np.asarray(ts) - 1][:, None]
    xt = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps
    out, cache = _forward(params, adapter, xt, np.asarray(ts), want_cache=True)
    diff = out - eps
    loss = float((diff**2).mean())
    grads = _backward(params, cache, 2.0 * diff / diff.size)
    result = {}
    for name, (a, b) in adapter.layers.items():
        gw = grads[name][0]
        result[name] = (adapter.scale * (b.T @ gw), adapter.scale * (gw @ a.T))
    return loss, result


def adapter_loss(params, adapter, x0_batch, ts, eps, s: Schedule) -> float:
    """Noise-prediction MSE on a fixed (t, noise) minibatch."""
    x0_batch = np.asarray(x0_batch, dtype=np.float64).reshape(len(x0_batch), -1)
    ab = s.alpha_bars[np.asarray(ts) - 1][:, None]
    xt = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps
    out = _forward(params, adapter, xt, np.asarray(ts))
    return float(((out - eps) ** 2).mean())


# ---------------------------------------------------------------------------
# inference


def predict_x0_batch(params, adapter, xt2d: np.ndarray, ts: np.ndarray, s: Schedule) -> np.ndarray:
    """Predicted clean images for a batch of (noisy image, time-step) rows."""
    eps_hat = _forward(params, adapter, xt2d, ts)
    ab = s.alpha_bars[np.asarray(ts) - 1][:, None]
    x0_hat = (xt2d - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.clip(x0_hat, -X0_CLAMP, X0_CLAMP)


def predict_x0(params, adapter, x_t: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Single-image clean-image prediction x0_hat = (x_t - sqrt(1-ab) eps_hat)/sqrt(ab)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.size != params.arch.image_size:
        raise ValueError(f"image has {x_t.size} elements, arch expects {params.arch.image_size}")
    s._check_t(t)
    flat = predict_x0_batch(params, adapter, x_t.reshape(1, -1), np.array([t]), s)[0]
    return flat.reshape(x_t.shape)


def recon_loss(params, adapter, x0: np.ndarray, t: int, s: Schedule, n_noise: int, seed) -> float:
    """Mean over noise draws of the squared reconstruction error ||x0 - x0_hat||^2.

    Unweighted: any per-time-step weighting is applied by the caller.
    """
    if n_noise < 1:
        raise ValueError("n_noise must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    s._check_t(t)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_noise, x0.shape[1]))
    ab = s.alpha_bars[t - 1]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    x0_hat = predict_x0_batch(params, adapter, xt, np.full(n_noise, t), s)
    return float(((x0 - x0_hat) ** 2).sum(axis=1).mean())


def epsilon_mse(params, adapter, images, s: Schedule, n_draws: int, seed) -> float:
    """Per-element noise-prediction MSE over random (t, noise) draws; evaluation only."""
    imgs = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_draws):
        ts = rng.integers(1, s.T + 1, size=imgs.shape[0])
        eps = rng.standard_normal(imgs.shape)
        ab = s.alpha_bars[ts - 1][:, None]
        xt = np.sqrt(ab) * imgs + np.sqrt(1.0 - ab) * eps
        out = _forward(params, adapter, xt, ts)
        total += float(((out - eps) ** 2).mean())
    return total / n_draws


def sample_images(params, adapter, s: Schedule, steps: int, seed, n: int = 1) -> np.ndarray:
    """Ancestral reverse diffusion from pure noise along a strided time grid.

    Returns n images of the architecture's shape, clamped to [-1, 1].
    """
    if not 1 <= steps <= s.T:
        raise ValueError(f"steps must lie in 1..{s.T}, got {steps}")
    rng = np.random.default_rng(seed)
    d = params.arch.image_size
    ts_grid = np.unique(np.round(np.linspace(1, s.T, steps)).astype(int))[::-1]
    x = rng.standard_normal((n, d))
    for i, t in enumerate(ts_grid):
        ab_t = s.alpha_bars[t - 1]
        x0_hat = predict_x0_batch(params, adapter, x, np.full(n, t), s)
        t_next = int(ts_grid[i + 1]) if i + 1 < len(ts_grid) else 0
        ab_next = s.alpha_bars[t_next - 1] if t_next >= 1 else 1.0
        alpha_step = ab_t / ab_next
        beta_step = 1.0 - alpha_step
        mean = (np.sqrt(ab_next) * beta_step / (1.0 - ab_t)) * x0_hat + (
            np.sqrt(alpha_step) * (1.0 - ab_next) / (1.0 - ab_t)
        ) * x
        if t_next >= 1:
            var = beta_step * (1.0 - ab_next) / (1.0 - ab_t)
            x = mean + np.sqrt(var) * rng.standard_normal((n, d))
        else:
            x = mean
    return np.clip(x, -1.0, 1.0).reshape((n, *params.arch.image_shape))


def sample_image(params, adapter, s: Schedule, steps: int, seed) -> np.ndarray:
    """One ancestral sample; same seed gives the same image."""
    return sample_images(params, adapter, s, steps, seed, n=1)[0]


# ---------------------------------------------------------------------------
# persistence and integrity


def weights_hash(params: DenoiserParams) -> str:
    """SHA-256 over the base weights and condition embedding, in layer order."""
    digest = hashlib.sha256()
    for name in ADAPTER_LAYERS:
        w, b = params.weights[name]
        digest.update(w.tobytes())
        digest.update(b.tobytes())
    digest.update(params.cond_embed.tobytes())
    return digest.hexdigest()


def _pack_record(layer_id: int, rank: int, rows: int, cols: int, *arrays) -> bytes:
    head = struct.pack("<HHII", layer_id, rank, rows, cols)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return head + body


def save_base(params: DenoiserParams, path) -> None:
    """Write base weights: magic TIFBASE1, dense records (rank=0, W then bias),
    condition embedding as a one-column record, trailing CRC32."""
    payload = b""
    for name in ADAPTER_LAYERS:
        w, b = params.weights[name]
        payload += _pack_record(_LAYER_IDS[name], 0, w.shape[0], w.shape[1], w, b)
    y = params.cond_embed
    payload += _pack_record(_LAYER_IDS["cond_embed"], 0, y.size, 1, y[:, None], np.zeros(y.size))
    with open(path, "wb") as fh:
        fh.write(_BASE_MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


def save_adapter(adapter: LoraAdapter, path) -> None:
    """Write adapter deltas: magic TIFADPT1, one record per adapted layer
    (A row-major then B row-major as little-endian f32), trailing CRC32."""
    payload = b""
    for name in sorted(adapter.layers, key=lambda k: _LAYER_IDS[k]):
        a, b = adapter.layers[name]
        rows, cols = b.shape[0], a.shape[1]
        payload += _pack_record(_LAYER_IDS[name], adapter.rank, rows, cols, a, b)
    with open(path, "wb") as fh:
        fh.write(_ADPT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


def _read_records(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(magic)] != magic:
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    payload, crc = blob[len(magic) : -4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: CRC mismatch")
    off = 0
    while off < len(payload):
        layer_id, rank, rows, cols = struct.unpack_from("<HHII", payload, off)
        off += 12
        if rank == 0:  # dense record: W (rows x cols) then bias (rows)
            w = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=off)
            off += 4 * rows * cols
            b = np.frombuffer(payload, dtype="<f4", count=rows, offset=off)
            off += 4 * rows
            yield layer_id, rank, w.reshape(rows, cols).astype(np.float64), b.astype(np.float64)
        else:  # adapter record: A (rank x cols) then B (rows x rank)
            a = np.frombuffer(payload, dtype="<f4", count=rank * cols, offset=off)
            off += 4 * rank * cols
            b = np.frombuffer(payload, dtype="<f4", count=rows * rank, offset=off)
            off += 4 * rows * rank
            yield layer_id, rank, a.reshape(rank, cols).astype(np.float64), b.reshape(rows, rank).astype(np.float64)


def load_base(path, arch: Arch) -> DenoiserParams:
    weights = {}
    cond_embed = None
    for layer_id, rank, first, second in _read_records(path, _BASE_MAGIC):
        name = _ID_LAYERS.get(layer_id)
        if name is None or rank != 0:
            raise ValueError(f"{path}: unexpected record (id={layer_id}, rank={rank})")
        if name == "cond_embed":
            cond_embed = first[:, 0]
        else:
            if first.shape != arch.layer_shape(name):
                raise ValueError(f"{path}: layer {name} has shape {first.shape}, arch expects {arch.layer_shape(name)}")
            weights[name] = (first, second)
    if cond_embed is None or set(weights) != set(ADAPTER_LAYERS):
        raise ValueError(f"{path}: incomplete base container")
    return DenoiserParams(arch=arch, weights=weights, cond_embed=cond_embed)


def load_adapter(path) -> LoraAdapter:
    layers = {}
    rank = None
    for layer_id, r, a, b in _read_records(path, _ADPT_MAGIC):
        name = _ID_LAYERS.get(layer_id)
        if name is None or name == "cond_embed" or r == 0:
            raise ValueError(f"{path}: unexpected record (id={layer_id}, rank={r})")
        layers[name] = (a, b)
        rank = r
    if rank is None:
        raise ValueError(f"{path}: empty adapter container")
    return LoraAdapter(layers=layers, rank=rank, scale=1.0)
