"""Flow-matching training on synthetic latent videos.

The data motif is a Gaussian blob bouncing inside the frame, rendered into
channel 0; the condition vector encodes the blob's velocity, radius and start
position so conditioning is learnable. Chunks beyond the first train against
a teacher-forced cache built from the clean preceding chunks with the same
anchor + last-(M-1) retention used at inference, so the model learns to use
its cache. Gradients come from the model's hand-written backward; the cached
context is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import concat_kv, select_frames
from .errors import ConfigError, NumericError
from .model import (ConditionVector, Denoiser, LatentChunk, LayerKV, ModelConfig,
                    _pass, backward_from_displacement)
from .rng import Rng
from .schedule import renoise_psi, shift_timestep

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
EPS_LOSS_T_MIN = 0.05


@dataclass(frozen=True)
class SyntheticVideoSpec:
    frames: int = 9
    channels: int = 4
    resolution: tuple[int, int] = (8, 8)
    speed_range: tuple[float, float] = (0.3, 1.0)  # pixels per frame at base resolution
    radius_range: tuple[float, float] = (1.0, 2.0)
    margin: float = 1.5  # start-position clearance from the borders

    def __post_init__(self):
        if self.frames < 1 or self.channels < 1:
            raise ConfigError("video spec needs frames >= 1 and channels >= 1")
        if self.resolution[0] < 2 or self.resolution[1] < 2:
            raise ConfigError(f"resolution too small: {self.resolution}")

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "channels": self.channels,
            "resolution": list(self.resolution),
            "speed_range": list(self.speed_range),
            "radius_range": list(self.radius_range),
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticVideoSpec":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown video spec keys: {sorted(unknown)}")
        for key in ("resolution", "speed_range", "radius_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 2
    lr: float = 1e-3
    loss: str = "fm"  # "fm" (flow matching) or "eps" (noise prediction)
    shift: float = 5.0
    high_res_every: int = 8  # every k-th step trains at 2x resolution; 0 disables
    ema_alpha: float = 0.05

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.loss not in ("fm", "eps"):
            raise ConfigError(f"unknown loss mode {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch": self.batch, "lr": self.lr, "loss": self.loss,
            "shift": self.shift, "high_res_every": self.high_res_every, "ema_alpha": self.ema_alpha,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def _blob_params(spec: SyntheticVideoSpec, seed: int):
    r = Rng(seed).substream("blob")
    u = r.uniform(6)
    smin, smax = spec.speed_range
    speed = smin + u[0] * (smax - smin)
    angle = 2.0 * np.pi * u[1]
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    rmin, rmax = spec.radius_range
    radius = rmin + u[2] * (rmax - rmin)
    h, w = spec.resolution
    my = min(spec.margin, (h - 1) / 2.0)
    mx = min(spec.margin, (w - 1) / 2.0)
    cy = my + u[3] * ((h - 1) - 2 * my)
    cx = mx + u[4] * ((w - 1) - 2 * mx)
    return cx, cy, vx, vy, radius


def _reflect(p: float, limit: float) -> float:
    """Fold a coordinate into [0, limit] with mirror boundaries."""
    if limit <= 0:
        return 0.0
    period = 2.0 * limit
    q = np.mod(p, period)
    return float(q) if q <= limit else float(period - q)


def render_frame(spec: SyntheticVideoSpec, seed: int, frame: int, scale: int = 1) -> np.ndarray:
    """One [C, H*scale, W*scale] frame; a pure function of (seed, frame)."""
    cx, cy, vx, vy, radius = _blob_params(spec, seed)
    h, w = spec.resolution
    px = _reflect(cx + vx * frame, w - 1) * scale
    py = _reflect(cy + vy * frame, h - 1) * scale
    rad = radius * scale
    ys = np.arange(h * scale, dtype=np.float64)[:, None]
    xs = np.arange(w * scale, dtype=np.float64)[None, :]
    blob = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * rad * rad))
    out = np.zeros((spec.channels, h * scale, w * scale), dtype=np.float32)
    out[0] = blob.astype(np.float32)
    return out


def condition_for(spec: SyntheticVideoSpec, seed: int, d_cond: int) -> ConditionVector:
    cx, cy, vx, vy, radius = _blob_params(spec, seed)
    h, w = spec.resolution
    _, smax = spec.speed_range
    rmin, rmax = spec.radius_range
    feats = np.array([
        vx / max(smax, 1e-9),
        vy / max(smax, 1e-9),
        (radius - rmin) / max(rmax - rmin, 1e-9),
        cx / (w - 1),
        cy / (h - 1),
    ], dtype=np.float32)
    values = np.zeros(d_cond, dtype=np.float32)
    n = min(d_cond, feats.size)
    values[:n] = feats[:n]
    return ConditionVector(values)


def synth_chunk(spec: SyntheticVideoSpec, seed: int, chunk_index: int,
                chunk_frames: int, d_cond: int = 8, scale: int = 1) -> tuple[LatentChunk, ConditionVector]:
    """Deterministic M-frame slice of the synthetic video, plus its condition."""
    start = chunk_index * chunk_frames
    if start + chunk_frames > spec.frames:
        raise ConfigError(f"chunk {chunk_index} exceeds the {spec.frames}-frame video")
    frames = np.stack([render_frame(spec, seed, start + i, scale) for i in range(chunk_frames)])
    chunk = LatentChunk(frames, "low" if scale == 1 else "high", start)
    return chunk, condition_for(spec, seed, d_cond)


def _mse_and_grad(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def _to_pixels(frames: np.ndarray) -> np.ndarray:
    m, c, h, w = frames.shape
    return frames.transpose(0, 2, 3, 1).reshape(m * h * w, c)


def _retain_agsw(old: list[LayerKV] | None, new: list[LayerKV]) -> list[LayerKV]:
    """Anchor + last M-1 frames of the newest chunk, per layer."""
    if old is None:
        return new
    merged = []
    for prev, kv in zip(old, new):
        anchor = select_frames(prev, (prev.frame_indices[0],))
        merged.append(concat_kv(anchor, select_frames(kv, kv.frame_indices[1:])))
    return merged


def teacher_context(model: Denoiser, spec: SyntheticVideoSpec, video_seed: int,
                    chunk_index: int, scale: int = 1) -> list[LayerKV] | None:
    """Cache built from clean preceding chunks with inference-style retention."""
    retained: list[LayerKV] | None = None
    for j in range(chunk_index):
        chunk, _ = synth_sample(model.cfg, spec, video_seed, j, scale)
        kv = model.forward_kv(chunk, retained)
        retained = _retain_agsw(retained, kv)
    return retained


def synth_sample(cfg: ModelConfig, spec: SyntheticVideoSpec, video_seed: int,
                 chunk_index: int, scale: int = 1) -> tuple[LatentChunk, ConditionVector]:
    """synth_chunk at the model's chunk size and condition width."""
    return synth_chunk(spec, video_seed, chunk_index, cfg.chunk_frames, cfg.d_cond, scale)


def fm_loss(model: Denoiser, x0: LatentChunk, cond: ConditionVector, rng: Rng,
            shift: float = 5.0, context=None, want_grads: bool = True):
    """Flow-matching loss: MSE between the displacement head and x0 - x_t."""
    dtype = model.params["embed.w"].dtype
    clean = x0.frames.astype(dtype, copy=False)
    t = shift_timestep(rng.substream("t").uniform(), shift)
    eps = rng.substream("eps").standard_normal(clean.shape, dtype=dtype)
    x_t = renoise_psi(clean, eps, t)
    noisy = LatentChunk(x_t, x0.resolution, x0.start_frame)
    _, _, tape = _pass(model.params, model.cfg, noisy, t, cond, context, 1.0,
                       want_head=True, want_tape=True)
    target = _to_pixels(clean - x_t)
    loss, d_disp = _mse_and_grad(tape["head"]["disp"], target)
    if not want_grads:
        return loss, None
    grads = backward_from_displacement(model.params, model.cfg, tape, d_disp)
    return loss, grads


def eps_loss(model: Denoiser, x0: LatentChunk, cond: ConditionVector, rng: Rng,
             shift: float = 5.0, context=None, want_grads: bool = True):
    """Noise-prediction loss via the rectified-flow identity.

    eps_hat = (x_t - (1-t) * x0_hat) / t, derived from the displacement head;
    t below EPS_LOSS_T_MIN is resampled to keep the division stable.
    """
    dtype = model.params["embed.w"].dtype
    clean = x0.frames.astype(dtype, copy=False)
    t = 0.0
    for attempt in range(1000):
        t = shift_timestep(rng.substream("t", attempt).uniform(), shift)
        if t >= EPS_LOSS_T_MIN:
            break
    else:  # pragma: no cover - p(resample) is tiny per draw
        raise NumericError("could not draw t >= t_min")
    eps = rng.substream("eps").standard_normal(clean.shape, dtype=dtype)
    x_t = renoise_psi(clean, eps, t)
    noisy = LatentChunk(x_t, x0.resolution, x0.start_frame)
    _, _, tape = _pass(model.params, model.cfg, noisy, t, cond, context, 1.0,
                       want_head=True, want_tape=True)
    disp = tape["head"]["disp"]
    xt_pix = _to_pixels(x_t)
    ratio = (1.0 - t) / t
    eps_hat = xt_pix - np.asarray(ratio, dtype=disp.dtype) * disp
    loss, d_eps_hat = _mse_and_grad(eps_hat, _to_pixels(eps))
    if not want_grads:
        return loss, None
    d_disp = -np.asarray(ratio, dtype=disp.dtype) * d_eps_hat
    grads = backward_from_displacement(model.params, model.cfg, tape, d_disp)
    return loss, grads


class Adam:
    """Adam(beta1=0.9, beta2=0.999, eps=1e-8) over a named parameter dict."""

    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for key in params:
            g = grads[key]
            self.m[key] = ADAM_BETA1 * self.m[key] + (1.0 - ADAM_BETA1) * g
            self.v[key] = ADAM_BETA2 * self.v[key] + (1.0 - ADAM_BETA2) * (g * g)
            m_hat = self.m[key] / b1t
            v_hat = self.v[key] / b2t
            params[key] -= (self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(params[key].dtype)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    ema: list[float] = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [{"step": i, "loss": f"{l:.8f}", "ema_loss": f"{e:.8f}"}
                for i, (l, e) in enumerate(zip(self.losses, self.ema))]


def train(model: Denoiser, tcfg: TrainConfig, spec: SyntheticVideoSpec, seed: int) -> TrainResult:
    """Adam loop over synthetic chunks with teacher-forced cached context."""
    cfg = model.cfg
    if spec.resolution != cfg.low_res:
        raise ConfigError(f"video resolution {spec.resolution} != model low_res {cfg.low_res}")
    if spec.channels != cfg.latent_channels:
        raise ConfigError(f"video channels {spec.channels} != latent_channels {cfg.latent_channels}")
    n_video_chunks = spec.frames // cfg.chunk_frames
    if n_video_chunks < 1:
        raise ConfigError("video shorter than one chunk")

    root = Rng(seed)
    loss_fn = fm_loss if tcfg.loss == "fm" else eps_loss
    opt = Adam(model.params, tcfg.lr)
    result = TrainResult()
    ema = None

    for step in range(tcfg.steps):
        high = tcfg.high_res_every > 0 and step % tcfg.high_res_every == tcfg.high_res_every - 1
        scale = 2 if high else 1
        grads_sum = None
        loss_sum = 0.0
        for b in range(tcfg.batch):
            sample_rng = root.substream("step", step, "sample", b)
            video_seed = sample_rng.derive_seed("video")
            chunk_index = int(sample_rng.substream("chunk").uniform() * n_video_chunks)
            chunk, cond = synth_sample(cfg, spec, video_seed, chunk_index, scale)
            context = teacher_context(model, spec, video_seed, chunk_index, scale)
            loss, grads = loss_fn(model, chunk, cond, sample_rng.substream("noise"),
                                  shift=tcfg.shift, context=context)
            loss_sum += loss
            if grads_sum is None:
                grads_sum = grads
            else:
                for key in grads_sum:
                    grads_sum[key] += grads[key]
        mean_loss = loss_sum / tcfg.batch
        if not np.isfinite(mean_loss):
            raise NumericError(f"training diverged at step {step}")
        inv_b = 1.0 / tcfg.batch
        for key in grads_sum:
            grads_sum[key] *= np.asarray(inv_b, dtype=grads_sum[key].dtype)
        opt.step(model.params, grads_sum)
        ema = mean_loss if ema is None else ema + tcfg.ema_alpha * (mean_loss - ema)
        result.losses.append(mean_loss)
        result.ema.append(ema)
    return result
