"""The toy chunk-attention denoiser and its cache-embedding pass.

A latent chunk of M frames is flattened into per-pixel tokens (1x1 patches).
Each transformer block applies adaptive layer norm driven by the (timestep,
condition) embedding, then attention where queries come from the current
chunk and keys/values are [cached context || current chunk] (full attention
within the chunk; causality across chunks holds because the cache only ever
contains the past). The output head predicts a displacement d and the clean
estimate is x0_hat = x_noisy + d, which makes the head exactly the
flow-matching regressor for x0 - x_t.

forward() optionally records attention probabilities, counts matmul FLOPs,
and keeps a tape for the hand-written backward used in training.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import hstn
from .errors import ConfigError, ContractError, ShapeError
from .numerics import softmax_lastdim
from .rng import Rng
from .rope import RopeConfig, apply_rope, apply_rope_inverse, rope_tables

LOW, HIGH = "low", "high"
RESOLUTIONS = (LOW, HIGH)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    latent_channels: int = 4
    low_res: tuple[int, int] = (8, 8)
    chunk_frames: int = 3
    d_cond: int = 8
    t_embed_dim: int = 64
    mlp_ratio: int = 4
    attn_scale_first_chunk: float = 2.0
    attn_scale_rest: float = 1.0
    rope: RopeConfig = None  # default derived from head_dim in __post_init__

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.chunk_frames < 2:
            raise ConfigError(f"chunk_frames must be >= 2, got {self.chunk_frames}")
        if self.t_embed_dim % 2:
            raise ConfigError(f"t_embed_dim must be even, got {self.t_embed_dim}")
        if self.low_res[0] % 2 or self.low_res[1] % 2:
            raise ConfigError(f"low_res must be even so high res downsamples back, got {self.low_res}")
        if self.rope is None:
            object.__setattr__(self, "rope", RopeConfig.default(self.head_dim))
        if self.rope.head_dim != self.head_dim:
            raise ConfigError(f"rope head_dim {self.rope.head_dim} != model head_dim {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def high_res(self) -> tuple[int, int]:
        return (2 * self.low_res[0], 2 * self.low_res[1])

    def resolution_hw(self, tag: str) -> tuple[int, int]:
        if tag == LOW:
            return self.low_res
        if tag == HIGH:
            return self.high_res
        raise ConfigError(f"unknown resolution tag {tag!r}")

    def tokens_per_frame(self, tag: str) -> int:
        h, w = self.resolution_hw(tag)
        return h * w

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "latent_channels": self.latent_channels,
            "low_res": list(self.low_res),
            "chunk_frames": self.chunk_frames,
            "d_cond": self.d_cond,
            "t_embed_dim": self.t_embed_dim,
            "mlp_ratio": self.mlp_ratio,
            "attn_scale_first_chunk": self.attn_scale_first_chunk,
            "attn_scale_rest": self.attn_scale_rest,
            "rope": {
                "base": self.rope.base,
                "axis_split": list(self.rope.axis_split),
                "ntk_scale": list(self.rope.ntk_scale),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        rope_data = dict(data.pop("rope", {}))
        known = {f for f in cls.__dataclass_fields__ if f != "rope"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        rope_known = {"base", "axis_split", "ntk_scale"}
        rope_unknown = set(rope_data) - rope_known
        if rope_unknown:
            raise ConfigError(f"unknown rope config keys: {sorted(rope_unknown)}")
        for key in ("low_res",):
            if key in data:
                data[key] = tuple(data[key])
        cfg = cls(**{k: v for k, v in data.items()})
        if rope_data:
            rope = RopeConfig(
                head_dim=cfg.head_dim,
                axis_split=tuple(rope_data.get("axis_split", cfg.rope.axis_split)),
                base=float(rope_data.get("base", cfg.rope.base)),
                ntk_scale=tuple(rope_data.get("ntk_scale", cfg.rope.ntk_scale)),
            )
            cfg = replace(cfg, rope=rope)
        return cfg


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class ConditionVector:
    values: np.ndarray

    @classmethod
    def zeros(cls, d_cond: int) -> "ConditionVector":
        return cls(np.zeros(d_cond, dtype=np.float32))

    def validate(self, d_cond: int):
        v = np.asarray(self.values)
        if v.shape != (d_cond,):
            raise ContractError(f"condition vector shape {v.shape} != ({d_cond},)")
        if not np.all(np.isfinite(v)):
            raise ContractError("condition vector must be finite")


@dataclass
class LatentChunk:
    """An M-frame block of latent tokens at one resolution."""

    frames: np.ndarray  # [M, C, H, W]
    resolution: str
    start_frame: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_indices(self) -> tuple[int, ...]:
        return tuple(range(self.start_frame, self.start_frame + self.n_frames))

    def validate(self, cfg: ModelConfig):
        if self.resolution not in RESOLUTIONS:
            raise ContractError(f"unknown resolution tag {self.resolution!r}")
        m, c, h, w = self.frames.shape
        if m != cfg.chunk_frames or c != cfg.latent_channels:
            raise ShapeError(f"chunk shape {self.frames.shape} mismatches config (M={cfg.chunk_frames}, C={cfg.latent_channels})")
        if (h, w) != cfg.resolution_hw(self.resolution):
            raise ShapeError(f"chunk {h}x{w} is not the {self.resolution} resolution {cfg.resolution_hw(self.resolution)}")


@dataclass
class LayerKV:
    """Post-RoPE keys and values of one layer's chunk tokens."""

    k: np.ndarray  # [frames, tokens_per_frame, n_heads, head_dim]
    v: np.ndarray
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        if self.k.shape != self.v.shape:
            raise ShapeError(f"key/value extents differ: {self.k.shape} vs {self.v.shape}")
        if len(self.frame_indices) != self.k.shape[0]:
            raise ShapeError("frame index count mismatches stored frames")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ContractError(f"frame indices must be strictly increasing, got {self.frame_indices}")

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes


class FlopCounter:
    """Exact matmul/attention FLOP tally (2*m*k*n per product)."""

    def __init__(self):
        self.total = 0

    def add(self, m: int, k: int, n: int):
        self.total += 2 * m * k * n


def timestep_features(t: float, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of the scaled timestep (t in [0,1] mapped to [0,1000])."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = 1000.0 * float(t) * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)]).astype(dtype)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _silu_grad(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu(u):
    tw = np.tanh(_GELU_C * (u + _GELU_A * u * u * u))
    return 0.5 * u * (1.0 + tw), tw


def _gelu_grad(u, tw):
    inner = _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)
    return 0.5 * (1.0 + tw) + 0.5 * u * (1.0 - tw * tw) * inner


_LN_EPS = 1e-6


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    return xc * inv, inv


def _layer_norm_grad(dy, y, inv):
    mean_dy = dy.mean(axis=-1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=-1, keepdims=True)
    return inv * (dy - mean_dy - y * mean_dyy)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """Fresh weights: normal(0, 0.02) linears, zero biases and modulations.

    The output head is deliberately non-zero so an untrained model's output
    still depends on its attention context.
    """
    rng = Rng(seed).substream("init")
    d, c = cfg.d_model, cfg.latent_channels
    hidden = cfg.mlp_ratio * d
    cond_in = cfg.t_embed_dim + cfg.d_cond

    def w(name, shape):
        return rng.substream(name).standard_normal(shape, dtype=np.float64).astype(dtype) * dtype(0.02)

    params = {
        "embed.w": w("embed.w", (c, d)),
        "embed.b": np.zeros(d, dtype=dtype),
        "cond.w1": w("cond.w1", (cond_in, d)),
        "cond.b1": np.zeros(d, dtype=dtype),
        "cond.w2": w("cond.w2", (d, d)),
        "cond.b2": np.zeros(d, dtype=dtype),
        "final.mod.w": np.zeros((d, 2 * d), dtype=dtype),
        "final.mod.b": np.zeros(2 * d, dtype=dtype),
        "head.w": w("head.w", (d, c)),
        "head.b": np.zeros(c, dtype=dtype),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        params[f"{p}.mod.w"] = np.zeros((d, 4 * d), dtype=dtype)
        params[f"{p}.mod.b"] = np.zeros(4 * d, dtype=dtype)
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{proj}"] = w(f"{p}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{bias}"] = np.zeros(d, dtype=dtype)
        params[f"{p}.mlp.w1"] = w(f"{p}.mlp.w1", (d, hidden))
        params[f"{p}.mlp.b1"] = np.zeros(hidden, dtype=dtype)
        params[f"{p}.mlp.w2"] = w(f"{p}.mlp.w2", (hidden, d))
        params[f"{p}.mlp.b2"] = np.zeros(d, dtype=dtype)
    return params


def token_positions(cfg: ModelConfig, chunk: LatentChunk) -> np.ndarray:
    """(frame, y, x) per token, frame-major then row-major spatial."""
    h, w = cfg.resolution_hw(chunk.resolution)
    m = cfg.chunk_frames
    f, y, x = np.meshgrid(
        np.arange(chunk.start_frame, chunk.start_frame + m),
        np.arange(h),
        np.arange(w),
        indexing="ij",
    )
    return np.stack([f.ravel(), y.ravel(), x.ravel()], axis=1)


def _flatten_context(context, layer: int, n_heads: int, head_dim: int):
    kv = context[layer]
    s0, p = kv.k.shape[0] * kv.k.shape[1], kv.k.shape[1]
    return kv.k.reshape(s0, n_heads, head_dim), kv.v.reshape(s0, n_heads, head_dim)


def _pass(params: dict, cfg: ModelConfig, chunk: LatentChunk, t: float, cond: ConditionVector,
          context, attn_scale: float, *, want_head=True, want_kv=False, want_tape=False,
          flops: FlopCounter | None = None, attn_recorder=None):
    """Shared transformer pass for forward, forward_kv and training."""
    chunk.validate(cfg)
    cond = cond if cond is not None else ConditionVector.zeros(cfg.d_cond)
    cond.validate(cfg.d_cond)
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"timestep {t} outside [0, 1]")
    context = context or []
    dtype = params["embed.w"].dtype
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    m = cfg.chunk_frames
    h_sp, w_sp = cfg.resolution_hw(chunk.resolution)
    p_tok = h_sp * w_sp
    n_tok = m * p_tok

    if context:
        if len(context) != cfg.n_layers:
            raise ContractError(f"context holds {len(context)} layers, model has {cfg.n_layers}")
        if context[0].k.shape[1] != p_tok:
            raise ContractError(
                f"context resolution ({context[0].k.shape[1]} tokens/frame) mismatches chunk ({p_tok})")
        ctx_frames = context[0].frame_indices
    else:
        ctx_frames = ()

    pixels = chunk.frames.transpose(0, 2, 3, 1).reshape(n_tok, cfg.latent_channels).astype(dtype, copy=False)
    x = pixels @ params["embed.w"] + params["embed.b"]
    if flops:
        flops.add(n_tok, cfg.latent_channels, d)

    positions = token_positions(cfg, chunk)
    scale_sp = (1.0, 1.0) if chunk.resolution == LOW else cfg.rope.ntk_scale
    cos, sin = rope_tables(cfg.rope, positions, scale_sp, dtype=dtype)

    t_feat = timestep_features(t, cfg.t_embed_dim, dtype)
    cv = np.concatenate([t_feat, np.asarray(cond.values, dtype=dtype)])
    z1 = cv @ params["cond.w1"] + params["cond.b1"]
    h1, sig1 = _silu(z1)
    c_emb = h1 @ params["cond.w2"] + params["cond.b2"]
    sc, sig_c = _silu(c_emb)
    if flops:
        flops.add(1, cv.shape[0], d)
        flops.add(1, d, d)

    logit_scale = attn_scale / np.sqrt(hd)
    kv_out = []
    layers_tape = []

    for i in range(cfg.n_layers):
        pre = f"blocks.{i}"
        mod = sc @ params[f"{pre}.mod.w"] + params[f"{pre}.mod.b"]
        if flops:
            flops.add(1, d, 4 * d)
        shift1, scale1, shift2, scale2 = np.split(mod, 4)

        ln1, inv1 = _layer_norm(x)
        hmod = ln1 * (1.0 + scale1) + shift1
        q = hmod @ params[f"{pre}.attn.wq"] + params[f"{pre}.attn.bq"]
        k = hmod @ params[f"{pre}.attn.wk"] + params[f"{pre}.attn.bk"]
        v = hmod @ params[f"{pre}.attn.wv"] + params[f"{pre}.attn.bv"]
        if flops:
            flops.add(n_tok, d, d)
            flops.add(n_tok, d, d)
            flops.add(n_tok, d, d)
        q = apply_rope(q.reshape(n_tok, nh, hd), cos, sin)
        k = apply_rope(k.reshape(n_tok, nh, hd), cos, sin)
        v = v.reshape(n_tok, nh, hd)

        if context:
            ck, cvv = _flatten_context(context, i, nh, hd)
            k_all = np.concatenate([ck.astype(dtype, copy=False), k], axis=0)
            v_all = np.concatenate([cvv.astype(dtype, copy=False), v], axis=0)
        else:
            k_all, v_all = k, v
        s_all = k_all.shape[0]

        qh = q.transpose(1, 0, 2)
        kh = k_all.transpose(1, 0, 2)
        vh = v_all.transpose(1, 0, 2)
        logits = (qh @ kh.transpose(0, 2, 1)) * dtype.type(logit_scale)
        if flops:
            flops.add(n_tok, s_all, d)
        probs = softmax_lastdim(logits)
        if attn_recorder is not None:
            attn_recorder.record(i, probs, chunk.frame_indices, ctx_frames + chunk.frame_indices, p_tok)
        o_heads = probs @ vh
        if flops:
            flops.add(n_tok, s_all, d)
        o_pre = o_heads.transpose(1, 0, 2).reshape(n_tok, d)
        attn_out = o_pre @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]
        if flops:
            flops.add(n_tok, d, d)
        x_mid = x + attn_out

        ln2, inv2 = _layer_norm(x_mid)
        h2 = ln2 * (1.0 + scale2) + shift2
        u = h2 @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"]
        a, tw = _gelu(u)
        mlp_out = a @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"]
        if flops:
            flops.add(n_tok, d, cfg.mlp_ratio * d)
            flops.add(n_tok, cfg.mlp_ratio * d, d)
        x_new = x_mid + mlp_out

        if want_kv:
            kv_out.append(LayerKV(
                k.reshape(m, p_tok, nh, hd).copy(),
                v.reshape(m, p_tok, nh, hd).copy(),
                chunk.frame_indices,
            ))
        if want_tape:
            layers_tape.append({
                "x_in": x, "ln1": ln1, "inv1": inv1, "hmod": hmod,
                "qh": qh, "kh": kh, "vh": vh, "probs": probs, "o_pre": o_pre,
                "x_mid": x_mid, "ln2": ln2, "inv2": inv2, "h2": h2,
                "u": u, "tw": tw, "a": a,
                "scale1": scale1, "scale2": scale2, "s_ctx": s_all - n_tok,
            })
        x = x_new

    out_chunk = None
    head_tape = None
    if want_head:
        modf = sc @ params["final.mod.w"] + params["final.mod.b"]
        if flops:
            flops.add(1, d, 2 * d)
        shift_f, scale_f = np.split(modf, 2)
        lnf, invf = _layer_norm(x)
        hf = lnf * (1.0 + scale_f) + shift_f
        disp = hf @ params["head.w"] + params["head.b"]
        if flops:
            flops.add(n_tok, d, cfg.latent_channels)
        disp_frames = disp.reshape(m, h_sp, w_sp, cfg.latent_channels).transpose(0, 3, 1, 2)
        out_chunk = LatentChunk(chunk.frames + disp_frames, chunk.resolution, chunk.start_frame)
        head_tape = {"lnf": lnf, "invf": invf, "hf": hf, "scale_f": scale_f, "disp": disp}

    tape = None
    if want_tape:
        tape = {
            "pixels": pixels, "cos": cos, "sin": sin,
            "cv": cv, "z1": z1, "sig1": sig1, "h1": h1,
            "c_emb": c_emb, "sc": sc, "sig_c": sig_c,
            "layers": layers_tape, "head": head_tape,
            "logit_scale": logit_scale, "x_final": x,
            "n_tok": n_tok, "shape": (m, h_sp, w_sp),
        }
    return out_chunk, kv_out, tape


def backward_from_displacement(params: dict, cfg: ModelConfig, tape: dict, d_disp: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(displacement).

    d_disp is [tokens, channels] in the same layout the head produced. The
    cached context is treated as a constant (teacher-forced), so no gradient
    flows into it.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    nh, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    n_tok = tape["n_tok"]
    sc = tape["sc"]
    d_sc = np.zeros_like(sc)

    head = tape["head"]
    if head is None:
        raise ContractError("tape was recorded without the output head")
    grads["head.w"] += head["hf"].T @ d_disp
    grads["head.b"] += d_disp.sum(axis=0)
    d_hf = d_disp @ params["head.w"].T
    d_lnf = d_hf * (1.0 + head["scale_f"])
    d_scale_f = (d_hf * head["lnf"]).sum(axis=0)
    d_shift_f = d_hf.sum(axis=0)
    d_modf = np.concatenate([d_shift_f, d_scale_f])
    grads["final.mod.w"] += np.outer(sc, d_modf)
    grads["final.mod.b"] += d_modf
    d_sc += params["final.mod.w"] @ d_modf
    dx = _layer_norm_grad(d_lnf, head["lnf"], head["invf"])

    for i in reversed(range(cfg.n_layers)):
        pre = f"blocks.{i}"
        lt = tape["layers"][i]

        # mlp branch
        d_mlp = dx
        grads[f"{pre}.mlp.w2"] += lt["a"].T @ d_mlp
        grads[f"{pre}.mlp.b2"] += d_mlp.sum(axis=0)
        d_a = d_mlp @ params[f"{pre}.mlp.w2"].T
        d_u = d_a * _gelu_grad(lt["u"], lt["tw"])
        grads[f"{pre}.mlp.w1"] += lt["h2"].T @ d_u
        grads[f"{pre}.mlp.b1"] += d_u.sum(axis=0)
        d_h2 = d_u @ params[f"{pre}.mlp.w1"].T
        d_ln2 = d_h2 * (1.0 + lt["scale2"])
        d_scale2 = (d_h2 * lt["ln2"]).sum(axis=0)
        d_shift2 = d_h2.sum(axis=0)
        dx_mid = dx + _layer_norm_grad(d_ln2, lt["ln2"], lt["inv2"])

        # attention branch
        d_attn_out = dx_mid
        grads[f"{pre}.attn.wo"] += lt["o_pre"].T @ d_attn_out
        grads[f"{pre}.attn.bo"] += d_attn_out.sum(axis=0)
        d_o_pre = d_attn_out @ params[f"{pre}.attn.wo"].T
        d_oh = d_o_pre.reshape(n_tok, nh, hd).transpose(1, 0, 2)
        probs = lt["probs"]
        d_probs = d_oh @ lt["vh"].transpose(0, 2, 1)
        d_vh = probs.transpose(0, 2, 1) @ d_oh
        d_logits = (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True)) * probs
        d_qh = (d_logits @ lt["kh"]) * probs.dtype.type(tape["logit_scale"])
        d_kh = (d_logits.transpose(0, 2, 1) @ lt["qh"]) * probs.dtype.type(tape["logit_scale"])

        s_ctx = lt["s_ctx"]
        d_k_cur = d_kh[:, s_ctx:, :].transpose(1, 0, 2)
        d_v_cur = d_vh[:, s_ctx:, :].transpose(1, 0, 2)
        d_q_cur = d_qh.transpose(1, 0, 2)
        d_q_flat = apply_rope_inverse(d_q_cur, tape["cos"], tape["sin"]).reshape(n_tok, d)
        d_k_flat = apply_rope_inverse(d_k_cur, tape["cos"], tape["sin"]).reshape(n_tok, d)
        d_v_flat = d_v_cur.reshape(n_tok, d)

        hmod = lt["hmod"]
        grads[f"{pre}.attn.wq"] += hmod.T @ d_q_flat
        grads[f"{pre}.attn.bq"] += d_q_flat.sum(axis=0)
        grads[f"{pre}.attn.wk"] += hmod.T @ d_k_flat
        grads[f"{pre}.attn.bk"] += d_k_flat.sum(axis=0)
        grads[f"{pre}.attn.wv"] += hmod.T @ d_v_flat
        grads[f"{pre}.attn.bv"] += d_v_flat.sum(axis=0)
        d_hmod = (d_q_flat @ params[f"{pre}.attn.wq"].T
                  + d_k_flat @ params[f"{pre}.attn.wk"].T
                  + d_v_flat @ params[f"{pre}.attn.wv"].T)
        d_ln1 = d_hmod * (1.0 + lt["scale1"])
        d_scale1 = (d_hmod * lt["ln1"]).sum(axis=0)
        d_shift1 = d_hmod.sum(axis=0)
        dx_in = dx_mid + _layer_norm_grad(d_ln1, lt["ln1"], lt["inv1"])

        d_mod = np.concatenate([d_shift1, d_scale1, d_shift2, d_scale2])
        grads[f"{pre}.mod.w"] += np.outer(sc, d_mod)
        grads[f"{pre}.mod.b"] += d_mod
        d_sc += params[f"{pre}.mod.w"] @ d_mod
        dx = dx_in

    grads["embed.w"] += tape["pixels"].T @ dx
    grads["embed.b"] += dx.sum(axis=0)

    d_c = d_sc * _silu_grad(tape["c_emb"], tape["sig_c"])
    grads["cond.w2"] += np.outer(tape["h1"], d_c)
    grads["cond.b2"] += d_c
    d_h1 = params["cond.w2"] @ d_c
    d_z1 = d_h1 * _silu_grad(tape["z1"], tape["sig1"])
    grads["cond.w1"] += np.outer(tape["cv"], d_z1)
    grads["cond.b1"] += d_z1
    return grads


class Denoiser:
    """Weights plus config; the engine's G_theta and G_theta^KV."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Denoiser":
        return cls(cfg, init_params(cfg, seed, dtype))

    def tokenize(self, chunk: LatentChunk):
        """Embed a chunk into its token sequence; returns (tokens, positions)."""
        chunk.validate(self.cfg)
        n = chunk.frames.shape[0] * self.cfg.tokens_per_frame(chunk.resolution)
        pixels = chunk.frames.transpose(0, 2, 3, 1).reshape(n, self.cfg.latent_channels)
        tokens = pixels.astype(self.params["embed.w"].dtype) @ self.params["embed.w"] + self.params["embed.b"]
        return tokens, token_positions(self.cfg, chunk)

    def forward(self, chunk: LatentChunk, t: float, cond: ConditionVector | None,
                context=None, attn_scale: float = 1.0, *, flops: FlopCounter | None = None,
                attn_recorder=None, return_kv: bool = False):
        out, kv, _ = _pass(self.params, self.cfg, chunk, t, cond, context, attn_scale,
                           want_head=True, want_kv=return_kv, flops=flops,
                           attn_recorder=attn_recorder)
        return (out, kv) if return_kv else out

    def forward_kv(self, chunk: LatentChunk, context=None, *, flops: FlopCounter | None = None):
        """Cache-embedding pass at t = 0; returns per-layer keys/values only."""
        _, kv, _ = _pass(self.params, self.cfg, chunk, 0.0, None, context, 1.0,
                         want_head=False, want_kv=True, flops=flops)
        return kv

    def save(self, dirpath) -> None:
        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "model.json"), "w") as fh:
            json.dump(self.cfg.to_dict(), fh, indent=2, sort_keys=True)
        hstn.write_dir(dirpath, self.params)

    @classmethod
    def load(cls, dirpath) -> "Denoiser":
        with open(os.path.join(dirpath, "model.json")) as fh:
            cfg = ModelConfig.from_dict(json.load(fh))
        params = hstn.read_dir(dirpath)
        expected = set(init_params(cfg, seed=0))
        missing = expected - set(params)
        if missing:
            raise ConfigError(f"checkpoint {dirpath} is missing tensors: {sorted(missing)[:4]} ...")
        extra = set(params) - expected
        if extra:
            raise ConfigError(f"checkpoint {dirpath} holds unexpected tensors: {sorted(extra)[:4]} ...")
        return cls(cfg, params)
