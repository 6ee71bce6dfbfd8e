"""histream: a desk-scale streaming autoregressive diffusion inference engine.

Generates latent video chunk by chunk with a dual-resolution KV cache, an
anchor-guided sliding window over cached frames, and an optional asymmetric
step schedule, backed by a toy flow-matching-trained transformer and a
benchmark harness that verifies the constant-memory / constant-latency
behavior.
"""

from .analysis import AttnStats, analytic_flops, attn_sink_stats, bench, frame_drop_ablation
from .cache import DualKVCache
from .config import AppConfig, default_config, dump_config, load_config
from .engine import GenerationRequest, GenerationResult, export_frames, generate
from .errors import (ConfigError, ContractError, HiStreamError, NumericError,
                     ShapeError, StateError, TensorIOError)
from .model import (ConditionVector, Denoiser, FlopCounter, LatentChunk, LayerKV,
                    ModelConfig)
from .numerics import downsample_avg2, gaussian, matmul, softmax_lastdim, upsample_bilinear2
from .report import RunReport
from .rng import Rng
from .rope import RopeConfig, ntk_rescaled_base, rope_rotate
from .schedule import DenoisePlan, make_plan, renoise_psi, shift_timestep
from .training import (Adam, SyntheticVideoSpec, TrainConfig, TrainResult, eps_loss,
                       fm_loss, synth_chunk, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AppConfig", "AttnStats", "ConditionVector", "ConfigError", "ContractError",
    "Denoiser", "DenoisePlan", "DualKVCache", "FlopCounter", "GenerationRequest",
    "GenerationResult", "HiStreamError", "LatentChunk", "LayerKV", "ModelConfig",
    "NumericError", "Rng", "RopeConfig", "RunReport", "ShapeError", "StateError",
    "SyntheticVideoSpec", "TensorIOError", "TrainConfig", "TrainResult",
    "analytic_flops", "attn_sink_stats", "bench", "default_config", "downsample_avg2",
    "dump_config", "eps_loss", "export_frames", "fm_loss", "frame_drop_ablation",
    "gaussian", "generate", "load_config", "make_plan", "matmul", "ntk_rescaled_base",
    "renoise_psi", "rope_rotate", "shift_timestep", "softmax_lastdim", "synth_chunk",
    "train", "upsample_bilinear2",
]
