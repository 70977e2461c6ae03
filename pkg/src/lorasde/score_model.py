"""Conditional score network: a small pre-norm transformer over mel frames.

The network sees noisy mel frames, frame-aligned content embeddings, a
speaker embedding and the diffusion time.  Its raw output is divided by the
marginal noise scale, so the trainable part only has to predict unit-scale
noise while the function as a whole returns the score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import container
from . import tensor as T
from .diffusion import T_MIN, NoiseSchedule
from .tensor import Tensor

if TYPE_CHECKING:
    from .lora import LoraAdapterSet

log = logging.getLogger(__name__)

ATTENTION = "attention"
OTHER = "other"
ATTN_PROJECTIONS = ("q", "k", "v", "out")
E_PHI = "e_phi"


class ConfigurationError(ValueError):
    """Raised for inconsistent model or adapter configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_mel: int = 16
    hidden: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    d_c: int = 16
    d_s: int = 16
    ff_mult: int = 2
    time_dim: int = 32
    beta0: float = 0.05
    beta1: float = 20.0

    def validate(self) -> None:
        for key in ("d_mel", "hidden", "n_blocks", "n_heads", "d_c", "d_s", "ff_mult", "time_dim"):
            if getattr(self, key) <= 0:
                raise ConfigurationError(f"{key} must be positive, got {getattr(self, key)}")
        if self.hidden % self.n_heads:
            raise ConfigurationError(
                f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}"
            )
        if self.time_dim % 2:
            raise ConfigurationError("time_dim must be even")

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta0, self.beta1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Conditioning:
    """Frame-aligned content ``[.., n, d_c]`` and a speaker vector ``[.., d_s]``."""

    content: np.ndarray | Tensor
    speaker: np.ndarray | Tensor

    def with_speaker(self, speaker) -> Conditioning:
        return Conditioning(self.content, speaker)


@dataclass
class ModelParams:
    """Named tensors of the score network, each tagged ``attention`` or ``other``."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def by_tag(self, tag: str) -> list[str]:
        return [n for n in self.tensors if self.tags[n] == tag]

    def linear_weights(self) -> list[str]:
        return [n for n in self.tensors if n.endswith(".weight")]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy()) for n, t in self.tensors.items()},
            dict(self.tags),
        )

    def astype(self, dtype) -> ModelParams:
        return ModelParams(
            self.config,
            {n: Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()},
            dict(self.tags),
        )

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def digest(self) -> str:
        return container.fnv1a64_tensors({n: t.data for n, t in self.tensors.items()})


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden, cfg.hidden * cfg.ff_mult
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj.weight": (h, cfg.d_mel),
        "in_proj.bias": (h,),
        "content_proj.weight": (h, cfg.d_c),
        "speaker_proj.weight": (h, cfg.d_s),
        "time_proj.weight": (h, cfg.time_dim),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        shapes[f"{p}.attn_norm.gain"] = (h,)
        shapes[f"{p}.attn_norm.bias"] = (h,)
        for proj in ATTN_PROJECTIONS:
            shapes[f"{p}.attn.{proj}.weight"] = (h, h)
        shapes[f"{p}.ff_norm.gain"] = (h,)
        shapes[f"{p}.ff_norm.bias"] = (h,)
        shapes[f"{p}.ff.in.weight"] = (f, h)
        shapes[f"{p}.ff.in.bias"] = (f,)
        shapes[f"{p}.ff.out.weight"] = (h, f)
        shapes[f"{p}.ff.out.bias"] = (h,)
    shapes["out_norm.gain"] = (h,)
    shapes["out_norm.bias"] = (h,)
    shapes["out_proj.weight"] = (cfg.d_mel, h)
    shapes["out_proj.bias"] = (cfg.d_mel,)
    shapes[E_PHI] = (cfg.d_s,)
    return shapes


def _tag_for(name: str) -> str:
    parts = name.split(".")
    if len(parts) == 5 and parts[2] == "attn" and parts[3] in ATTN_PROJECTIONS:
        return ATTENTION
    return OTHER


def build_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Initialise parameters: N(0, 0.02) weights and e_phi, zero biases, unit gains."""
    if config.n_blocks < 1:
        raise ConfigurationError("n_blocks must be at least 1")
    config.validate()
    params = ModelParams(config)
    for name, shape in _param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (0.02 * rng.standard_normal(shape)).astype(np.float32)
        params.tensors[name] = Tensor(data, name=name)
        params.tags[name] = _tag_for(name)
    log.info("built score model with %d parameters", params.num_params())
    return params


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of ``build_model``."""
    h, f = cfg.hidden, cfg.hidden * cfg.ff_mult
    embed = (cfg.d_mel + 1) * h + cfg.d_c * h + cfg.d_s * h + cfg.time_dim * h
    block = 4 * h + 4 * h * h + (h + 1) * f + (f + 1) * h
    head = 2 * h + (h + 1) * cfg.d_mel
    return embed + cfg.n_blocks * block + head + cfg.d_s


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 t``; returns ``[B, dim]`` for ``t`` of shape ``[B]``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    arg = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _as_t(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def score_forward(
    params: ModelParams,
    adapters: LoraAdapterSet | None,
    x_t,
    t,
    cond: Conditioning,
    alpha: float | None = None,
) -> Tensor:
    """Score s(X_t | content, speaker) with optional low-rank adapters.

    ``x_t`` is ``[n, d_mel]`` or ``[B, n, d_mel]``; ``t`` is a scalar or ``[B]``.
    With adapters, every targeted linear computes ``W x + alpha * B (A x)``;
    ``alpha`` overrides the adapters' own scale.
    """
    cfg = params.config
    tp = params.tensors
    dtype = tp["in_proj.weight"].dtype

    if adapters is not None:
        missing = [n for n in adapters.adapters if n not in tp]
        if missing:
            raise ConfigurationError(f"adapter target {missing[0]!r} not found in params")
        scale = adapters.alpha if alpha is None else alpha
    else:
        scale = 0.0

    def lin(name: str, x: Tensor, bias: bool = True) -> Tensor:
        y = T.linear(x, tp[f"{name}.weight"], tp[f"{name}.bias"] if bias else None)
        if adapters is not None:
            ad = adapters.adapters.get(f"{name}.weight")
            if ad is not None:
                low = T.linear(T.linear(x, ad.A), ad.B)
                y = T.add(y, T.mul(low, scale))
        return y

    x = _as_t(x_t, dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, n_frames, _ = x.shape
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))

    content = _as_t(cond.content, dtype)
    speaker = _as_t(cond.speaker, dtype)
    if content.shape[-2] != n_frames:
        raise T.DimensionError(
            f"content has {content.shape[-2]} frames, mel has {n_frames}"
        )

    h = lin("in_proj", x)
    # one shared input bias; the summed conditioning projections carry none
    h = T.add(h, lin("content_proj", content, bias=False))
    spk = lin("speaker_proj", speaker.reshape(-1, cfg.d_s), bias=False).reshape(-1, 1, cfg.hidden)
    temb = Tensor(time_embedding(t_arr, cfg.time_dim).astype(dtype))
    temb = lin("time_proj", temb, bias=False).reshape(batch, 1, cfg.hidden)
    h = T.add(T.add(h, spk), temb)

    n_heads, d_head = cfg.n_heads, cfg.hidden // cfg.n_heads
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        a = T.layer_norm(h, tp[f"{p}.attn_norm.gain"], tp[f"{p}.attn_norm.bias"])
        q, k, v = (
            lin(f"{p}.attn.{proj}", a, bias=False)
            .reshape(batch, n_frames, n_heads, d_head)
            .permute(0, 2, 1, 3)
            for proj in ("q", "k", "v")
        )
        att = T.softmax(T.mul(T.matmul(q, k.T), 1.0 / math.sqrt(d_head)), axis=-1)
        ctx = T.matmul(att, v).permute(0, 2, 1, 3).reshape(batch, n_frames, cfg.hidden)
        h = T.add(h, lin(f"{p}.attn.out", ctx, bias=False))

        f = T.layer_norm(h, tp[f"{p}.ff_norm.gain"], tp[f"{p}.ff_norm.bias"])
        f = lin(f"{p}.ff.out", T.gelu(lin(f"{p}.ff.in", f)))
        h = T.add(h, f)

    h = T.layer_norm(h, tp["out_norm.gain"], tp["out_norm.bias"])
    out = lin("out_proj", h)
    sigma = cfg.schedule.noise_coeff(np.maximum(t_arr, T_MIN)).astype(dtype)
    score = T.div(out, sigma.reshape(batch, 1, 1))
    if squeeze:
        score = score.reshape(n_frames, cfg.d_mel)
    return score


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta.update(kind="checkpoint", model_config=params.config.to_dict(), tags=params.tags)
    container.save(path, {n: t.data for n, t in params.tensors.items()}, meta)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    tensors, meta = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise container.CorruptHeaderError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**meta["model_config"])
    params = ModelParams(cfg, {n: Tensor(a, name=n) for n, a in tensors.items()}, dict(meta["tags"]))
    return params, meta
