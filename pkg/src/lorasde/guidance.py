"""Speaker-information strengthening at sampling time.

Classifier-free guidance extrapolates the adapted conditional score away from
one of three unconditional scores::

    s_hat = s_cond + gamma * (s_cond - s_uncon)

    embed_cfg : s_uncon = adapted model, speaker replaced by e_phi
    lora_cfg  : s_uncon = base model (adapters removed), real speaker
    full_cfg  : s_uncon = base model, e_phi

``lora_scale_boost`` instead samples with a larger adapter scale and no
guidance.  The strategies are mutually exclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import score_model
from .diffusion import sample as sde_sample
from .lora import LoraAdapterSet
from .score_model import E_PHI, ConfigurationError, Conditioning, ModelParams

NONE = "none"
EMBED_CFG = "embed_cfg"
LORA_CFG = "lora_cfg"
FULL_CFG = "full_cfg"
LORA_SCALE_BOOST = "lora_scale_boost"

CFG_KINDS = (EMBED_CFG, LORA_CFG, FULL_CFG)
KINDS = (NONE, *CFG_KINDS, LORA_SCALE_BOOST)

# command-line spellings
CLI_NAMES = {
    "none": NONE,
    "embed-cfg": EMBED_CFG,
    "lora-cfg": LORA_CFG,
    "full-cfg": FULL_CFG,
    "alpha-boost": LORA_SCALE_BOOST,
}


@dataclass(frozen=True)
class GuidanceStrategy:
    kind: str = EMBED_CFG
    gamma_S: float = 1.0
    alpha_infer: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown strategy {self.kind!r}")
        if self.gamma_S < 0:
            raise ConfigurationError("gamma_S must be non-negative")
        if self.kind == LORA_SCALE_BOOST and self.gamma_S > 0:
            raise ConfigurationError("lora_scale_boost cannot be combined with gamma_S > 0")

    @property
    def evaluations_per_step(self) -> int:
        return 2 if self.kind in CFG_KINDS else 1


def default_strategy() -> GuidanceStrategy:
    """Embedding guidance with gamma_S = 1 and the training adapter scale."""
    return GuidanceStrategy(EMBED_CFG, 1.0, None)


def no_guidance() -> GuidanceStrategy:
    return GuidanceStrategy(NONE, 0.0, None)


def alpha_boost(alpha_infer: float) -> GuidanceStrategy:
    return GuidanceStrategy(LORA_SCALE_BOOST, 0.0, alpha_infer)


def combine(s_cond: np.ndarray, s_uncon: np.ndarray, gamma_S: float) -> np.ndarray:
    return s_cond + gamma_S * (s_cond - s_uncon)


def guided_score(
    strategy: GuidanceStrategy,
    params: ModelParams,
    adapters: LoraAdapterSet | None,
    x_t,
    t,
    cond: Conditioning,
    e_phi: np.ndarray | None = None,
) -> np.ndarray:
    """Guided score for one reverse step; ``cond.speaker`` holds e_S.

    Removing adapters means evaluating the base network directly, so the base
    params are never merged or modified.
    """
    if e_phi is None:
        e_phi = params[E_PHI].data
    alpha = strategy.alpha_infer
    s_cond = score_model.score_forward(params, adapters, x_t, t, cond, alpha=alpha).data
    if strategy.kind in (NONE, LORA_SCALE_BOOST):
        return s_cond
    if strategy.kind == EMBED_CFG:
        uncond = cond.with_speaker(np.broadcast_to(e_phi, np.shape(cond.speaker)))
        s_uncon = score_model.score_forward(params, adapters, x_t, t, uncond, alpha=alpha).data
    elif strategy.kind == LORA_CFG:
        s_uncon = score_model.score_forward(params, None, x_t, t, cond).data
    else:
        uncond = cond.with_speaker(np.broadcast_to(e_phi, np.shape(cond.speaker)))
        s_uncon = score_model.score_forward(params, None, x_t, t, uncond).data
    return combine(s_cond, s_uncon, strategy.gamma_S)


def generate(
    params: ModelParams,
    adapters: LoraAdapterSet | None,
    cond: Conditioning,
    strategy: GuidanceStrategy,
    n_frames: int,
    dt: float = 0.02,
    rng: np.random.Generator | None = None,
    batch: int | None = None,
) -> np.ndarray:
    """Sample mel frames ``[n_frames, d_mel]`` (or ``[batch, n_frames, d_mel]``)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = (n_frames, params.config.d_mel) if batch is None else (batch, n_frames, params.config.d_mel)

    def score_fn(x, t):
        return guided_score(strategy, params, adapters, x, t, cond)

    return sde_sample(score_fn, params.config.schedule, shape, dt, rng)
