"""Adam, multi-speaker pretraining, and adapter / full fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus, Utterance, speaker_signature
from .diffusion import score_matching_loss
from .lora import LoraAdapterSet, check_digest
from .score_model import E_PHI, Conditioning, ModelConfig, ModelParams, build_model, score_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE_LORA = "finetune_lora"
FINETUNE_FULL = "finetune_full"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    uncond_prob: float = 0.25
    mode: str = FINETUNE_LORA
    clip_grad: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError(f"uncond_prob must be in [0, 1], got {self.uncond_prob}")
        if self.mode not in (PRETRAIN, FINETUNE_LORA, FINETUNE_FULL):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and lr > 0 required")


def pretrain_config(**kw) -> TrainConfig:
    base = dict(lr=1e-3, iterations=3000, batch_size=16, uncond_prob=0.25, mode=PRETRAIN)
    base.update(kw)
    return TrainConfig(**base)


class Adam:
    """Adam without weight decay; moments are kept in float64."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def _clip(params: Sequence[Tensor], max_norm: float | None) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)


class LossLog:
    """Append-only ``step<TAB>loss`` lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.values: list[float] = []
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def append(self, step: int, loss: float) -> None:
        self.values.append(loss)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(f"{step}\t{loss:.6g}\n")


def smoothed(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Moving average over full windows only (the window shrinks for short series)."""
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def _check_finite(loss: Tensor, step: int, t) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at step {step} (t={np.round(t, 4)})")
    return value


def utterance_embeddings(corpus: Corpus, utts: Sequence[Utterance]) -> np.ndarray:
    return np.stack([speaker_signature(u.mel, corpus.norm) for u in utts]).astype(np.float32)


def pretrain(
    config: TrainConfig,
    corpus: Corpus,
    params: ModelParams | None = None,
    model_config: ModelConfig | None = None,
    log_path=None,
) -> tuple[ModelParams, list[float]]:
    """Train the score model on all training speakers.

    Each example's speaker embedding is swapped for the learnable ``e_phi``
    with probability ``config.uncond_prob``.
    """
    if len(corpus.train_speakers) < 2:
        raise ValueError("pretraining needs at least 2 training speakers")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = build_model(model_config or ModelConfig(), rng)
    schedule = params.config.schedule
    utts = corpus.train_utterances()
    mels = np.stack([u.mel for u in utts])
    contents = np.stack([u.content for u in utts])
    embeds = utterance_embeddings(corpus, utts)

    params.set_trainable(True)
    trainable = list(params.tensors.values())
    opt = Adam(trainable, config.lr)
    losses = LossLog(log_path)
    e_phi = params[E_PHI]
    for step in range(config.iterations):
        idx = rng.integers(0, len(utts), size=config.batch_size)
        keep = (rng.random(config.batch_size) >= config.uncond_prob).astype(np.float32)[:, None]
        speaker = T.add(T.mul(Tensor(1.0 - keep), e_phi), embeds[idx] * keep)
        cond = Conditioning(contents[idx], speaker)
        t = rng.uniform(1e-4, schedule.T, size=config.batch_size)
        eps = rng.standard_normal(mels[idx].shape).astype(np.float32)
        opt.zero_grad()
        loss = score_matching_loss(
            lambda x, tt: score_forward(params, None, x, tt, cond), schedule, mels[idx], t=t, eps=eps
        )
        value = _check_finite(loss, step, t)
        loss.backward()
        _clip(trainable, config.clip_grad)
        opt.step()
        losses.append(step, value)
    params.set_trainable(False)
    return params, losses.values


def _reference_arrays(reference: Utterance):
    return reference.mel[None], reference.content[None]


def finetune(
    config: TrainConfig,
    reference: Utterance,
    speaker: np.ndarray,
    params: ModelParams,
    adapters: LoraAdapterSet,
    log_path=None,
) -> tuple[LoraAdapterSet, list[float]]:
    """Fit only the adapter matrices to one reference utterance with its own ``speaker``."""
    check_digest(params, adapters)
    rng = np.random.default_rng(config.seed)
    schedule = params.config.schedule
    params.set_trainable(False)
    adapters = adapters.copy()
    adapters.set_trainable(True)
    opt = Adam(adapters.trainable(), config.lr)
    x0, content = _reference_arrays(reference)
    cond = Conditioning(content, np.asarray(speaker, dtype=np.float32)[None])
    losses = LossLog(log_path)
    for step in range(config.iterations):
        t = rng.uniform(1e-4, schedule.T, size=1)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        opt.zero_grad()
        loss = score_matching_loss(
            lambda x, tt: score_forward(params, adapters, x, tt, cond), schedule, x0, t=t, eps=eps
        )
        value = _check_finite(loss, step, t)
        loss.backward()
        _clip(adapters.trainable(), config.clip_grad)
        opt.step()
        losses.append(step, value)
    adapters.set_trainable(False)
    return adapters, losses.values


def finetune_full(
    config: TrainConfig,
    reference: Utterance,
    speaker: np.ndarray,
    params: ModelParams,
    log_path=None,
) -> tuple[ModelParams, list[float]]:
    """Fine-tune every decoder tensor (``e_phi`` excluded) on one reference."""
    rng = np.random.default_rng(config.seed)
    schedule = params.config.schedule
    tuned = params.copy()
    trainable = [t for n, t in tuned.tensors.items() if n != E_PHI]
    for t in trainable:
        t.requires_grad = True
    opt = Adam(trainable, config.lr)
    x0, content = _reference_arrays(reference)
    cond = Conditioning(content, np.asarray(speaker, dtype=np.float32)[None])
    losses = LossLog(log_path)
    for step in range(config.iterations):
        t = rng.uniform(1e-4, schedule.T, size=1)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        opt.zero_grad()
        loss = score_matching_loss(
            lambda x, tt: score_forward(tuned, None, x, tt, cond), schedule, x0, t=t, eps=eps
        )
        value = _check_finite(loss, step, t)
        loss.backward()
        _clip(trainable, config.clip_grad)
        opt.step()
        losses.append(step, value)
    tuned.set_trainable(False)
    return tuned, losses.values


def probe_loss(
    params: ModelParams,
    adapters: LoraAdapterSet | None,
    reference: Utterance,
    speaker: np.ndarray,
    n_probes: int = 32,
    seed: int = 12345,
) -> float:
    """Score-matching loss on a fixed set of (t, eps) draws for one utterance."""
    rng = np.random.default_rng(seed)
    schedule = params.config.schedule
    t = np.linspace(0.02, 1.0, n_probes)
    x0 = np.repeat(reference.mel[None], n_probes, axis=0)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    cond = Conditioning(reference.content, np.asarray(speaker, dtype=np.float32))
    loss = score_matching_loss(
        lambda x, tt: score_forward(params, adapters, x, tt, cond), schedule, x0, t=t, eps=eps
    )
    return loss.item()


DEFAULT_FINETUNE = TrainConfig(lr=1e-4, iterations=500, mode=FINETUNE_LORA)
DEFAULT_FULL_FINETUNE = TrainConfig(lr=1e-4, iterations=500, mode=FINETUNE_FULL)
