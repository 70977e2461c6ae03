"""Low-rank adapters ``W + alpha * B @ A`` on selected linear weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import container
from .score_model import ATTENTION, ConfigurationError, ModelParams
from .tensor import Tensor

DEFAULT_RANK = 16
DEFAULT_ALPHA = 8.0

POLICY_ATTENTION = "attn"
POLICY_ALL = "attn+others"


class IntegrityError(RuntimeError):
    """Adapters do not belong to the given base checkpoint."""


@dataclass
class LoraAdapter:
    target: str
    A: Tensor  # [r, k]
    B: Tensor  # [d, r]
    rank: int
    alpha: float

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self, alpha: float | None = None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        return a * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))


@dataclass
class LoraAdapterSet:
    adapters: dict[str, LoraAdapter]
    rank: int
    alpha: float
    base_digest: str
    policy: str = POLICY_ATTENTION
    metadata: dict = field(default_factory=dict)

    @property
    def targets(self) -> list[str]:
        return list(self.adapters)

    def num_params(self) -> int:
        return sum(a.num_params for a in self.adapters.values())

    def trainable(self) -> list[Tensor]:
        out = []
        for ad in self.adapters.values():
            out.extend((ad.A, ad.B))
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.trainable():
            t.requires_grad = flag
            t.grad = None

    def copy(self) -> LoraAdapterSet:
        ads = {
            n: LoraAdapter(n, Tensor(a.A.data.copy()), Tensor(a.B.data.copy()), a.rank, a.alpha)
            for n, a in self.adapters.items()
        }
        return LoraAdapterSet(ads, self.rank, self.alpha, self.base_digest, self.policy, dict(self.metadata))


def resolve_targets(params: ModelParams, targets) -> list[str]:
    if targets in (POLICY_ATTENTION, "attention"):
        names = params.by_tag(ATTENTION)
    elif targets in (POLICY_ALL, "attention+others"):
        names = params.linear_weights()
    else:
        names = list(targets)
        unknown = [n for n in names if n not in params]
        if unknown:
            raise ConfigurationError(f"unknown adapter target {unknown[0]!r}")
    return names


def init_adapters(
    params: ModelParams,
    targets="attn",
    r: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
    rng: np.random.Generator | None = None,
) -> LoraAdapterSet:
    """Fresh adapters with A ~ N(0, 1/r) and B = 0, so the model is unchanged."""
    if r < 1:
        raise ConfigurationError(f"rank must be >= 1, got {r}")
    names = resolve_targets(params, targets)
    if not names:
        raise ConfigurationError(f"target policy {targets!r} selects no linear weights")
    rng = rng if rng is not None else np.random.default_rng(0)
    ads = {}
    for name in names:
        d, k = params[name].shape
        if r > min(d, k):
            raise ConfigurationError(f"rank {r} exceeds min(d, k) = {min(d, k)} for {name}")
        A = (rng.standard_normal((r, k)) / np.sqrt(r)).astype(np.float32)
        B = np.zeros((d, r), dtype=np.float32)
        ads[name] = LoraAdapter(name, Tensor(A), Tensor(B), r, float(alpha))
    policy = targets if isinstance(targets, str) else "custom"
    return LoraAdapterSet(ads, r, float(alpha), params.digest(), policy)


def check_digest(params: ModelParams, adapters: LoraAdapterSet, force: bool = False) -> None:
    if force:
        return
    digest = params.digest()
    if digest != adapters.base_digest:
        raise IntegrityError(
            f"adapter base digest {adapters.base_digest} does not match checkpoint {digest}"
        )


def merge(
    params: ModelParams,
    adapters: LoraAdapterSet,
    alpha_override: float | None = None,
    force: bool = False,
) -> ModelParams:
    """New params with ``W + alpha * B @ A`` folded into every target."""
    check_digest(params, adapters, force)
    merged = params.copy()
    for name, ad in adapters.adapters.items():
        w = merged.tensors[name]
        w.data = (w.data.astype(np.float64) + ad.delta(alpha_override)).astype(w.dtype)
    return merged


@dataclass(frozen=True)
class ParamReport:
    trainable: int
    total: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def param_accounting(params: ModelParams, adapters: LoraAdapterSet | None) -> ParamReport:
    trainable = 0
    if adapters is not None:
        for name in adapters.adapters:
            d, k = params[name].shape
            trainable += adapters.rank * (d + k)
    return ParamReport(trainable, params.num_params())


def adapter_count(shapes: Iterable[tuple[int, int]], r: int) -> int:
    """Trainable parameters of rank-``r`` adapters on weights of the given [d, k] shapes."""
    return sum(r * (d + k) for d, k in shapes)


# -- serialisation ------------------------------------------------------------


def save_adapters(path, adapters: LoraAdapterSet, extra: dict | None = None) -> None:
    tensors = {}
    for name, ad in adapters.adapters.items():
        tensors[f"{name}.A"] = ad.A.data
        tensors[f"{name}.B"] = ad.B.data
    meta = dict(adapters.metadata)
    meta.update(extra or {})
    meta.update(
        kind="adapter",
        rank=adapters.rank,
        alpha=adapters.alpha,
        targets=adapters.targets,
        policy=adapters.policy,
        base_digest=adapters.base_digest,
    )
    container.save(path, tensors, meta)


def load_adapters(path) -> LoraAdapterSet:
    tensors, meta = container.load(path)
    if meta.get("kind") != "adapter":
        raise container.CorruptHeaderError(f"{path} is not an adapter file")
    r, alpha = int(meta["rank"]), float(meta["alpha"])
    ads = {
        n: LoraAdapter(n, Tensor(tensors[f"{n}.A"]), Tensor(tensors[f"{n}.B"]), r, alpha)
        for n in meta["targets"]
    }
    extra = {k: v for k, v in meta.items() if k not in {"kind", "rank", "alpha", "targets", "policy", "base_digest"}}
    return LoraAdapterSet(ads, r, alpha, meta["base_digest"], meta.get("policy", POLICY_ATTENTION), extra)
