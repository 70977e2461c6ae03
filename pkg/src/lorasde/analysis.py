"""Relative weight change between a base and a fully fine-tuned checkpoint."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .score_model import ATTENTION, E_PHI, OTHER, ModelParams

log = logging.getLogger(__name__)


class IncompatibleCheckpointError(ValueError):
    pass


def change_ratio(before, after) -> float:
    """``||after - before||_F / ||before||_F``; NaN when ``before`` is all zeros."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise IncompatibleCheckpointError(f"shape mismatch {before.shape} vs {after.shape}")
    denom = np.linalg.norm(before.ravel())
    if denom == 0:
        return math.nan
    return float(np.linalg.norm((after - before).ravel()) / denom)


@dataclass
class ChangeReport:
    ratios: dict[str, float]
    tags: dict[str, str]
    group_means: dict[str, float]
    undefined: list[str] = field(default_factory=list)

    def ranked(self) -> list[tuple[str, float]]:
        """Tensors with a defined ratio, descending by ratio, ties by name."""
        items = [(n, r) for n, r in self.ratios.items() if not math.isnan(r)]
        return sorted(items, key=lambda nr: (-nr[1], nr[0]))

    def records(self) -> list[dict]:
        out = [{"type": "group", "group": g, "mean_ratio": m} for g, m in self.group_means.items()]
        for name, ratio in self.ranked():
            out.append({"type": "tensor", "name": name, "group": self.tags[name], "ratio": ratio})
        for name in self.undefined:
            out.append({"type": "tensor", "name": name, "group": self.tags[name], "ratio": None})
        return out

    def table(self) -> str:
        lines = [f"{'group':<12}{'mean ratio':>14}"]
        for g, m in self.group_means.items():
            lines.append(f"{g:<12}{m:>14.6f}")
        lines.append("")
        lines.append(f"{'tensor':<32}{'group':<12}{'ratio':>12}")
        for name, ratio in self.ranked():
            lines.append(f"{name:<32}{self.tags[name]:<12}{ratio:>12.6f}")
        for name in self.undefined:
            lines.append(f"{name:<32}{self.tags[name]:<12}{'undefined':>12}")
        return "\n".join(lines)


def analyze(base: ModelParams, tuned: ModelParams) -> ChangeReport:
    """Per-tensor change ratios and unweighted means for attention vs other tensors.

    ``e_phi`` is reported in its own group since it is an embedding rather than
    a decoder weight.
    """
    for name in base.names():
        if name not in tuned:
            raise IncompatibleCheckpointError(f"tensor {name!r} missing from fine-tuned checkpoint")
        if base[name].shape != tuned[name].shape:
            raise IncompatibleCheckpointError(
                f"tensor {name!r} has shape {base[name].shape} vs {tuned[name].shape}"
            )
    extra = [n for n in tuned.names() if n not in base]
    if extra:
        raise IncompatibleCheckpointError(f"tensor {extra[0]!r} missing from base checkpoint")

    ratios, tags, undefined = {}, {}, []
    for name in base.names():
        tags[name] = E_PHI if name == E_PHI else base.tags[name]
        ratios[name] = change_ratio(base[name].data, tuned[name].data)
        if math.isnan(ratios[name]):
            undefined.append(name)
            log.warning("change ratio of %s is undefined (zero-norm base tensor)", name)

    means = {}
    for group in (ATTENTION, OTHER, E_PHI):
        vals = [ratios[n] for n in ratios if tags[n] == group and not math.isnan(ratios[n])]
        means[group] = float(np.mean(vals)) if vals else math.nan
    return ChangeReport(ratios, tags, means, undefined)
