import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lorasde.corpus import generate_corpus
from lorasde.score_model import ModelConfig, build_model

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY = ModelConfig(d_mel=4, hidden=8, n_blocks=1, n_heads=2, d_c=3, d_s=5, ff_mult=2, time_dim=4)


@pytest.fixture
def tiny_params():
    return build_model(TINY, np.random.default_rng(0))


@pytest.fixture
def toy_params():
    return build_model(ModelConfig(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(n_speakers=3, utterances_per_speaker=6, frames_per_utterance=32, seed=3, n_heldout=1)


# -- acceptance report --------------------------------------------------------
# Criterion tests register each part's outcome here; the terminal summary
# prints one PASS/FAIL line per criterion.

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record_part(number: int, part: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.setdefault(number, []).append((part, ok, detail))


def acceptance_lines() -> list[str]:
    lines = []
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'}{' (' + d + ')' if d else ''}" for name, good, d in parts)
        lines.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return lines


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines():
        terminalreporter.write_line(line)
