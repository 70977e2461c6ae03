"""Seeded synthetic multi-speaker corpus and the oracle metrics built on it.

Frames live in a log-spectral domain: each frame is the pattern of its token
plus the speaker's coloration ``log_gains @ FILTER_BANK`` plus small noise.
A speaker's embedding is its unit-normalised log-gain vector, so the fixed
filter bank can be inverted to read a speaker back out of any mel.

The generator and oracles are versioned through ``ORACLE_VERSION``; any change
to the constants below must bump it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

log = logging.getLogger(__name__)

ORACLE_VERSION = 1
VOCAB = 8
D_MEL = 16
D_S = 16
D_C = 16
RUN_LENGTH = 4
SIGMA_DATA = 0.05
GAIN_RANGE = (0.5, 2.0)
BUMP_HALF_WIDTH = 1.5
# Row norm of the token patterns; puts noisy ground truth near 99.3% content accuracy.
PATTERN_NORM = 0.21
_ORACLE_SEED = 9001


def _filter_bank(n_filters: int = D_S, n_bins: int = D_MEL, half_width: float = BUMP_HALF_WIDTH):
    centers = np.linspace(0.0, n_bins - 1, n_filters)
    dist = np.abs(np.arange(n_bins)[None, :] - centers[:, None]) / half_width
    return np.where(dist < 1.0, 0.5 * (1.0 + np.cos(np.pi * dist)), 0.0)


def _token_patterns():
    rng = np.random.default_rng([_ORACLE_SEED, ORACLE_VERSION, 0])
    p = rng.standard_normal((VOCAB, D_MEL))
    p -= p.mean(axis=0)
    return p / np.linalg.norm(p, axis=1, keepdims=True) * PATTERN_NORM


def _content_projection():
    rng = np.random.default_rng([_ORACLE_SEED, ORACLE_VERSION, 1])
    return rng.standard_normal((VOCAB, D_C))


FILTER_BANK = _filter_bank()  # [d_s, d_mel]
FILTER_PINV = np.linalg.pinv(FILTER_BANK.T)  # [d_s, d_mel]; maps coloration -> log gains
TOKEN_PATTERNS = _token_patterns()  # [V, d_mel], zero mean over the vocabulary
CONTENT_PROJ = _content_projection()  # [V, d_c]


class OracleError(ValueError):
    """Raised when an oracle metric is undefined for its input."""


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    log_gains: np.ndarray  # [d_s]
    heldout: bool = False

    @property
    def gains(self) -> np.ndarray:
        return np.exp(self.log_gains)

    @property
    def embedding(self) -> np.ndarray:
        return (self.log_gains / np.linalg.norm(self.log_gains)).astype(np.float32)

    @property
    def coloration(self) -> np.ndarray:
        return self.log_gains @ FILTER_BANK

    def prototype(self) -> np.ndarray:
        """Long-term average spectrum of a balanced noiseless utterance (raw domain)."""
        return self.coloration + TOKEN_PATTERNS.mean(axis=0)


@dataclass
class Utterance:
    speaker_id: int
    tokens: np.ndarray  # [n] ints in [0, VOCAB)
    mel: np.ndarray  # [n, d_mel] normalised
    content: np.ndarray  # [n, d_c]

    @property
    def token_string(self) -> str:
        return tokens_to_string(self.tokens)


@dataclass(frozen=True)
class Normalizer:
    """Global affine map between raw frames and the model's zero-mean unit-variance domain."""

    mean: float = 0.0
    std: float = 1.0

    def apply(self, raw):
        return (np.asarray(raw) - self.mean) / self.std

    def invert(self, mel):
        return np.asarray(mel, dtype=np.float64) * self.std + self.mean


@dataclass
class Corpus:
    seed: int
    speakers: list[SyntheticSpeaker]
    utterances: list[Utterance]
    norm: Normalizer
    frames: int
    warnings: list[str] = field(default_factory=list)
    version: int = ORACLE_VERSION

    def speaker(self, sid: int) -> SyntheticSpeaker:
        return self.speakers[sid]

    @property
    def train_speakers(self) -> list[SyntheticSpeaker]:
        return [s for s in self.speakers if not s.heldout]

    @property
    def heldout_speakers(self) -> list[SyntheticSpeaker]:
        return [s for s in self.speakers if s.heldout]

    def utterances_of(self, sid: int) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker_id == sid]

    def train_utterances(self) -> list[Utterance]:
        held = {s.id for s in self.heldout_speakers}
        return [u for u in self.utterances if u.speaker_id not in held]

    def speaker_similarity(self, mel, sid: int) -> float:
        return speaker_similarity(mel, self.speakers[sid], self.norm)

    def content_accuracy(self, mel, tokens) -> float:
        return content_accuracy(mel, tokens, self.norm)


# -- tokens and content -------------------------------------------------------


def balanced_tokens(n_frames: int, rng: np.random.Generator, run_length: int = RUN_LENGTH) -> np.ndarray:
    """Runs of ``run_length`` frames; each token fills an equal share when ``n_frames``
    is a multiple of ``VOCAB * run_length``."""
    n_runs = -(-n_frames // run_length)
    runs = rng.permutation(np.arange(n_runs) % VOCAB)
    return np.repeat(runs, run_length)[:n_frames]


def content_embedding(tokens) -> np.ndarray:
    return CONTENT_PROJ[np.asarray(tokens, dtype=int)].astype(np.float32)


def tokens_to_string(tokens) -> str:
    return "".join(str(int(t)) for t in tokens)


def tokens_from_string(text: str) -> np.ndarray:
    text = text.strip()
    if not text or any(ch not in "01234567"[:VOCAB] for ch in text):
        raise ValueError(f"token string must be digits 0-{VOCAB - 1}, one per frame")
    return np.array([int(ch) for ch in text], dtype=int)


def render(tokens, speaker: SyntheticSpeaker, noise: np.ndarray | None = None) -> np.ndarray:
    """Raw (unnormalised) frames for a token sequence spoken by ``speaker``."""
    raw = TOKEN_PATTERNS[np.asarray(tokens, dtype=int)] + speaker.coloration
    if noise is not None:
        raw = raw + noise
    return raw


# -- generation ---------------------------------------------------------------


def make_speaker(sid: int, seed: int, heldout: bool = False) -> SyntheticSpeaker:
    rng = np.random.default_rng([seed, 1_000_003, sid])
    lo, hi = np.log(GAIN_RANGE[0]), np.log(GAIN_RANGE[1])
    return SyntheticSpeaker(sid, rng.uniform(lo, hi, size=D_S), heldout)


def generate_corpus(
    n_speakers: int = 8,
    utterances_per_speaker: int = 20,
    frames_per_utterance: int = 64,
    seed: int = 0,
    n_heldout: int = 2,
) -> Corpus:
    """Deterministic corpus of ``n_speakers`` training and ``n_heldout`` held-out speakers."""
    if min(n_speakers, utterances_per_speaker, frames_per_utterance) < 1 or n_heldout < 0:
        raise ValueError("corpus counts must be positive")
    total = n_speakers + n_heldout
    speakers = [make_speaker(i, seed, heldout=i >= n_speakers) for i in range(total)]
    gains = np.stack([s.log_gains for s in speakers])
    if total > 1:
        d = np.linalg.norm(gains[:, None] - gains[None], axis=-1)
        if d[~np.eye(total, dtype=bool)].min() <= 0:
            raise RuntimeError("generated speakers are not distinct")

    raw = []
    for spk in speakers:
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, spk.id, u])
            tokens = balanced_tokens(frames_per_utterance, rng)
            noise = SIGMA_DATA * rng.standard_normal((frames_per_utterance, D_MEL))
            raw.append((spk.id, tokens, render(tokens, spk, noise)))

    train = np.concatenate([r for sid, _, r in raw if sid < n_speakers])
    norm = Normalizer(float(train.mean()), float(train.std()))
    utts = [
        Utterance(sid, tokens, norm.apply(r).astype(np.float32), content_embedding(tokens))
        for sid, tokens, r in raw
    ]
    warnings = []
    if n_speakers < 2:
        warnings.append("fewer than 2 training speakers: corpus cannot be used for pretraining")
        log.warning(warnings[-1])
    return Corpus(seed, speakers, utts, norm, frames_per_utterance, warnings)


# -- oracles ------------------------------------------------------------------


def speaker_signature(mel, norm: Normalizer = Normalizer()) -> np.ndarray:
    """Unit-norm speaker vector read from a mel's long-term average spectrum."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise OracleError("speaker signature needs a [n_frames, d_mel] sample with >= 1 frame")
    if not np.any(mel):
        raise OracleError("speaker similarity is undefined for an all-zero sample")
    avg = norm.invert(mel).mean(axis=0) - TOKEN_PATTERNS.mean(axis=0)
    sig = FILTER_PINV @ avg
    n = np.linalg.norm(sig)
    if n == 0:
        raise OracleError("sample has a zero speaker signature")
    return sig / n


def speaker_similarity(mel, target: SyntheticSpeaker | np.ndarray, norm: Normalizer = Normalizer()) -> float:
    """Cosine between the sample's speaker signature and the target embedding."""
    emb = target.embedding if isinstance(target, SyntheticSpeaker) else np.asarray(target)
    emb = emb / np.linalg.norm(emb)
    return float(np.clip(speaker_signature(mel, norm) @ emb, -1.0, 1.0))


def classify_frames(mel, norm: Normalizer = Normalizer()) -> np.ndarray:
    """Nearest token pattern per frame after removing the sample's own average frame."""
    raw = norm.invert(mel)
    centred = raw - raw.mean(axis=0, keepdims=True)
    patterns = TOKEN_PATTERNS - TOKEN_PATTERNS.mean(axis=0)
    d2 = ((centred[:, None, :] - patterns[None]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def content_accuracy(mel, tokens, norm: Normalizer = Normalizer()) -> float:
    tokens = np.asarray(tokens)
    mel = np.asarray(mel)
    if mel.shape[0] != tokens.shape[0]:
        raise ValueError(f"{mel.shape[0]} frames but {tokens.shape[0]} tokens")
    return float((classify_frames(mel, norm) == tokens).mean())


# -- storage ------------------------------------------------------------------


def save_utterance(path, utt: Utterance, norm: Normalizer, speaker: SyntheticSpeaker | None = None) -> None:
    meta = {
        "kind": "utterance",
        "speaker_id": utt.speaker_id,
        "tokens": utt.token_string,
        "norm": [norm.mean, norm.std],
        "oracle_version": ORACLE_VERSION,
    }
    if speaker is not None:
        meta["log_gains"] = speaker.log_gains.tolist()
        meta["heldout"] = speaker.heldout
    container.save(path, {"mel": utt.mel, "content": utt.content}, meta)


def load_utterance(path) -> tuple[Utterance, Normalizer, dict]:
    tensors, meta = container.load(path)
    if meta.get("kind") != "utterance":
        raise container.CorruptHeaderError(f"{path} is not an utterance file")
    tokens = tokens_from_string(meta["tokens"])
    utt = Utterance(int(meta["speaker_id"]), tokens, tensors["mel"], tensors["content"])
    return utt, Normalizer(*meta["norm"]), meta


def write_corpus(corpus: Corpus, directory) -> Path:
    """One container per utterance plus ``manifest.tsv`` (speaker, tokens, path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    counts: dict[int, int] = {}
    for utt in corpus.utterances:
        i = counts.get(utt.speaker_id, 0)
        counts[utt.speaker_id] = i + 1
        rel = f"spk{utt.speaker_id:03d}_utt{i:03d}.vtck"
        save_utterance(directory / rel, utt, corpus.norm, corpus.speaker(utt.speaker_id))
        lines.append(f"{utt.speaker_id}\t{utt.token_string}\t{rel}\n")
    manifest = directory / "manifest.tsv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def read_manifest(path) -> list[tuple[int, str, Path]]:
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, tokens, rel = line.split("\t")
        out.append((int(sid), tokens, path.parent / rel))
    return out
