"""Per-speaker adaptation and oracle evaluation, plus the ablation grids.

Every generation for speaker ``s``, sentence ``k`` and repeat ``j`` draws its
prior and per-step noise from ``default_rng([seed, s, k])`` (batched over
``j``), so different strategies see the same noise.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import guidance as G
from . import lora
from .corpus import Corpus, speaker_signature
from .guidance import GuidanceStrategy
from .lora import LoraAdapterSet
from .score_model import Conditioning, ModelParams
from .training import FINETUNE_LORA, TrainConfig, finetune

DEFAULT_REPEATS = 5
DEFAULT_SENTENCES = 5


@dataclass
class EvalResult:
    label: str
    similarity: float
    accuracy: float
    n: int
    similarities: list[float] = field(default_factory=list, repr=False)
    accuracies: list[float] = field(default_factory=list, repr=False)
    params: dict = field(default_factory=dict)

    @property
    def similarity_se(self) -> float:
        s = np.asarray(self.similarities)
        return float(s.std(ddof=1) / np.sqrt(len(s))) if len(s) > 1 else float("nan")

    def record(self) -> dict:
        out = {"label": self.label, "similarity": self.similarity, "accuracy": self.accuracy, "n": self.n}
        out.update(self.params)
        return out


def threads() -> int:
    try:
        return max(1, int(os.environ.get("VTK_THREADS", "1")))
    except ValueError:
        return 1


def reference_of(corpus: Corpus, sid: int):
    """The first utterance of a speaker is its adaptation reference."""
    ref = corpus.utterances_of(sid)[0]
    return ref, speaker_signature(ref.mel, corpus.norm).astype(np.float32)


def test_sentences(corpus: Corpus, sid: int, n_sentences: int = DEFAULT_SENTENCES):
    utts = corpus.utterances_of(sid)[1:]
    if len(utts) < n_sentences:
        raise ValueError(f"speaker {sid} has only {len(utts)} test sentences")
    return utts[:n_sentences]


def adapt_speaker(
    params: ModelParams,
    corpus: Corpus,
    sid: int,
    rank: int = lora.DEFAULT_RANK,
    alpha: float = lora.DEFAULT_ALPHA,
    targets: str = lora.POLICY_ATTENTION,
    lr: float = 1e-4,
    iterations: int = 500,
    seed: int = 0,
) -> LoraAdapterSet:
    ref, e_s = reference_of(corpus, sid)
    init = lora.init_adapters(params, targets, rank, alpha, np.random.default_rng([seed, sid]))
    cfg = TrainConfig(lr=lr, iterations=iterations, seed=seed, mode=FINETUNE_LORA)
    adapters, _ = finetune(cfg, ref, e_s, params, init)
    adapters.metadata.update(speaker_id=sid, speaker_embedding=e_s.tolist())
    return adapters


def generate_for_speaker(
    params: ModelParams,
    adapters: LoraAdapterSet | None,
    corpus: Corpus,
    sid: int,
    strategy: GuidanceStrategy,
    repeats: int = DEFAULT_REPEATS,
    n_sentences: int = DEFAULT_SENTENCES,
    dt: float = 0.02,
    seed: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(mel, tokens)`` pairs for ``repeats`` generations of each test sentence."""
    _, e_s = reference_of(corpus, sid)
    out = []
    for k, utt in enumerate(test_sentences(corpus, sid, n_sentences)):
        cond = Conditioning(utt.content, e_s)
        rng = np.random.default_rng([seed, sid, k])
        mels = G.generate(params, adapters, cond, strategy, len(utt.tokens), dt, rng, batch=repeats)
        out.extend((m, utt.tokens) for m in mels)
    return out


def score_samples(corpus: Corpus, sid: int, samples) -> tuple[list[float], list[float]]:
    sims = [corpus.speaker_similarity(m, sid) for m, _ in samples]
    accs = [corpus.content_accuracy(m, tok) for m, tok in samples]
    return sims, accs


def evaluate(
    params: ModelParams,
    corpus: Corpus,
    speakers: list[int],
    strategy: GuidanceStrategy,
    adapters: dict[int, LoraAdapterSet] | None = None,
    label: str = "",
    repeats: int = DEFAULT_REPEATS,
    n_sentences: int = DEFAULT_SENTENCES,
    dt: float = 0.02,
    seed: int = 0,
) -> EvalResult:
    """Mean oracle similarity and content accuracy over all speakers' generations."""

    def one(sid):
        ad = adapters.get(sid) if adapters else None
        samples = generate_for_speaker(params, ad, corpus, sid, strategy, repeats, n_sentences, dt, seed)
        return score_samples(corpus, sid, samples)

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        results = list(pool.map(one, speakers))
    sims = [s for r in results for s in r[0]]
    accs = [a for r in results for a in r[1]]
    return EvalResult(
        label or strategy.kind,
        float(np.mean(sims)),
        float(np.mean(accs)),
        len(sims),
        sims,
        accs,
        {"strategy": strategy.kind, "gamma": strategy.gamma_S, "alpha_infer": strategy.alpha_infer},
    )


def evaluate_ground_truth(corpus: Corpus, speakers: list[int], n_sentences: int = DEFAULT_SENTENCES) -> EvalResult:
    sims, accs = [], []
    for sid in speakers:
        samples = [(u.mel, u.tokens) for u in test_sentences(corpus, sid, n_sentences)]
        s, a = score_samples(corpus, sid, samples)
        sims += s
        accs += a
    return EvalResult("ground_truth", float(np.mean(sims)), float(np.mean(accs)), len(sims), sims, accs)


# -- ablation grids -----------------------------------------------------------

TABLE2_MODULES = (lora.POLICY_ATTENTION, lora.POLICY_ALL)
TABLE2_RANKS = (2, 4, 8, 16, 32)
TABLE2_ALPHAS = (1.0, 2.0, 4.0, 8.0)
TABLE2_SCHEDULES = ((2e-5, 500), (2e-5, 2000), (1e-4, 500), (1e-4, 2000))


@dataclass(frozen=True)
class FinetuneSetting:
    group: str
    rank: int = lora.DEFAULT_RANK
    alpha: float = lora.DEFAULT_ALPHA
    targets: str = lora.POLICY_ATTENTION
    lr: float = 1e-4
    iterations: int = 500

    @property
    def label(self) -> str:
        return f"{self.group}:targets={self.targets},r={self.rank},alpha={self.alpha:g},lr={self.lr:g},iters={self.iterations}"


def table2_settings(groups=("modules", "rank", "alpha", "schedule")) -> list[FinetuneSetting]:
    rows = []
    if "modules" in groups:
        rows += [FinetuneSetting("modules", targets=t) for t in TABLE2_MODULES]
    if "rank" in groups:
        rows += [FinetuneSetting("rank", rank=r) for r in TABLE2_RANKS]
    if "alpha" in groups:
        rows += [FinetuneSetting("alpha", alpha=a) for a in TABLE2_ALPHAS]
    if "schedule" in groups:
        rows += [FinetuneSetting("schedule", lr=lr, iterations=it) for lr, it in TABLE2_SCHEDULES]
    return rows


def run_table2(
    params: ModelParams,
    corpus: Corpus,
    speakers: list[int],
    settings: list[FinetuneSetting] | None = None,
    repeats: int = DEFAULT_REPEATS,
    n_sentences: int = DEFAULT_SENTENCES,
    seed: int = 0,
) -> list[EvalResult]:
    """Fine-tune per setting and speaker, then sample with the default strategy."""
    settings = settings if settings is not None else table2_settings()
    cache: dict[FinetuneSetting, dict[int, LoraAdapterSet]] = {}
    rows = []
    for s in settings:
        key = FinetuneSetting("", s.rank, s.alpha, s.targets, s.lr, s.iterations)
        if key not in cache:
            cache[key] = {
                sid: adapt_speaker(params, corpus, sid, s.rank, s.alpha, s.targets, s.lr, s.iterations, seed)
                for sid in speakers
            }
        res = evaluate(params, corpus, speakers, G.default_strategy(), cache[key], s.label, repeats, n_sentences, seed=seed)
        res.params.update(asdict(s))
        rows.append(res)
    return rows


def table3_strategies(alpha: float = lora.DEFAULT_ALPHA) -> list[tuple[str, GuidanceStrategy]]:
    return [
        ("w/o strengthening", G.no_guidance()),
        ("lora scale 2.0*alpha", G.alpha_boost(2.0 * alpha)),
        ("embed_cfg gamma=1", GuidanceStrategy(G.EMBED_CFG, 1.0)),
        ("embed_cfg gamma=2", GuidanceStrategy(G.EMBED_CFG, 2.0)),
        ("lora_cfg gamma=1", GuidanceStrategy(G.LORA_CFG, 1.0)),
        ("lora_cfg gamma=2", GuidanceStrategy(G.LORA_CFG, 2.0)),
        ("full_cfg gamma=1", GuidanceStrategy(G.FULL_CFG, 1.0)),
        ("full_cfg gamma=2", GuidanceStrategy(G.FULL_CFG, 2.0)),
    ]


def run_table3(
    params: ModelParams,
    corpus: Corpus,
    speakers: list[int],
    adapters: dict[int, LoraAdapterSet] | None = None,
    repeats: int = DEFAULT_REPEATS,
    n_sentences: int = DEFAULT_SENTENCES,
    seed: int = 0,
    rank: int = lora.DEFAULT_RANK,
    alpha: float = lora.DEFAULT_ALPHA,
) -> list[EvalResult]:
    """Strategy comparison with shared noise, plus a zero-shot row (base model, e_S only)."""
    if adapters is None:
        adapters = {sid: adapt_speaker(params, corpus, sid, rank, alpha, seed=seed) for sid in speakers}
    alpha = next(iter(adapters.values())).alpha
    rows = [evaluate(params, corpus, speakers, G.no_guidance(), None, "zero-shot (no adapter)", repeats, n_sentences, seed=seed)]
    for label, strat in table3_strategies(alpha):
        rows.append(evaluate(params, corpus, speakers, strat, adapters, label, repeats, n_sentences, seed=seed))
    return rows


def format_table(rows: list[EvalResult]) -> str:
    lines = [f"{'configuration':<64}{'similarity':>12}{'accuracy':>10}{'n':>5}"]
    for r in rows:
        lines.append(f"{r.label:<64}{r.similarity:>12.4f}{r.accuracy:>10.4f}{r.n:>5}")
    return "\n".join(lines)


def to_tsv(rows: list[EvalResult]) -> str:
    lines = ["label\tsimilarity\taccuracy\tn"]
    lines += [f"{r.label}\t{r.similarity:.6f}\t{r.accuracy:.6f}\t{r.n}" for r in rows]
    return "\n".join(lines) + "\n"
