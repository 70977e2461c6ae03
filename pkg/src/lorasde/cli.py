"""``lorasde`` command-line entry point.

Exit codes: 0 success, 1 runtime failure (integrity, incompatible or corrupt
files, divergence), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as C
from . import container, evaluation, lora
from . import guidance as G
from .analysis import IncompatibleCheckpointError, analyze
from .corpus import (
    OracleError,
    generate_corpus,
    load_utterance,
    content_embedding,
    speaker_signature,
    tokens_from_string,
    write_corpus,
)
from .score_model import ConfigurationError, Conditioning, load_checkpoint, save_checkpoint
from .training import (
    FINETUNE_FULL,
    FINETUNE_LORA,
    TrainConfig,
    TrainingDivergedError,
    finetune,
    finetune_full,
    pretrain,
    pretrain_config,
)

log = logging.getLogger("lorasde")


class UsageError(Exception):
    pass


def _run_config(path) -> C.RunConfig:
    return C.load(path) if path else C.RunConfig()


# flag -> (config section, key); flags left unset on the command line take
# their value from --config (or the built-in defaults).
_CONFIG_FLAGS = {
    "rank": ("lora", "rank"),
    "alpha": ("lora", "alpha"),
    "targets": ("lora", "targets"),
    "lr": ("finetune", "lr"),
    "iters": ("finetune", "iterations"),
    "strategy": ("guidance", "strategy"),
    "gamma": ("guidance", "gamma"),
    "alpha_infer": ("guidance", "alpha_infer"),
    "dt": ("guidance", "dt"),
    "n": ("eval", "n"),
    "sentences": ("eval", "sentences"),
}


def _fill_from_config(args) -> None:
    cfg = _run_config(getattr(args, "config", None))
    for flag, (section, key) in _CONFIG_FLAGS.items():
        if hasattr(args, flag) and getattr(args, flag) is None:
            setattr(args, flag, getattr(getattr(cfg, section), key))
    if getattr(args, "strategy", None) is not None and args.strategy not in G.CLI_NAMES:
        raise UsageError(f"unknown strategy {args.strategy!r}")


def _corpus_from_meta(meta: dict):
    layout = meta.get("corpus")
    if layout is None:
        raise UsageError("base checkpoint has no corpus metadata; was it written by `lorasde pretrain`?")
    return generate_corpus(
        layout["n_speakers"], layout["utterances_per_speaker"], layout["frames_per_utterance"], layout["seed"], layout["n_heldout"]
    )


def _log_path(out: Path) -> Path:
    return out.with_suffix(".log")


def _write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _strategy(args, default_alpha: float | None) -> G.GuidanceStrategy:
    kind = G.CLI_NAMES[args.strategy]
    if kind == G.LORA_SCALE_BOOST:
        if args.gamma is not None and args.gamma > 0:
            raise UsageError("--strategy alpha-boost cannot be combined with --gamma > 0")
        alpha = args.alpha_infer
        if alpha is None:
            if default_alpha is None:
                raise UsageError("--strategy alpha-boost needs --alpha-infer or an adapter")
            alpha = 2.0 * default_alpha
        return G.alpha_boost(alpha)
    if kind == G.NONE:
        return G.GuidanceStrategy(G.NONE, 0.0, args.alpha_infer)
    gamma = 1.0 if args.gamma is None else args.gamma
    return G.GuidanceStrategy(kind, gamma, args.alpha_infer)


# -- subcommands --------------------------------------------------------------


def cmd_corpus(args) -> int:
    cfg = _run_config(args.config)
    c = cfg.corpus
    seed = c.seed if args.seed is None else args.seed
    corpus = generate_corpus(c.n_speakers, c.utterances_per_speaker, c.frames_per_utterance, seed, c.n_heldout)
    manifest = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.utterances)} utterances, manifest {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args.config)
    if args.seed is not None:
        cfg.pretrain.seed = args.seed
    c, p = cfg.corpus, cfg.pretrain
    corpus = generate_corpus(c.n_speakers, c.utterances_per_speaker, c.frames_per_utterance, c.seed, c.n_heldout)
    tc = pretrain_config(
        lr=p.lr, iterations=p.iterations, batch_size=p.batch_size, uncond_prob=p.uncond_prob, seed=p.seed, clip_grad=p.clip_grad
    )
    out = Path(args.out)
    start = time.perf_counter()
    params, losses = pretrain(tc, corpus, model_config=cfg.model_config(), log_path=_log_path(out))
    elapsed = time.perf_counter() - start
    save_checkpoint(out, params, {"corpus": asdict(c), "run_config": cfg.to_dict(), "seed": p.seed})
    print(f"pretrained {params.num_params()} params for {len(losses)} steps in {elapsed:.1f}s; digest {params.digest()}")
    return 0


def cmd_finetune(args) -> int:
    base = Path(args.base)
    params, meta = load_checkpoint(base)
    ref, norm, ref_meta = load_utterance(args.ref)
    e_s = speaker_signature(ref.mel, norm).astype(np.float32)
    info = {"speaker_id": ref.speaker_id, "speaker_embedding": e_s.tolist(), "reference": Path(args.ref).name}
    if args.full:
        if not args.out:
            raise UsageError("--full requires --out")
        tc = TrainConfig(lr=args.lr, iterations=args.iters, seed=args.seed, mode=FINETUNE_FULL)
        out = Path(args.out)
        tuned, _ = finetune_full(tc, ref, e_s, params, log_path=_log_path(out))
        save_checkpoint(out, tuned, {**{k: v for k, v in meta.items() if k not in ("kind", "model_config", "tags")}, "finetuned": info})
        print(f"wrote fully fine-tuned checkpoint {out}")
        return 0
    if not args.adapter_out:
        raise UsageError("--adapter-out is required (or --full with --out)")
    if args.resume:
        adapters = lora.load_adapters(args.resume)
    else:
        targets = lora.POLICY_ALL if args.targets == "attn+others" else lora.POLICY_ATTENTION
        adapters = lora.init_adapters(params, targets, args.rank, args.alpha, np.random.default_rng([args.seed, ref.speaker_id]))
    tc = TrainConfig(lr=args.lr, iterations=args.iters, seed=args.seed, mode=FINETUNE_LORA)
    out = Path(args.adapter_out)
    adapters, losses = finetune(tc, ref, e_s, params, adapters, log_path=_log_path(out))
    lora.save_adapters(out, adapters, info)
    report = lora.param_accounting(params, adapters)
    print(
        f"wrote adapter {out}: rank {adapters.rank}, alpha {adapters.alpha:g}, {report.trainable} trainable "
        f"params ({100 * report.ratio:.2f}% of {report.total}); final loss {losses[-1] if losses else float('nan'):.4f}"
    )
    return 0


def cmd_sample(args) -> int:
    params, meta = load_checkpoint(args.base)
    adapters = lora.load_adapters(args.adapter) if args.adapter else None
    if adapters is not None:
        lora.check_digest(params, adapters)
    if adapters is None and G.CLI_NAMES[args.strategy] in (G.LORA_CFG, G.LORA_SCALE_BOOST):
        raise UsageError(f"--strategy {args.strategy} needs --adapter")
    strategy = _strategy(args, adapters.alpha if adapters else None)
    if args.speaker:
        ref, norm, _ = load_utterance(args.speaker)
        e_s = speaker_signature(ref.mel, norm)
    elif adapters is not None and "speaker_embedding" in adapters.metadata:
        e_s = np.asarray(adapters.metadata["speaker_embedding"])
    else:
        raise UsageError("no speaker: pass --speaker or an adapter carrying a speaker embedding")
    try:
        tokens = tokens_from_string(args.text_tokens)
    except ValueError as exc:
        raise UsageError(f"--text-tokens: {exc}") from exc
    cond = Conditioning(content_embedding(tokens), e_s.astype(np.float32))
    mel = G.generate(params, adapters, cond, strategy, len(tokens), args.dt, np.random.default_rng(args.seed))
    out_meta = {
        "kind": "mel",
        "tokens": args.text_tokens,
        "strategy": strategy.kind,
        "gamma": strategy.gamma_S,
        "alpha_infer": strategy.alpha_infer,
        "dt": args.dt,
        "seed": args.seed,
        "base_digest": params.digest(),
        "speaker_embedding": e_s.tolist(),
    }
    container.save(args.out, {"mel": mel}, out_meta)
    print(f"wrote {mel.shape[0]} frames to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    before, _ = load_checkpoint(args.before)
    after, _ = load_checkpoint(args.after)
    report = analyze(before, after)
    print(report.table())
    if args.jsonl:
        _write_records(args.jsonl, report.records())
    return 0


def _speakers(arg: str | None, corpus) -> list[int]:
    if not arg:
        return [s.id for s in corpus.heldout_speakers]
    try:
        ids = [int(x) for x in arg.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--speakers must be a comma-separated id list: {exc}") from exc
    bad = [i for i in ids if not 0 <= i < len(corpus.speakers)]
    if bad:
        raise UsageError(f"unknown speaker id {bad[0]}")
    return ids


def _emit(rows, args) -> None:
    print(evaluation.format_table(rows))
    if args.tsv:
        Path(args.tsv).write_text(evaluation.to_tsv(rows), encoding="utf-8")
    if args.jsonl:
        _write_records(args.jsonl, [r.record() for r in rows])


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.base)
    corpus = _corpus_from_meta(meta)
    speakers = _speakers(args.speakers, corpus)
    adapters = {}
    for path in args.adapter or []:
        ad = lora.load_adapters(path)
        lora.check_digest(params, ad)
        sid = ad.metadata.get("speaker_id")
        if sid is None:
            raise UsageError(f"{path} has no speaker_id metadata")
        adapters[int(sid)] = ad
    if adapters:
        missing = [s for s in speakers if s not in adapters]
        if missing:
            raise UsageError(f"no adapter for speaker {missing[0]}")
    alpha = next(iter(adapters.values())).alpha if adapters else None
    if not adapters and G.CLI_NAMES[args.strategy] in (G.LORA_CFG, G.LORA_SCALE_BOOST):
        raise UsageError(f"--strategy {args.strategy} needs --adapter")
    strategy = _strategy(args, alpha)
    rows = [evaluation.evaluate_ground_truth(corpus, speakers, args.sentences)]
    label = f"{args.strategy}" + ("" if adapters else " (zero-shot)")
    rows.append(
        evaluation.evaluate(params, corpus, speakers, strategy, adapters or None, label, args.n, args.sentences, args.dt, args.seed)
    )
    _emit(rows, args)
    return 0


def cmd_sweep(args) -> int:
    params, meta = load_checkpoint(args.base)
    corpus = _corpus_from_meta(meta)
    speakers = _speakers(args.speakers, corpus)
    if args.table == "2":
        groups = tuple(g.strip() for g in args.groups.split(","))
        unknown = [g for g in groups if g not in ("modules", "rank", "alpha", "schedule")]
        if unknown:
            raise UsageError(f"unknown sweep group {unknown[0]!r}")
        rows = evaluation.run_table2(params, corpus, speakers, evaluation.table2_settings(groups), args.n, args.sentences, args.seed)
    else:
        rows = evaluation.run_table3(
            params, corpus, speakers, None, args.n, args.sentences, args.seed, args.rank, args.alpha
        )
    rows.insert(0, evaluation.evaluate_ground_truth(corpus, speakers, args.sentences))
    _emit(rows, args)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorasde", description="One-shot speaker adaptation of a toy diffusion TTS decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("corpus", help="write the synthetic corpus to a directory")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_corpus)

    s = sub.add_parser("pretrain", help="train the multi-speaker base model")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fit adapters (or all weights) to one reference utterance")
    s.add_argument("--base", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--config", help="run config supplying defaults for unset flags")
    s.add_argument("--rank", type=int, help=f"adapter rank (default {lora.DEFAULT_RANK})")
    s.add_argument("--alpha", type=float, help=f"adapter scale (default {lora.DEFAULT_ALPHA:g})")
    s.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    s.add_argument("--iters", type=int, help="iterations (default 500)")
    s.add_argument("--targets", choices=("attn", "attn+others"), help="adapter targets (default attn)")
    s.add_argument("--adapter-out")
    s.add_argument("--resume", help="continue training an existing adapter file")
    s.add_argument("--full", action="store_true", help="fine-tune every decoder weight instead")
    s.add_argument("--out", help="output checkpoint for --full")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_finetune)

    def strategy_flags(s):
        s.add_argument("--config", help="run config supplying defaults for unset flags")
        s.add_argument("--strategy", choices=tuple(G.CLI_NAMES), help="default embed-cfg")
        s.add_argument("--gamma", type=float, help="guidance scale (default 1 for CFG kinds, 0 otherwise)")
        s.add_argument("--alpha-infer", type=float, help="adapter scale at sampling (default: training alpha)")
        s.add_argument("--dt", type=float, help="reverse-SDE step (default 0.02)")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="generate a mel for a token string")
    s.add_argument("--base", required=True)
    s.add_argument("--adapter")
    strategy_flags(s)
    s.add_argument("--text-tokens", required=True, help="one token digit per frame, e.g. 00001111")
    s.add_argument("--speaker", help="utterance file whose speaker signature is used as e_S")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("analyze", help="weight change ratios between two checkpoints")
    s.add_argument("--before", required=True)
    s.add_argument("--after", required=True)
    s.add_argument("--jsonl")
    s.set_defaults(func=cmd_analyze)

    def eval_flags(s):
        s.add_argument("--base", required=True)
        s.add_argument("--speakers", help="comma-separated ids (default: held-out speakers)")
        s.add_argument("--n", type=int, help=f"generations per sentence (default {evaluation.DEFAULT_REPEATS})")
        s.add_argument("--sentences", type=int, help=f"test sentences per speaker (default {evaluation.DEFAULT_SENTENCES})")
        s.add_argument("--tsv")
        s.add_argument("--jsonl")

    s = sub.add_parser("eval", help="oracle metrics for one configuration plus a ground-truth row")
    eval_flags(s)
    s.add_argument("--adapter", action="append", help="adapter file; repeat once per speaker")
    strategy_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="rank/alpha/schedule grid or strategy comparison")
    eval_flags(s)
    s.add_argument("--table", choices=("2", "3"), required=True)
    s.add_argument("--groups", default="modules,rank,alpha,schedule", help="grid groups for --table 2")
    s.add_argument("--rank", type=int, help="adapter rank for --table 3 (default 16)")
    s.add_argument("--alpha", type=float, help="adapter scale for --table 3 (default 8)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _fill_from_config(args)
        return args.func(args)
    except (UsageError, C.ConfigError, ConfigurationError) as exc:
        print(f"lorasde {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except lora.IntegrityError as exc:
        print(f"lorasde {args.command}: integrity error: {exc}", file=sys.stderr)
        return 1
    except (
        IncompatibleCheckpointError,
        container.ContainerError,
        TrainingDivergedError,
        OracleError,
        OSError,
    ) as exc:
        print(f"lorasde {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
