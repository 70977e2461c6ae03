"""Shared helper: load a cached base model or pretrain one."""

import os
from pathlib import Path

import numpy as np

from lorasde.corpus import generate_corpus
from lorasde.score_model import load_checkpoint, save_checkpoint
from lorasde.training import pretrain, pretrain_config

OUT = Path(os.environ.get("DEMO_OUT", Path(__file__).parent / "out"))
ITERS = int(os.environ.get("DEMO_ITERS", "3000"))


def base_model():
    OUT.mkdir(exist_ok=True)
    corpus = generate_corpus()
    path = OUT / f"base_{ITERS}.vtck"
    if path.exists():
        params, _ = load_checkpoint(path)
        return params, corpus
    print(f"pretraining for {ITERS} iterations (about 20 ms each)...")
    params, losses = pretrain(pretrain_config(iterations=ITERS), corpus)
    print(f"loss: first 100 mean {np.mean(losses[:100]):.3f}, last 100 mean {np.mean(losses[-100:]):.3f}")
    save_checkpoint(path, params, {"corpus": {"n_speakers": 8, "n_heldout": 2, "utterances_per_speaker": 20, "frames_per_utterance": 64, "seed": 0}})
    return params, corpus
