# %% [markdown]
# # One-shot adaptation with low-rank adapters
# Pretrain (or load) the base model, fit rank-16 adapters on the attention
# projections from one reference utterance of an unseen speaker, and compare.
# Set `DEMO_ITERS` to shorten pretraining.

# %%
import numpy as np
from _base import base_model

from lorasde import evaluation as E
from lorasde import guidance as G
from lorasde import lora
from lorasde.training import probe_loss

params, corpus = base_model()
sid = corpus.heldout_speakers[0].id
ref, e_s = E.reference_of(corpus, sid)

# %% [markdown]
# ## Parameter budget

# %%
ads = E.adapt_speaker(params, corpus, sid)
report = lora.param_accounting(params, ads)
print(f"trainable {report.trainable} of {report.total} ({100 * report.ratio:.1f}%)")
print("targets:", ads.targets)

# %% [markdown]
# ## Did fitting help?

# %%
print("probe loss, base   :", round(probe_loss(params, None, ref, e_s), 4))
print("probe loss, adapted:", round(probe_loss(params, ads, ref, e_s), 4))

zero = E.evaluate(params, corpus, [sid], G.no_guidance(), None, "zero-shot")
plain = E.evaluate(params, corpus, [sid], G.no_guidance(), {sid: ads}, "adapter")
guided = E.evaluate(params, corpus, [sid], G.default_strategy(), {sid: ads}, "adapter + embed_cfg")
print(E.format_table([E.evaluate_ground_truth(corpus, [sid]), zero, plain, guided]))
