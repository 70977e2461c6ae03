# %% [markdown]
# # Which weights move during full fine-tuning?
# Fine-tune every decoder weight on one reference and compare per-tensor
# relative change.  Attention projections move the most, which is why the
# adapters go there.

# %%
from _base import base_model

from lorasde import evaluation as E
from lorasde.analysis import analyze
from lorasde.training import DEFAULT_FULL_FINETUNE, finetune_full

params, corpus = base_model()
sid = corpus.heldout_speakers[0].id
ref, e_s = E.reference_of(corpus, sid)
tuned, losses = finetune_full(DEFAULT_FULL_FINETUNE, ref, e_s, params)
report = analyze(params, tuned)
print(report.table())

# %% [markdown]
# ## Rank sweep with the adapters on attention

# %%
settings = [E.FinetuneSetting("rank", rank=r) for r in (2, 4, 8, 16, 32)]
settings.append(E.FinetuneSetting("modules", targets="attn+others"))
print(E.format_table(E.run_table2(params, corpus, [sid], settings)))
