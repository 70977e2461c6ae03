# %% [markdown]
# # Strengthening speaker information at sampling time
# Classifier-free guidance against three unconditional references, versus
# simply enlarging the adapter scale.  All rows share the same noise.

# %%
from _base import base_model

from lorasde import evaluation as E

params, corpus = base_model()
speakers = [s.id for s in corpus.heldout_speakers]
rows = E.run_table3(params, corpus, speakers)
print(E.format_table([E.evaluate_ground_truth(corpus, speakers), *rows]))

# %% [markdown]
# Expect guidance to raise similarity at little content cost, and the doubled
# adapter scale to damage content accuracy.
