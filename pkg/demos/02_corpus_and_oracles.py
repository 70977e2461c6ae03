# %% [markdown]
# # Synthetic speakers and the two oracles
# Each speaker colours a shared set of token spectra with a smooth gain curve.
# Speaker similarity reads that curve back; content accuracy ignores it.

# %%
import numpy as np

from lorasde import corpus as K

corpus = K.generate_corpus()
print(f"{len(corpus.train_speakers)} training speakers, {len(corpus.heldout_speakers)} held out")
print("normaliser:", corpus.norm)

# %% [markdown]
# ## Speaker similarity on ground truth
# Rows are utterances grouped by speaker, columns candidate speakers.

# %%
sims = np.array([[corpus.speaker_similarity(u.mel, s.id) for s in corpus.speakers] for u in corpus.utterances[::20]])
np.set_printoptions(precision=2, suppress=True)
print(sims)
print("true speaker ranked first:", np.mean([corpus.speaker_similarity(u.mel, u.speaker_id) >= max(corpus.speaker_similarity(u.mel, s.id) for s in corpus.speakers) for u in corpus.utterances]))

# %% [markdown]
# ## Content accuracy
# Noiseless renders classify perfectly; the corpus noise costs under 1%;
# random input sits at chance (1/8).

# %%
utt = corpus.utterances[0]
clean = corpus.norm.apply(K.render(utt.tokens, corpus.speaker(0)))
print("noiseless:", corpus.content_accuracy(clean, utt.tokens))
print("corpus   :", np.mean([corpus.content_accuracy(u.mel, u.tokens) for u in corpus.utterances]).round(4))
rng = np.random.default_rng(0)
print("random   :", np.mean([corpus.content_accuracy(rng.standard_normal(utt.mel.shape), utt.tokens) for _ in range(500)]).round(3))
