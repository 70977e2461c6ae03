import numpy as np
import pytest

from lorasde import corpus as K
from lorasde.corpus import OracleError, generate_corpus

# Recorded on the default corpus (seed 0, oracle version 1).
MIN_SPEAKER_MARGIN = 0.4376
GROUND_TRUTH_ACCURACY = 0.99266


def test_defaults(corpus):
    assert len(corpus.train_speakers) == 8 and len(corpus.heldout_speakers) == 2
    assert len(corpus.utterances) == 200
    assert all(u.mel.shape == (64, 16) and u.content.shape == (64, 16) for u in corpus.utterances)
    assert corpus.version == K.ORACLE_VERSION == 1
    held = {s.id for s in corpus.heldout_speakers}
    assert not held & {u.speaker_id for u in corpus.train_utterances()}


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = generate_corpus(n_speakers=2, utterances_per_speaker=2, frames_per_utterance=16, seed=5, n_heldout=1)
    b = generate_corpus(n_speakers=2, utterances_per_speaker=2, frames_per_utterance=16, seed=5, n_heldout=1)
    K.write_corpus(a, tmp_path / "a")
    K.write_corpus(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    c = generate_corpus(n_speakers=2, utterances_per_speaker=2, frames_per_utterance=16, seed=6, n_heldout=1)
    assert not np.array_equal(a.utterances[0].mel, c.utterances[0].mel)


def test_training_data_is_normalised(corpus):
    train = np.concatenate([u.mel for u in corpus.train_utterances()])
    assert abs(train.mean()) < 1e-5 and train.std() == pytest.approx(1.0, abs=1e-5)


def test_speaker_embeddings_are_unit_and_distinct(corpus):
    e = np.stack([s.embedding for s in corpus.speakers])
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-6)
    g = np.stack([s.log_gains for s in corpus.speakers])
    d = np.linalg.norm(g[:, None] - g[None], axis=-1)
    assert d[~np.eye(len(g), dtype=bool)].min() > 0
    lo, hi = np.log(0.5), np.log(2.0)
    assert g.min() >= lo and g.max() <= hi


def test_tokens_are_balanced_runs(corpus):
    for u in corpus.utterances[:20]:
        np.testing.assert_array_equal(np.bincount(u.tokens, minlength=K.VOCAB), 8)
        assert np.all(u.tokens.reshape(-1, K.RUN_LENGTH) == u.tokens[:: K.RUN_LENGTH, None])


def test_noiseless_render_and_prototype_similarity(corpus):
    spk = corpus.speaker(3)
    tokens = corpus.utterances_of(3)[0].tokens
    mel = corpus.norm.apply(K.render(tokens, spk))
    assert corpus.speaker_similarity(mel, 3) > 0.95
    proto = corpus.norm.apply(np.tile(spk.prototype(), (4, 1)))
    assert corpus.speaker_similarity(proto, 3) == pytest.approx(1.0, abs=1e-9)
    assert corpus.content_accuracy(mel, tokens) == 1.0


def test_similarity_ranks_true_speaker_first(corpus):
    n_first, margins = 0, []
    for u in corpus.utterances:
        sims = np.array([corpus.speaker_similarity(u.mel, s.id) for s in corpus.speakers])
        others = np.delete(sims, u.speaker_id)
        margins.append(sims[u.speaker_id] - others.max())
        n_first += sims.argmax() == u.speaker_id
    assert n_first / len(corpus.utterances) >= 0.95
    assert min(margins) == pytest.approx(MIN_SPEAKER_MARGIN, abs=1e-3)


def test_ground_truth_content_accuracy_fixture(corpus):
    acc = np.mean([corpus.content_accuracy(u.mel, u.tokens) for u in corpus.utterances])
    assert acc == pytest.approx(GROUND_TRUTH_ACCURACY, abs=1e-4)
    assert acc < 1.0  # noise keeps the oracle away from saturation


def test_random_input_scores_chance(corpus):
    rng = np.random.default_rng(0)
    tokens = corpus.utterances[0].tokens
    accs = [corpus.content_accuracy(rng.standard_normal((64, 16)), tokens) for _ in range(1000)]
    assert np.mean(accs) == pytest.approx(1 / K.VOCAB, abs=0.05)


def test_content_oracle_ignores_speaker(corpus):
    tokens = corpus.utterances[0].tokens
    for sid in (0, 5, 9):
        mel = corpus.norm.apply(K.render(tokens, corpus.speaker(sid)))
        assert corpus.content_accuracy(mel, tokens) == 1.0


def test_oracle_errors(corpus):
    with pytest.raises(OracleError):
        corpus.speaker_similarity(np.zeros((4, 16)), 0)
    with pytest.raises(OracleError):
        K.speaker_signature(np.zeros((0, 16)))
    with pytest.raises(ValueError):
        corpus.content_accuracy(np.zeros((4, 16)), [0, 1])


def test_single_speaker_corpus_is_flagged():
    c = generate_corpus(n_speakers=1, utterances_per_speaker=1, frames_per_utterance=8, n_heldout=0)
    assert len(c.speakers) == 1 and c.warnings
    with pytest.raises(ValueError):
        generate_corpus(n_speakers=0)


def test_token_strings_round_trip():
    t = np.array([0, 7, 3, 3])
    assert K.tokens_to_string(t) == "0733"
    np.testing.assert_array_equal(K.tokens_from_string("0733"), t)
    with pytest.raises(ValueError):
        K.tokens_from_string("089")


def test_manifest_and_utterance_files(tmp_path, small_corpus):
    manifest = K.write_corpus(small_corpus, tmp_path)
    rows = K.read_manifest(manifest)
    assert len(rows) == len(small_corpus.utterances)
    sid, tokens, path = rows[7]
    utt, norm, meta = K.load_utterance(path)
    assert utt.speaker_id == sid and utt.token_string == tokens
    assert norm == small_corpus.norm and meta["oracle_version"] == K.ORACLE_VERSION
    original = small_corpus.utterances[7]
    assert utt.mel.tobytes() == original.mel.tobytes()
