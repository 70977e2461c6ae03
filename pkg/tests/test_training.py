import numpy as np
import pytest

from lorasde import lora
from lorasde import training as TR
from lorasde.corpus import generate_corpus, speaker_signature
from lorasde.score_model import E_PHI, ModelConfig, build_model
from lorasde.tensor import Tensor

SMALL = ModelConfig(hidden=8, n_blocks=1, n_heads=2, time_dim=4)


def reference_adam(grads, x0, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam with bias correction, scalar loop in float64."""
    x, m, v = np.array(x0, dtype=np.float64), 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(x.copy())
    return out


def test_adam_matches_closed_form():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((25, 3))
    p = Tensor(np.array([0.5, -1.0, 2.0]), dtype=np.float64)
    opt = TR.Adam([p], lr=1e-2)
    expected = reference_adam(grads, p.data, 1e-2)
    for g, exp in zip(grads, expected):
        p.grad = g
        opt.step()
        np.testing.assert_allclose(p.data, exp, rtol=0, atol=1e-10)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.zeros(4), dtype=np.float64)
    opt = TR.Adam([p], lr=0.1)
    p.grad = np.array([3.0, -0.01, 100.0, -7.0])
    opt.step()
    np.testing.assert_allclose(p.data, -0.1 * np.sign(p.grad), rtol=1e-6)


def test_adam_skips_params_without_grad():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    opt = TR.Adam([a, b], lr=0.1)
    a.grad = np.ones(2)
    opt.step()
    assert np.all(b.data == 1) and np.all(a.data < 1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(uncond_prob=1.5)
    with pytest.raises(ValueError):
        TR.TrainConfig(mode="other")
    with pytest.raises(ValueError):
        TR.TrainConfig(lr=0)
    d = TR.DEFAULT_FINETUNE
    assert (d.lr, d.iterations, d.mode) == (1e-4, 500, TR.FINETUNE_LORA)


def test_smoothed_is_moving_average():
    np.testing.assert_allclose(TR.smoothed([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(TR.smoothed([1, 2, 3], window=10), [2.0])


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(n_speakers=3, utterances_per_speaker=4, frames_per_utterance=16, seed=1, n_heldout=1)


def test_pretrain_reduces_loss_and_logs(tmp_path, tiny_corpus):
    cfg = TR.pretrain_config(iterations=150, batch_size=4, lr=3e-3)
    log = tmp_path / "loss.log"
    params, losses = TR.pretrain(cfg, tiny_corpus, model_config=SMALL, log_path=log)
    assert len(losses) == 150
    assert np.mean(losses[-30:]) < 0.8 * np.mean(losses[:30])
    lines = log.read_text().splitlines()
    assert len(lines) == 150 and lines[0].startswith("0\t")
    assert not any(t.requires_grad for t in params.tensors.values())


@pytest.mark.parametrize("p_uncond,moves", [(0.0, False), (1.0, True)])
def test_uncond_embedding_only_learns_when_substituted(tiny_corpus, p_uncond, moves):
    params = build_model(SMALL, np.random.default_rng(0))
    before = params[E_PHI].data.copy()
    cfg = TR.pretrain_config(iterations=5, batch_size=2, uncond_prob=p_uncond)
    params, _ = TR.pretrain(cfg, tiny_corpus, params=params)
    assert (not np.array_equal(before, params[E_PHI].data)) == moves


def test_pretrain_needs_two_speakers():
    corpus = generate_corpus(n_speakers=1, utterances_per_speaker=2, frames_per_utterance=8, n_heldout=0)
    assert corpus.warnings
    with pytest.raises(ValueError):
        TR.pretrain(TR.pretrain_config(iterations=1), corpus, model_config=SMALL)


def test_divergence_is_reported(tiny_corpus):
    params = build_model(SMALL, np.random.default_rng(0))
    params["out_proj.bias"].data[:] = np.nan
    with pytest.raises(TR.TrainingDivergedError, match="step 0"):
        TR.pretrain(TR.pretrain_config(iterations=2, batch_size=2), tiny_corpus, params=params)


def _ref(corpus, sid):
    ref = corpus.utterances_of(sid)[0]
    return ref, speaker_signature(ref.mel, corpus.norm)


def test_finetune_trains_only_adapters_and_is_reproducible(tiny_corpus):
    params = build_model(SMALL, np.random.default_rng(0))
    digest = params.digest()
    ref, e_s = _ref(tiny_corpus, 3)
    init = lora.init_adapters(params, "attn", 2, 8.0, np.random.default_rng(1))
    cfg = TR.TrainConfig(lr=1e-3, iterations=20)
    a1, l1 = TR.finetune(cfg, ref, e_s, params, init)
    a2, l2 = TR.finetune(cfg, ref, e_s, params, init)
    assert params.digest() == digest
    assert l1 == l2
    for n in a1.targets:
        assert a1.adapters[n].A.data.tobytes() == a2.adapters[n].A.data.tobytes()
        assert np.any(a1.adapters[n].B.data != 0)
        assert np.all(init.adapters[n].B.data == 0)


def test_finetune_rejects_foreign_adapters(tiny_corpus):
    params = build_model(SMALL, np.random.default_rng(0))
    other = build_model(SMALL, np.random.default_rng(1))
    ref, e_s = _ref(tiny_corpus, 3)
    with pytest.raises(lora.IntegrityError):
        TR.finetune(TR.TrainConfig(iterations=1), ref, e_s, params, lora.init_adapters(other, "attn", 2))


def test_full_finetune_moves_weights_but_not_uncond_embedding(tiny_corpus):
    params = build_model(SMALL, np.random.default_rng(0))
    ref, e_s = _ref(tiny_corpus, 3)
    tuned, _ = TR.finetune_full(TR.TrainConfig(lr=1e-3, iterations=5, mode=TR.FINETUNE_FULL), ref, e_s, params)
    assert np.array_equal(tuned[E_PHI].data, params[E_PHI].data)
    assert not np.array_equal(tuned["blocks.0.attn.q.weight"].data, params["blocks.0.attn.q.weight"].data)


def test_probe_loss_is_deterministic(tiny_corpus):
    params = build_model(SMALL, np.random.default_rng(0))
    ref, e_s = _ref(tiny_corpus, 3)
    assert TR.probe_loss(params, None, ref, e_s) == TR.probe_loss(params, None, ref, e_s)
