import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lorasde import guidance as G
from lorasde import lora, score_model
from lorasde.score_model import E_PHI, ConfigurationError, Conditioning

from conftest import TINY

vec = hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10))


@given(vec, vec)
def test_zero_scale_returns_conditional(s_cond, s_uncon):
    np.testing.assert_array_equal(G.combine(s_cond, s_uncon, 0.0), s_cond)


@given(vec, st.floats(0, 10))
def test_equal_scores_are_a_fixed_point(s, gamma):
    np.testing.assert_allclose(G.combine(s, s.copy(), gamma), s, rtol=1e-6)


@given(vec, vec, st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
def test_guided_score_is_affine_in_scale(s_cond, s_uncon, g1, g2, lam):
    # points for g1, g2 and their convex combination are collinear
    mid = lam * g1 + (1 - lam) * g2
    lhs = G.combine(s_cond, s_uncon, mid)
    rhs = lam * G.combine(s_cond, s_uncon, g1) + (1 - lam) * G.combine(s_cond, s_uncon, g2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6 * (1 + np.abs(rhs).max()))


def test_strategy_validation():
    with pytest.raises(ConfigurationError):
        G.GuidanceStrategy(G.LORA_SCALE_BOOST, 1.0, 16.0)
    with pytest.raises(ConfigurationError):
        G.GuidanceStrategy("bogus")
    with pytest.raises(ConfigurationError):
        G.GuidanceStrategy(G.EMBED_CFG, -1.0)
    d = G.default_strategy()
    assert (d.kind, d.gamma_S, d.alpha_infer) == (G.EMBED_CFG, 1.0, None)


@pytest.fixture
def setup(tiny_params):
    ads = lora.init_adapters(tiny_params, "attn", 2, 8.0, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for ad in ads.adapters.values():
        ad.B.data = (0.1 * rng.standard_normal(ad.B.shape)).astype(np.float32)
    cond = Conditioning(rng.standard_normal((6, TINY.d_c)).astype(np.float32), rng.standard_normal(TINY.d_s).astype(np.float32))
    return tiny_params, ads, cond


def _record_calls(monkeypatch):
    calls = []
    real = score_model.score_forward

    def spy(params, adapters, x, t, cond, alpha=None):
        calls.append((adapters is not None, np.array(cond.speaker, copy=True), alpha))
        return real(params, adapters, x, t, cond, alpha=alpha)

    monkeypatch.setattr(score_model, "score_forward", spy)
    return calls


@pytest.mark.parametrize(
    "strategy,expected",
    [
        (G.no_guidance(), 1),
        (G.alpha_boost(16.0), 1),
        (G.GuidanceStrategy(G.EMBED_CFG, 1.0), 2),
        (G.GuidanceStrategy(G.LORA_CFG, 2.0), 2),
        (G.GuidanceStrategy(G.FULL_CFG, 1.0), 2),
    ],
)
def test_network_evaluations_per_step(monkeypatch, setup, strategy, expected):
    params, ads, cond = setup
    calls = _record_calls(monkeypatch)
    G.generate(params, ads, cond, strategy, 6, dt=0.1, rng=np.random.default_rng(0))
    assert len(calls) == 10 * expected == 10 * strategy.evaluations_per_step


def test_unconditional_branches(monkeypatch, setup):
    params, ads, cond = setup
    x = np.zeros((6, TINY.d_mel), np.float32)
    e_phi = params[E_PHI].data
    expectations = {
        G.EMBED_CFG: (True, e_phi),
        G.LORA_CFG: (False, cond.speaker),
        G.FULL_CFG: (False, e_phi),
    }
    for kind, (with_adapters, speaker) in expectations.items():
        calls = _record_calls(monkeypatch)
        G.guided_score(G.GuidanceStrategy(kind, 1.0), params, ads, x, 0.5, cond)
        assert calls[0][0] is True and np.array_equal(calls[0][1], cond.speaker)
        assert calls[1][0] is with_adapters
        np.testing.assert_array_equal(calls[1][1], speaker)


def test_alpha_boost_scales_adapter_path(monkeypatch, setup):
    params, ads, cond = setup
    calls = _record_calls(monkeypatch)
    G.guided_score(G.alpha_boost(16.0), params, ads, np.zeros((6, TINY.d_mel), np.float32), 0.5, cond)
    assert calls[0][2] == 16.0


def test_zero_scale_embed_guidance_reproduces_unguided_samples(setup):
    params, ads, cond = setup
    a = G.generate(params, ads, cond, G.GuidanceStrategy(G.EMBED_CFG, 0.0), 6, dt=0.1, rng=np.random.default_rng(4))
    b = G.generate(params, ads, cond, G.no_guidance(), 6, dt=0.1, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_guidance_never_touches_base_params(setup):
    params, ads, cond = setup
    before = params.digest()
    G.generate(params, ads, cond, G.GuidanceStrategy(G.FULL_CFG, 2.0), 6, dt=0.1, rng=np.random.default_rng(0), batch=2)
    assert params.digest() == before
