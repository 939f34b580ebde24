import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2s_mpc.time_embedding import SinusoidalTimeEmbedding, embed, frequencies


def test_shape_and_zero_time():
    e = embed(0.0)
    assert e.shape == (32,)
    np.testing.assert_array_equal(e[:16], 0.0)
    np.testing.assert_array_equal(e[16:], 1.0)


def test_frequencies_are_pi_over_i():
    np.testing.assert_allclose(frequencies(32), np.pi / np.arange(1, 17))


def test_known_values():
    e = embed(0.5)
    assert e[0] == pytest.approx(1.0)          # sin(pi/2)
    assert e[1] == pytest.approx(np.sin(np.pi / 4))
    assert e[16] == pytest.approx(0.0, abs=1e-15)


def test_periodicity_of_slowest_pair():
    # the i = 16 pair has period 32 s
    np.testing.assert_allclose(embed(3.0)[[15, 31]], embed(35.0)[[15, 31]], atol=1e-12)


def test_batched_matches_scalar():
    t = np.array([0.0, 0.37, 12.5])
    batch = embed(t)
    for i, ti in enumerate(t):
        np.testing.assert_array_equal(batch[i], embed(ti))


@pytest.mark.parametrize("dim", [0, 3, -2, 2.0])
def test_bad_dim(dim):
    with pytest.raises(ValueError):
        embed(1.0, dim)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        embed(-0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1e4))
def test_unit_norm_pairs(t):
    e = embed(t)
    np.testing.assert_allclose(e[:16] ** 2 + e[16:] ** 2, 1.0, atol=1e-12)


def test_transformer_api():
    tr = SinusoidalTimeEmbedding(dim=8).fit(np.zeros((3, 1)))
    out = tr.transform([[0.0], [1.0], [2.0]])
    assert out.shape == (3, 8)
    assert list(tr.get_feature_names_out()[:2]) == ["sin_1", "sin_2"]
    assert tr.get_params() == {"dim": 8}
    with pytest.raises(ValueError):
        SinusoidalTimeEmbedding(dim=5).fit([[0.0]])


def test_component_periods_and_bounds():
    t = np.linspace(0.0, 50.0, 301)
    e = embed(t)
    assert np.all(np.abs(e) <= 1.0)
    # component i has period 2 i seconds
    for i in (1, 2, 7, 16):
        np.testing.assert_allclose(embed(t + 2 * i)[:, i - 1], e[:, i - 1], atol=1e-12)
