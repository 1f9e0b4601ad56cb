import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import median_abs_deviation

from splitproj.detection import client_signatures, f1_score, mad_z_detector
from splitproj.errors import InvalidArgument


def planted(seed, n=10, dim=64, malicious=(3,), noise=0.05):
    """Benign vectors near a shared direction; malicious ones rotated away by construction."""
    gen = np.random.default_rng(seed)
    base = gen.standard_normal(dim)
    base /= np.linalg.norm(base)
    other = gen.standard_normal(dim)
    other -= (other @ base) * base
    other /= np.linalg.norm(other)
    vecs = base + noise * gen.standard_normal((n, dim)) / np.sqrt(dim)
    for m in malicious:
        vecs[m] = base + 1.2 * other  # cosine to base about 0.64
    return vecs * gen.uniform(0.5, 2.0, size=(n, 1))


def oracle_z(vecs):
    r = np.asarray(vecs, dtype=np.float64)
    c = r.mean(axis=0)
    s = np.array([v @ c / (np.linalg.norm(v) * np.linalg.norm(c)) for v in r])
    return (s - np.median(s)) / max(median_abs_deviation(s, scale="normal"), 1e-12 / 0.6744897501960817)


def test_f1_definition():
    assert f1_score([], [1]) == (0.0, 0.0, 0.0)
    p, r, f = f1_score([1, 2, 3], [1, 2, 4])
    assert (p, r) == (2 / 3, 2 / 3) and f == pytest.approx(2 / 3)
    assert f1_score([], []) == (1.0, 1.0, 1.0)
    assert f1_score([5], [5])[2] == 1.0


def test_identical_vectors_flag_nothing():
    rep = mad_z_detector(np.ones((5, 3)))
    assert rep.flagged == [] and all(z == 0 for z in rep.z)


def test_hand_built_outlier():
    # nine clients close to the consensus and one far from it
    angles = np.r_[np.linspace(-0.08, 0.08, 9), 1.2]
    vecs = np.c_[np.cos(angles), np.sin(angles)]
    rep = mad_z_detector(vecs, truth=[9])
    assert rep.flagged == [9] and rep.f1 == 1.0
    np.testing.assert_allclose(rep.z, oracle_z(vecs), rtol=1e-5, atol=1e-9)
    assert all(s > 0.98 for s in rep.scores[:9]) and rep.scores[9] < 0.5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_scenario(seed):
    rep = mad_z_detector(planted(seed), truth=[3])
    assert rep.flagged == [3] and rep.f1 == 1.0
    benign = mad_z_detector(planted(seed, malicious=()), truth=[])
    assert benign.flagged == [] and benign.f1 == 1.0


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_scale_invariance(seed, c):
    vecs = planted(seed % 1000)
    a = mad_z_detector(vecs)
    b = mad_z_detector(vecs * c)
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)
    assert a.flagged == b.flagged


def test_mapping_input_and_errors():
    vecs = planted(0)
    rep = mad_z_detector({10 + i: v for i, v in enumerate(vecs)}, truth=[13])
    assert rep.client_ids[0] == 10 and rep.flagged == [13]
    assert json.loads(rep.to_json())["f1"] == 1.0
    csv_lines = rep.to_csv().strip().split("\n")
    assert csv_lines[0] == "client,cosine,mad_z,flagged" and csv_lines[4].endswith(",1")
    with pytest.raises(InvalidArgument):
        mad_z_detector(np.ones((2, 3)))


def test_client_signatures():
    observed = {0: [(np.zeros((2, 3)), np.ones((2, 4))), (np.zeros((1, 3)), 4 * np.ones((1, 4)))],
                1: [(np.ones((3, 3)), np.zeros((3, 4)))]}
    sig = client_signatures(observed, "u")
    np.testing.assert_allclose(sig[0], 2.0)
    assert sig[1].shape == (4,)
    np.testing.assert_allclose(client_signatures(observed, "z")[1], 1.0)
    with pytest.raises(InvalidArgument):
        client_signatures(observed, "x")
