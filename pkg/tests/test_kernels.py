import numpy as np
import numpy.testing as npt
import pytest

from cxrlm import kernels
from cxrlm.kernels import reference

try:
    from cxrlm.kernels import _fastcore
except ImportError:
    _fastcore = None

needs_compiled = pytest.mark.skipif(_fastcore is None, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")


def test_nearest_codes_distance_oracle():
    codes = np.array([[0.0, 0.0], [1.0, 1.0]])
    idx = kernels.nearest_codes(np.array([[0.9, 0.8]]), codes)
    assert idx[0] == 1  # 1.45 vs 0.05


def test_nearest_codes_tie_breaks_low():
    codes = np.array([[0.0], [2.0], [0.0], [2.0]])
    idx = kernels.nearest_codes(np.array([[1.0]]), codes)
    assert idx[0] == 0


def test_nearest_codes_translation_invariance():
    rng = np.random.default_rng(0)
    lat = rng.standard_normal((40, 8))
    codes = rng.standard_normal((16, 8))
    shift = rng.standard_normal(8) * 100
    npt.assert_array_equal(
        kernels.nearest_codes(lat, codes),
        kernels.nearest_codes(lat + shift, codes + shift),
    )


def test_nearest_codes_empty_codebook():
    with pytest.raises(ValueError, match="empty"):
        kernels.nearest_codes(np.ones((2, 3)), np.ones((0, 3)))


def test_softmax_xent_matches_engine_definition():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((5, 7))
    targets = np.array([0, 6, 3, 3, 1])
    losses, probs = kernels.softmax_xent(logits, targets)
    for i in range(5):
        e = np.exp(logits[i] - logits[i].max())
        p = e / e.sum()
        npt.assert_allclose(probs[i], p, rtol=1e-12)
        npt.assert_allclose(losses[i], -np.log(p[targets[i]]), rtol=1e-12)


def test_adam_update_reference_first_step():
    p = np.array([0.0])
    m = np.zeros(1)
    v = np.zeros(1)
    kernels.adam_update(p, np.array([5.0]), m, v, 1, 0.1, 0.9, 0.999, 1e-8)
    npt.assert_allclose(p[0], -0.1 * 5.0 / (5.0 + 1e-8), atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("n,k,d", [(13, 7, 5), (64, 32, 16)])
def test_parity_nearest_codes(n, k, d):
    rng = np.random.default_rng(n)
    lat = rng.standard_normal((n, d))
    codes = rng.standard_normal((k, d))
    npt.assert_array_equal(
        _fastcore.nearest_codes(lat, codes),
        reference.nearest_codes(lat, codes),
    )


@needs_compiled
def test_parity_softmax_xent_and_grad():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((9, 11)) * 3
    targets = rng.integers(0, 11, size=9)
    lc, pc = _fastcore.softmax_xent(logits, targets)
    lr_, pr = reference.softmax_xent(logits, targets)
    npt.assert_allclose(lc, lr_, rtol=1e-12)
    npt.assert_allclose(pc, pr, rtol=1e-12)
    up = rng.standard_normal(9)
    npt.assert_allclose(
        _fastcore.softmax_xent_grad(pc, targets, up),
        reference.softmax_xent_grad(pr, targets, up),
        rtol=1e-12, atol=1e-15,
    )


@needs_compiled
def test_parity_adam_update():
    rng = np.random.default_rng(3)
    p0 = rng.standard_normal(50)
    g = rng.standard_normal(50)
    args = (7, 3e-4, 0.9, 0.999, 1e-8)

    pa, ma, va = p0.copy(), np.abs(rng.standard_normal(50)), np.abs(rng.standard_normal(50))
    pb, mb, vb = pa.copy(), ma.copy(), va.copy()
    _fastcore.adam_update(pa, g, ma, va, *args)
    reference.adam_update(pb, g, mb, vb, *args)
    npt.assert_allclose(pa, pb, rtol=1e-14)
    npt.assert_allclose(ma, mb, rtol=1e-14)
    npt.assert_allclose(va, vb, rtol=1e-14)
