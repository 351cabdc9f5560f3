import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_sar import autodiff as ad
from causal_sar.autodiff import Tape, Tensor
from causal_sar.losses import cross_entropy, l_cr_t, l_cr_terms, total_loss
from causal_sar.model import CausalModel, ModelOutput

from conftest import micro_cfg


def t64(a, tracked=False):
    return Tensor(np.asarray(a, dtype=np.float64), tracked=tracked)


def test_cross_entropy_uniform():
    assert abs(float(cross_entropy(t64(np.zeros((3, 4))), [0, 1, 2]).values) - math.log(4)) < 1e-12


def test_cross_entropy_confident():
    assert float(cross_entropy(t64([[100.0, 0.0]]), [0]).values) < 1e-40 + 1e-30


def test_cross_entropy_matches_manual():
    z = np.random.default_rng(0).standard_normal((5, 3))
    y = np.array([0, 2, 1, 1, 0])
    manual = -np.mean([z[i, y[i]] - np.log(np.exp(z[i]).sum()) for i in range(5)])
    assert abs(float(cross_entropy(t64(z), y).values) - manual) < 1e-12


def test_label_out_of_range_reports_position():
    with pytest.raises(ValueError, match="position 1"):
        cross_entropy(t64(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        l_cr_t(t64(np.zeros((2, 3))), [-1, 0], 4)


def test_l_cr_uniform_value():
    n = 16
    v = float(l_cr_t(t64(np.zeros((1, 4))), [0], n).values)
    assert abs(v - (math.log(4) + math.log(16))) < 1e-12


def test_l_cr_terms_batch_equals_per_stratum():
    z = np.random.default_rng(1).standard_normal((6, 5, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    terms = l_cr_terms(t64(z), y).values
    single = [float(l_cr_t(t64(z[:, t]), y, 5).values) for t in range(5)]
    np.testing.assert_allclose(terms, single, rtol=0, atol=1e-13)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 64), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_constant_offset_identity(n, K, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, K)) * rng.uniform(0.1, 20)
    y = [int(rng.integers(K))]
    za, zb = t64(z, tracked=True), t64(z, tracked=True)
    with Tape() as ta:
        a = l_cr_t(za, y, n)
    with Tape() as tb:
        b = cross_entropy(zb, y)
    assert abs(float(a.values) - float(b.values) - math.log(n)) < 1e-9
    ta.backward(a)
    tb.backward(b)
    np.testing.assert_allclose(za.grad, zb.grad, rtol=0, atol=1e-12)


def _fixed_output(B=4, n=3, K=3, seed=0):
    rng = np.random.default_rng(seed)
    return ModelOutput(t64(rng.standard_normal((B, K))), t64(rng.standard_normal((B, n, K))), None, None), rng.integers(K, size=B)


def test_total_with_zero_lambda_is_cross_entropy():
    out, y = _fixed_output()
    lb = total_loss(out, y, 0.0)
    assert lb.l_total == lb.l_ce


def test_total_combines_terms():
    out, y = _fixed_output()
    lb = total_loss(out, y, 0.25)
    assert abs(lb.l_total - (lb.l_ce + 0.25 * lb.l_cr_sum)) < 1e-12
    assert len(lb.l_cr_terms) == 3 and all(t >= math.log(3) for t in lb.l_cr_terms)


def test_total_monotone_in_lambda():
    out, y = _fixed_output(seed=3)
    vals = [total_loss(out, y, lam).l_total for lam in (0.0, 0.001, 0.1, 0.5, 1.0)]
    assert vals == sorted(vals)


def test_negative_lambda_rejected():
    out, y = _fixed_output()
    with pytest.raises(ValueError):
        total_loss(out, y, -0.1)


def test_nonzero_lambda_needs_activation_branch():
    out, y = _fixed_output()
    with pytest.raises(ValueError):
        total_loss(ModelOutput(out.baseline_logits, None, None, None), y, 0.1)


def _param_fd_error(model, x, y, lam, h=1e-5):
    """Max relative error over every parameter between tape gradients and central differences."""
    model.params.zero_grad()
    with Tape() as tape:
        lb = total_loss(model(x), y, lam)
    tape.backward(lb.total)
    worst = 0.0
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = np.zeros_like(p.values)
        flat, nflat = p.values.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = total_loss(model(x), y, lam).l_total
            flat[i] = orig - h
            fm = total_loss(model(x), y, lam).l_total
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        worst = max(worst, ad.relative_error(analytic, numeric))
    return worst


def micro_full_model_fd_error(seed=3, lam=0.1):
    model = CausalModel(micro_cfg(), "same", num_classes=2, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # strictly positive, well-spread pixels keep every relu and pool away from kinks
    x = rng.permutation(3 * 64).reshape(3, 8, 8) / 192.0 + 0.01
    return _param_fd_error(model, x, np.array([0, 1, 1]), lam)


def test_full_loss_gradient_on_micro_model():
    assert micro_full_model_fd_error() < 1e-4
