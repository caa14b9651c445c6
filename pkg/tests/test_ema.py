import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdet.detector import ArchitectureError, ParamLayout, ParamVector
from ssdet.ema import EmaConfig, closed_form_teacher, ema_update

from oracles import simulate_sgd_ema


def _vec(values, name="w"):
    t = torch.as_tensor(values, dtype=torch.float64).reshape(-1)
    return ParamVector(t, ParamLayout(((name, 0, (t.numel(),)),)))


class TestEmaUpdate:
    def test_scalar_fixture(self):
        out = ema_update(_vec([2.0]), _vec([4.0]), 0.9)
        assert out.values.item() == pytest.approx(2.2, abs=1e-15)

    def test_alpha_one_keeps_teacher(self):
        t = _vec(np.linspace(-1, 1, 7))
        out = ema_update(t, _vec(np.arange(7.0)), 1.0)
        assert torch.equal(out.values, t.values)

    def test_alpha_zero_copies_student(self):
        s = _vec(np.arange(7.0) * 0.3)
        out = ema_update(_vec(np.zeros(7)), s, 0.0)
        assert torch.equal(out.values, s.values)

    def test_functional_does_not_mutate(self):
        t, s = _vec([1.0, 2.0]), _vec([3.0, 5.0])
        t0, s0 = t.values.clone(), s.values.clone()
        ema_update(t, s, 0.5)
        assert torch.equal(t.values, t0) and torch.equal(s.values, s0)

    def test_in_place_overwrites_teacher_only(self):
        t, s = _vec([1.0, 2.0]), _vec([3.0, 5.0])
        s0 = s.values.clone()
        out = ema_update(t, s, 0.5, in_place=True)
        assert out is t
        assert t.values.tolist() == [2.0, 3.5]
        assert torch.equal(s.values, s0)

    def test_layout_mismatch(self):
        with pytest.raises(ArchitectureError):
            ema_update(_vec([1.0, 2.0], "a"), _vec([1.0, 2.0], "b"), 0.5)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            ema_update(_vec([1.0]), _vec([1.0]), 1.5)
        with pytest.raises(ValueError):
            EmaConfig(alpha=-0.1)
        assert EmaConfig().alpha == 0.9996

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20).flatmap(
        lambda t: st.tuples(st.just(t), st.lists(st.floats(-1e3, 1e3), min_size=len(t), max_size=len(t)))),
        st.floats(0.0, 1.0))
    def test_affine_and_bounded(self, pair, alpha):
        t, s = pair
        out = ema_update(_vec(t), _vec(s), alpha).values
        for j in range(len(t)):
            want = torch.tensor(alpha, dtype=torch.float64) * t[j] + (1.0 - alpha) * s[j]
            assert out[j].item() == want.item()
            lo, hi = min(t[j], s[j]), max(t[j], s[j])
            assert lo - 1e-9 <= out[j].item() <= hi + 1e-9

    def test_geometric_convergence(self):
        rng = np.random.default_rng(0)
        t0, s = rng.normal(size=10), rng.normal(size=10)
        t = _vec(t0)
        for _ in range(100):
            t = ema_update(t, _vec(s), 0.9)
        gap = np.abs(t.values.numpy() - s)
        np.testing.assert_allclose(gap, 0.9 ** 100 * np.abs(t0 - s), rtol=1e-9, atol=1e-15)
        assert gap.max() < 1e-4 * max(1.0, np.abs(t0 - s).max())


class TestClosedForm:
    def test_i_one_is_theta_hat(self):
        th = _vec([1.0, -2.0])
        assert torch.equal(closed_form_teacher(th, [], 0.9, 0.1, 1).values, th.values)

    def test_alpha_zero_is_student_endpoint(self):
        th = _vec([1.0, -2.0])
        grads = [_vec([0.5, 0.25]), _vec([-1.0, 2.0]), _vec([3.0, 0.0])]
        got = closed_form_teacher(th, grads, 0.0, 0.1, 4).values
        want = th.values - 0.1 * sum(g.values for g in grads)
        torch.testing.assert_close(got, want, rtol=0, atol=1e-15)

    def test_too_few_gradients(self):
        with pytest.raises(ValueError):
            closed_form_teacher(_vec([0.0]), [_vec([1.0])], 0.9, 0.1, 3)
        with pytest.raises(ValueError):
            closed_form_teacher(_vec([0.0]), [], 0.9, 0.1, 0)

    def test_layout_mismatch(self):
        with pytest.raises(ArchitectureError):
            closed_form_teacher(_vec([0.0], "a"), [_vec([1.0], "b")], 0.9, 0.1, 2)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.9, 0.99])
    def test_matches_stepwise_simulation_linear_model(self, alpha):
        # least squares on a fixed design: grad = X^T (X w - y) / n
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 4))
        y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + 0.1 * rng.normal(size=30)
        grad_fn = lambda w: x.T @ (x @ w - y) / len(y)
        teachers, grads = simulate_sgd_ema(np.zeros(4), grad_fn, alpha, 0.05, 50)
        gvecs = [_vec(g) for g in grads]
        for i in (1, 2, 10, 51):
            got = closed_form_teacher(_vec(np.zeros(4)), gvecs, alpha, 0.05, i).values.numpy()
            np.testing.assert_allclose(got, teachers[i - 1], rtol=0, atol=1e-6)

    def test_scalar_trajectory(self):
        teachers, grads = simulate_sgd_ema(np.array([3.0]), lambda w: 2 * (w - 1.0), 0.9, 0.1, 50)
        got = closed_form_teacher(_vec([3.0]), [_vec(g) for g in grads], 0.9, 0.1, 51)
        assert abs(got.values.item() - teachers[50][0]) < 1e-6
