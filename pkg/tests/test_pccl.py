import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irvis.autodiff import Tensor, grad_check
from irvis.errors import DegenerateInputError, ShapeMismatchError
from irvis.pccl import (PseudoLabelMatrix, loss_iv, loss_mse, loss_nce, loss_pccl,
                        loss_variant_softmax, loss_vv, pseudo_labels, similarity)
from conftest import exhaustive_pseudo_labels, random_stochastic


def labels_from(values):
    values = np.asarray(values, dtype=float)
    return PseudoLabelMatrix(values=values, gamma=0.6,
                             per_row_m=values.sum(axis=1).astype(int))


class TestSimilarity:
    def test_orthonormal_diag_at_default_tau(self):
        e = Tensor(np.eye(4))
        s = similarity(e, e, 0.04)
        assert np.array_equal(np.diag(s.values.data), np.full(4, 1.0 / 0.04))
        off = s.values.data - np.diag(np.diag(s.values.data))
        assert np.all(off == 0.0)
        assert np.allclose(np.diag(s.values.data), 25.0, atol=1e-9)

    def test_tau_halving_doubles_exactly(self):
        rng = np.random.default_rng(0)
        a, b = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
        # power-of-two temperatures keep the scaling bit-exact
        s1 = similarity(a, b, 1.0 / 16.0).values.data
        s2 = similarity(a, b, 1.0 / 32.0).values.data
        assert np.array_equal(s2, 2.0 * s1)

    def test_vs_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        s = similarity(Tensor(a), Tensor(b), 0.04).values.data
        for i in range(5):
            for j in range(5):
                cos = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
                assert abs(s[i, j] - cos / 0.04) <= 1e-12 / 0.04

    def test_bad_tau_and_zero_rows(self):
        a = Tensor(np.ones((2, 3)))
        with pytest.raises(ValueError, match="positive"):
            similarity(a, a, 0.0)
        z = np.ones((2, 3))
        z[0] = 0.0
        with pytest.raises(DegenerateInputError):
            similarity(Tensor(z), a, 0.04)


class TestPseudoLabels:
    def test_uniform_rows(self):
        a = np.full((4, 4), 0.25)
        p = pseudo_labels(a, 0.6)
        # prefix sums 0.25/0.50/0.75 -> m=3, stable tie-break picks cols 0..2
        assert np.all(p.per_row_m == 3)
        for i in range(4):
            expect = {0, 1, 2} | {i}
            assert set(np.flatnonzero(p.values[i])) == expect

    def test_dominant_entry(self):
        a = np.tile([0.7, 0.2, 0.05, 0.05], (4, 1))
        p = pseudo_labels(a, 0.6)
        assert np.array_equal(p.values[3], [1, 0, 0, 1])
        assert p.per_row_m[3] == 1

    def test_diagonal_always_set(self):
        rng = np.random.default_rng(2)
        p = pseudo_labels(random_stochastic(rng, 9), 0.3)
        assert np.all(np.diag(p.values) == 1.0)

    def test_binary_values(self):
        rng = np.random.default_rng(3)
        p = pseudo_labels(random_stochastic(rng, 7), 0.6)
        assert set(np.unique(p.values)) <= {0.0, 1.0}

    @pytest.mark.parametrize("gamma", [0.3, 0.6])
    def test_matches_exhaustive_oracle_200(self, gamma):
        rng = np.random.default_rng(17)
        for _ in range(200):
            n = int(rng.integers(2, 17))
            a = random_stochastic(rng, n)
            assert np.array_equal(pseudo_labels(a, gamma).values,
                                  exhaustive_pseudo_labels(a, gamma))

    def test_monotone_in_gamma(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = random_stochastic(rng, 8)
            lo = pseudo_labels(a, 0.3).values
            hi = pseudo_labels(a, 0.6).values
            assert np.all(lo <= hi)

    def test_permutation_equivariance_via_oracle(self):
        rng = np.random.default_rng(6)
        a = random_stochastic(rng, 10)
        perm = rng.permutation(10)
        conj = a[np.ix_(perm, perm)]
        assert np.array_equal(pseudo_labels(conj, 0.6).values,
                              exhaustive_pseudo_labels(conj, 0.6))

    def test_input_validation(self):
        with pytest.raises(DegenerateInputError, match="row 0"):
            pseudo_labels(np.ones((3, 3)), 0.6)
        a = np.full((3, 3), 1.0 / 3.0)
        for gamma in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                pseudo_labels(a, gamma)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10**6),
           st.sampled_from([0.3, 0.45, 0.6, 0.9]))
    def test_minimality_property(self, n, seed, gamma):
        a = random_stochastic(np.random.default_rng(seed), n)
        p = pseudo_labels(a, gamma)
        order = np.argsort(-a, axis=1, kind="stable")
        for i in range(n):
            m = p.per_row_m[i]
            top = a[i, order[i, :m]]
            assert top.sum() > gamma or m == n
            if m > 1:
                assert top[:-1].sum() <= gamma


class TestBceLosses:
    def test_zero_logits_ln2(self):
        rng = np.random.default_rng(7)
        p = labels_from((rng.random((5, 5)) > 0.5) | np.eye(5, dtype=bool))
        s = similarity(Tensor(np.eye(5)), Tensor(np.eye(5)), 0.04)
        s.values = Tensor(np.zeros((5, 5)))
        assert abs(loss_iv(s, p).item() - np.log1p(1.0)) <= 1e-15
        assert abs(loss_vv(s, p).item() - np.log1p(1.0)) <= 1e-15

    def test_saturated_match_near_zero(self):
        rng = np.random.default_rng(8)
        mask = (rng.random((5, 5)) > 0.5) | np.eye(5, dtype=bool)
        p = labels_from(mask)
        s = similarity(Tensor(np.eye(5)), Tensor(np.eye(5)), 0.04)
        s.values = Tensor(np.where(mask, 40.0, -40.0))
        assert loss_iv(s, p).item() < 1e-15

    def test_vs_naive_oracle(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(6, 6)) * 4
        mask = (rng.random((6, 6)) > 0.5) | np.eye(6, dtype=bool)
        s = similarity(Tensor(np.eye(6)), Tensor(np.eye(6)), 0.04)
        s.values = Tensor(z)
        got = loss_iv(s, labels_from(mask)).item()
        sig = 1.0 / (1.0 + np.exp(-z.astype(np.longdouble)))
        t = mask.astype(np.longdouble)
        naive = float((-(t * np.log(sig) + (1 - t) * np.log(1 - sig))).mean())
        assert abs(got - naive) <= 1e-10 * naive

    def test_shape_mismatch(self):
        s = similarity(Tensor(np.eye(4)), Tensor(np.eye(4)), 0.04)
        with pytest.raises(ShapeMismatchError):
            loss_iv(s, labels_from(np.eye(5)))


class TestCombinedLoss:
    def test_beta_zero(self):
        l_iv, l_vv = Tensor(0.3), Tensor(0.5)
        assert loss_pccl(l_iv, l_vv, 1.0, 0.0).item() == 0.3

    def test_arithmetic(self):
        assert abs(loss_pccl(Tensor(0.3), Tensor(0.5), 1.0, 1.0).item() - 0.8) < 1e-15

    def test_negative_coefficient(self):
        with pytest.raises(ValueError):
            loss_pccl(Tensor(0.1), Tensor(0.1), -1.0, 1.0)

    def test_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(10)
        f_vf = Tensor(rng.normal(size=(4, 6)))
        mask = (rng.random((4, 4)) > 0.5) | np.eye(4, dtype=bool)
        p = labels_from(mask)
        alpha, beta = 0.7, 1.3

        def combined(t):
            s_iv = similarity(t, f_vf, 0.5)
            s_vv = similarity(t, f_vf, 0.25)
            return loss_pccl(loss_iv(s_iv, p), loss_vv(s_vv, p), alpha, beta)

        x = Tensor(rng.normal(size=(4, 6)))
        assert grad_check(combined, x) < 1e-5


class TestAblationLosses:
    def test_mse_zero_when_equal(self):
        f = Tensor(np.random.default_rng(11).normal(size=(4, 6)))
        assert loss_mse(f, f, f).item() == 0.0

    def test_mse_unit_offset(self):
        f = Tensor(np.random.default_rng(12).normal(size=(4, 6)))
        shifted = Tensor(f.data + 1.0)
        assert abs(loss_mse(shifted, f, f).item() - 1.0) < 1e-12

    def test_mse_vs_naive(self):
        rng = np.random.default_rng(13)
        fi, fv, fvf = (rng.normal(size=(4, 6)) for _ in range(3))
        got = loss_mse(Tensor(fi), Tensor(fv), Tensor(fvf)).item()
        naive = ((fi - fvf) ** 2).mean() + ((fv - fvf) ** 2).mean()
        assert abs(got - naive) <= 1e-12 * max(1.0, naive)

    def test_nce_uniform_is_2_log_n(self):
        for n in (3, 8, 16):
            s = similarity(Tensor(np.eye(n)), Tensor(np.eye(n)), 0.04)
            s.values = Tensor(np.zeros((n, n)))
            assert abs(loss_nce(s, s).item() - 2.0 * np.log(n)) <= 1e-10

    def test_nce_saturated_diag(self):
        n = 6
        s = similarity(Tensor(np.eye(n)), Tensor(np.eye(n)), 0.04)
        s.values = Tensor(np.where(np.eye(n, dtype=bool), 40.0, -40.0))
        assert loss_nce(s, s).item() < 1e-15

    def test_nce_vs_naive(self):
        rng = np.random.default_rng(14)
        a, b = rng.normal(size=(5, 5)) * 3, rng.normal(size=(5, 5)) * 3
        s1 = similarity(Tensor(np.eye(5)), Tensor(np.eye(5)), 0.04)
        s1.values = Tensor(a)
        s2 = similarity(Tensor(np.eye(5)), Tensor(np.eye(5)), 0.04)
        s2.values = Tensor(b)
        got = loss_nce(s1, s2).item()
        naive = 0.0
        for z in (a, b):
            for i in range(5):
                row = z[i].astype(np.longdouble)
                naive += float(np.log(np.exp(row).sum()) - row[i]) / 5
        assert abs(got - naive) <= 1e-10 * naive


class TestSoftmaxVariant:
    def test_all_ones_labels(self):
        rng = np.random.default_rng(15)
        s = similarity(Tensor(np.eye(4)), Tensor(np.eye(4)), 0.04)
        s.values = Tensor(rng.normal(size=(4, 4)))
        assert abs(loss_variant_softmax(s, labels_from(np.ones((4, 4)))).item()) < 1e-12

    def test_identity_labels_uniform_rows(self):
        n = 8
        s = similarity(Tensor(np.eye(n)), Tensor(np.eye(n)), 0.04)
        s.values = Tensor(np.zeros((n, n)))
        got = loss_variant_softmax(s, labels_from(np.eye(n))).item()
        assert abs(got - np.log(n)) <= 1e-12

    def test_vs_naive(self):
        rng = np.random.default_rng(16)
        z = rng.normal(size=(5, 5)) * 3
        mask = (rng.random((5, 5)) > 0.5) | np.eye(5, dtype=bool)
        s = similarity(Tensor(np.eye(5)), Tensor(np.eye(5)), 0.04)
        s.values = Tensor(z)
        got = loss_variant_softmax(s, labels_from(mask)).item()
        naive = 0.0
        for i in range(5):
            p = np.exp(z[i].astype(np.longdouble))
            p /= p.sum()
            naive += float(-np.log(p[mask[i]].sum())) / 5
        assert abs(got - naive) <= 1e-10 * max(1e-30, naive)


def test_all_losses_nonnegative_and_grad_clean():
    rng = np.random.default_rng(18)
    f_i = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    f_v = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    f_vf = Tensor(rng.normal(size=(6, 8)))
    attn = random_stochastic(rng, 6)
    p = pseudo_labels(attn, 0.6)
    s_iv = similarity(f_i, f_vf, 0.04)
    s_vv = similarity(f_v, f_vf, 0.04)
    losses = [loss_iv(s_iv, p), loss_vv(s_vv, p),
              loss_mse(f_i, f_v, f_vf), loss_nce(s_iv, s_vv),
              loss_variant_softmax(s_iv, p)]
    for loss in losses:
        assert loss.item() >= 0.0 and np.isfinite(loss.item())


def test_gradients_do_not_reach_teacher_features():
    rng = np.random.default_rng(19)
    f_i = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    f_vf = Tensor(rng.normal(size=(4, 6)))  # teacher side: detached by contract
    p = pseudo_labels(random_stochastic(rng, 4), 0.6)
    loss_iv(similarity(f_i, f_vf, 0.04), p).backward()
    assert f_i.grad is not None
    assert f_vf.grad is None
