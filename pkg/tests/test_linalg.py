"""Kernel tests: decomposition conventions, symmetric matrix functions, and
their hand-written derivatives.

Expected values come from independent routes: numpy eigendecompositions,
closed forms on diagonal matrices, and torch.autograd.gradcheck against the
divided-difference backward.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grassfuse import linalg
from grassfuse.exceptions import (
    DimensionMismatchError,
    NotPositiveDefiniteError,
    NotSymmetricError,
)

from util import DTYPE, fro, gen, random_spd


class TestQrThin:
    def test_identity(self):
        q, r = linalg.qr_thin(torch.eye(3, dtype=DTYPE))
        assert torch.equal(q, torch.eye(3, dtype=DTYPE))
        assert torch.equal(r, torch.eye(3, dtype=DTYPE))

    def test_orthogonal_columns_positive_convention(self):
        a = torch.tensor([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]], dtype=DTYPE)
        q, r = linalg.qr_thin(a)
        expect_q = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], dtype=DTYPE)
        assert fro(q - expect_q) < 1e-14
        assert fro(r - torch.diag(torch.tensor([2.0, 3.0], dtype=DTYPE))) < 1e-14

    def test_reconstruction_seed7(self):
        a = torch.randn(6, 3, generator=gen(7), dtype=DTYPE)
        q, r = linalg.qr_thin(a)
        assert fro(q @ r - a) < 1e-10 * fro(a)
        assert fro(q.mT @ q - torch.eye(3, dtype=DTYPE)) < 1e-10
        assert bool((torch.diagonal(r) >= 0).all())

    def test_deterministic_bitwise(self):
        a = torch.randn(5, 4, generator=gen(3), dtype=DTYPE)
        q1, r1 = linalg.qr_thin(a)
        q2, r2 = linalg.qr_thin(a.clone())
        assert torch.equal(q1, q2) and torch.equal(r1, r2)

    def test_wide_matrix_rejected(self):
        with pytest.raises(DimensionMismatchError):
            linalg.qr_thin(torch.randn(2, 4, generator=gen(0), dtype=DTYPE))

    def test_rank_deficiency_flag(self):
        a = torch.randn(6, 3, generator=gen(1), dtype=DTYPE)
        a[:, 2] = a[:, 0] + a[:, 1]
        _, r = linalg.qr_thin(a)
        assert bool(linalg.qr_is_rank_deficient(r, a))
        b = torch.randn(6, 3, generator=gen(2), dtype=DTYPE)
        _, rb = linalg.qr_thin(b)
        assert not bool(linalg.qr_is_rank_deficient(rb, b))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_full_rank_unique(self, seed):
        a = torch.randn(5, 3, generator=gen(seed), dtype=DTYPE)
        q, r = linalg.qr_thin(a)
        assert fro(q @ r - a) < 1e-10 * max(1.0, fro(a))
        assert bool((torch.diagonal(r) >= 0).all())


class TestSvdAndEig:
    def test_diag_singular_values(self):
        u, s, v = linalg.svd_thin(torch.diag(torch.tensor([3.0, 2.0], dtype=DTYPE)))
        assert torch.allclose(s, torch.tensor([3.0, 2.0], dtype=DTYPE))

    def test_zero_matrix(self):
        _, s, _ = linalg.svd_thin(torch.zeros(2, 2, dtype=DTYPE))
        assert torch.equal(s, torch.zeros(2, dtype=DTYPE))

    def test_reconstruction_seed11(self):
        a = torch.randn(5, 3, generator=gen(11), dtype=DTYPE)
        u, s, v = linalg.svd_thin(a)
        assert fro(u @ torch.diag(s) @ v.mT - a) < 1e-10

    def test_svd_matches_gram_eigenvalues(self):
        a = torch.randn(6, 4, generator=gen(5), dtype=DTYPE)
        _, s, _ = linalg.svd_thin(a)
        lam, _ = linalg.sym_eig(a.mT @ a)
        assert fro(s - torch.sqrt(torch.clamp(lam, min=0.0))) < 1e-8

    def test_sym_eig_descending_and_reconstructs(self):
        s = random_spd(5, gen(9))
        lam, v = linalg.sym_eig(s)
        assert bool((lam[:-1] >= lam[1:]).all())
        assert fro(v @ torch.diag(lam) @ v.mT - s) < 1e-10

    def test_sym_eig_rejects_asymmetric(self):
        with pytest.raises(NotSymmetricError):
            linalg.sym_eig(torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=DTYPE))


class TestSpdApply:
    def test_sqrt_diagonal(self):
        s = torch.diag(torch.tensor([4.0, 9.0], dtype=DTYPE))
        out = linalg.spd_apply(s, "sqrt")
        assert fro(out - torch.diag(torch.tensor([2.0, 3.0], dtype=DTYPE))) < 1e-12

    def test_pow_half_matches_sqrt(self):
        s = torch.diag(torch.tensor([4.0, 4.0], dtype=DTYPE))
        out = linalg.spd_apply(s, "pow", exponent=0.5)
        assert fro(out - 2.0 * torch.eye(2, dtype=DTYPE)) < 1e-12

    def test_log_exp_round_trip_seed3(self):
        s = random_spd(4, gen(3))
        back = linalg.spd_apply(linalg.spd_apply(s, "log"), "exp")
        assert fro(back - s) < 1e-8

    def test_sqrt_then_square(self):
        s = random_spd(5, gen(8))
        root = linalg.spd_apply(s, "sqrt")
        assert fro(root @ root - s) < 1e-8

    def test_matches_numpy_eig_route(self):
        s = random_spd(6, gen(21))
        lam, v = np.linalg.eigh(s.numpy())
        expect = torch.from_numpy((v * np.log(lam)) @ v.T)
        assert fro(linalg.spd_apply(s, "log") - expect) < 1e-10

    def test_clamping_flag_and_strict(self):
        s = torch.diag(torch.tensor([1.0, -0.5], dtype=DTYPE))
        out, clamped = linalg.spd_apply(s, "sqrt", return_clamped=True)
        assert clamped
        assert bool(torch.isfinite(out).all())
        with pytest.raises(NotPositiveDefiniteError):
            linalg.spd_apply(s, "sqrt", strict=True)

    def test_unknown_function(self):
        with pytest.raises(ValueError):
            linalg.spd_apply(torch.eye(2, dtype=DTYPE), "cube")

    def test_pow_requires_exponent(self):
        with pytest.raises(ValueError):
            linalg.spd_apply(torch.eye(2, dtype=DTYPE), "pow")

    def test_multi_matches_single(self):
        s = random_spd(5, gen(13))
        root, inv_root, logm = linalg.spd_apply_multi(s, ("sqrt", "inv_sqrt", "log"))
        assert torch.equal(root, linalg.spd_apply(s, "sqrt"))
        assert torch.equal(inv_root, linalg.spd_apply(s, "inv_sqrt"))
        assert torch.equal(logm, linalg.spd_apply(s, "log"))

    def test_spd_clamp_repairs(self):
        s = torch.diag(torch.tensor([2.0, -1.0], dtype=DTYPE))
        repaired, clamped = linalg.spd_clamp(s)
        assert clamped
        lam = torch.linalg.eigvalsh(repaired)
        assert float(lam.min()) >= linalg.SPD_FLOOR * 0.999

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_sqrt_inverse_pair(self, seed):
        s = random_spd(4, gen(seed))
        root, inv_root = linalg.spd_sqrt_and_inv_sqrt(s)
        assert fro(root @ inv_root - torch.eye(4, dtype=DTYPE)) < 1e-8


# Gram kernels: f(S) for f(x) = cos(sqrt x), sin(sqrt x)/sqrt x,
# arctan(sqrt x)/sqrt x, checked against scalar math on the spectrum.
class TestGramKernels:
    def scalar_reference(self, fn, x):
        if fn == "cos_sqrt":
            return math.cos(math.sqrt(x)) if x > 0 else 1.0
        if fn == "sinc_sqrt":
            return math.sin(math.sqrt(x)) / math.sqrt(x) if x > 0 else 1.0
        if fn == "atan_sqrt":
            return math.atan(math.sqrt(x)) / math.sqrt(x) if x > 0 else 1.0
        raise AssertionError(fn)

    @pytest.mark.parametrize("fn", ["cos_sqrt", "sinc_sqrt", "atan_sqrt"])
    def test_zero_matrix_gives_limit_value(self, fn):
        out = linalg.spd_apply(torch.zeros(3, 3, dtype=DTYPE), fn)
        expect = self.scalar_reference(fn, 0.0) * torch.eye(3, dtype=DTYPE)
        assert fro(out - expect) < 1e-12

    @pytest.mark.parametrize("fn", ["cos_sqrt", "sinc_sqrt", "atan_sqrt"])
    @pytest.mark.parametrize("x", [1e-6, 9e-5, 2e-4, 0.3, 2.0])
    def test_matches_scalar_on_spectrum(self, fn, x):
        s = x * torch.eye(2, dtype=DTYPE)
        out = linalg.spd_apply(s, fn)
        assert abs(float(out[0, 0]) - self.scalar_reference(fn, x)) < 1e-11

    @pytest.mark.parametrize("fn", ["cos_sqrt", "sinc_sqrt", "atan_sqrt"])
    def test_series_closed_form_agree_at_crossover(self, fn):
        # both branches evaluated just around the cutoff agree to ~1e-12
        lo = linalg.spd_apply((linalg._SERIES_CUTOFF * 0.999) * torch.eye(1, dtype=DTYPE), fn)
        hi = linalg.spd_apply((linalg._SERIES_CUTOFF * 1.001) * torch.eye(1, dtype=DTYPE), fn)
        assert abs(float(lo[0, 0]) - float(hi[0, 0])) < 1e-10


class TestDerivatives:
    @pytest.mark.parametrize("fn", ["sqrt", "inv_sqrt", "log", "exp"])
    def test_gradcheck_distinct_spectrum(self, fn):
        s = random_spd(3, gen(17)).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda m: linalg.spd_apply(linalg.symmetrize(m), fn), (s,),
            eps=1e-6, atol=1e-6, check_batched_grad=False,
        )

    @pytest.mark.parametrize("fn", ["cos_sqrt", "sinc_sqrt", "atan_sqrt"])
    def test_gradcheck_gram_kernels(self, fn):
        a = torch.randn(4, 2, generator=gen(19), dtype=DTYPE)
        d = (a.mT @ a).mul(0.05).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda m: linalg.spd_apply(linalg.symmetrize(m), fn), (d,),
            eps=1e-6, atol=1e-6, check_batched_grad=False,
        )

    def test_repeated_spectrum_finite_gradient(self):
        # identity has a fully repeated spectrum; torch's own eigh backward
        # returns NaN here, the divided-difference path must not
        s = torch.eye(3, dtype=DTYPE).requires_grad_(True)
        out = linalg.spd_apply(s, "log")
        out.sum().backward()
        assert bool(torch.isfinite(s.grad).all())

    def test_repeated_spectrum_matches_fd(self):
        base = torch.eye(3, dtype=DTYPE)
        probe = torch.zeros(3, 3, dtype=DTYPE)
        probe[0, 1] = probe[1, 0] = 1.0
        s = base.clone().requires_grad_(True)
        linalg.spd_apply(s, "sqrt").sum().backward()
        analytic = float((s.grad * probe).sum())
        h = 1e-6
        up = linalg.spd_apply(base + h * probe, "sqrt").sum()
        dn = linalg.spd_apply(base - h * probe, "sqrt").sum()
        fd = float((up - dn) / (2 * h))
        assert abs(analytic - fd) < 1e-6

    def test_multi_backward_accumulates(self):
        s = random_spd(3, gen(23))
        sa = s.clone().requires_grad_(True)
        root, inv_root = linalg.spd_apply_multi(sa, ("sqrt", "inv_sqrt"))
        (root.sum() + 2.0 * inv_root.sum()).backward()
        sb = s.clone().requires_grad_(True)
        (linalg.spd_apply(sb, "sqrt").sum() + 2.0 * linalg.spd_apply(sb, "inv_sqrt").sum()).backward()
        assert fro(sa.grad - sb.grad) < 1e-12


class TestHelpers:
    def test_check_finite(self):
        with pytest.raises(Exception):
            linalg.check_finite(torch.tensor([float("nan")]), "probe")
        linalg.check_finite(torch.ones(3), "probe")

    def test_symmetrize(self):
        a = torch.randn(3, 3, generator=gen(2), dtype=DTYPE)
        s = linalg.symmetrize(a)
        assert fro(s - s.mT) == 0.0

    def test_as_matrix_dtype(self):
        out = linalg.as_matrix([[1, 2], [3, 4]])
        assert out.dtype == DTYPE
