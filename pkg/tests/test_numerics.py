import math

import numpy as np
import pytest
import torch

from src.core import numerics
from src.core.errors import GradientCheckError, NumericsError
from src.core.model import build_key_mask, causal_mask


class _WrongCube(torch.autograd.Function):
    """x**3 with the derivative of x**2."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 3

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2 * x


class TestMaskedSoftmax:
    def test_masked_keys_are_exactly_zero(self):
        generator = torch.Generator().manual_seed(0)
        for seed in range(100):
            length = 4 + seed % 13
            ratio = [0.0, 0.15, 0.25, 0.45, 0.7][seed % 5]
            mask = build_key_mask(length, ratio, seed)
            logits = torch.randn(3, length, length, generator=generator) * 5
            probs = numerics.masked_softmax(logits, mask.additive())
            for key in mask.masked_keys:
                assert torch.all(probs[..., key] == 0)
            torch.testing.assert_close(probs.sum(dim=-1), torch.ones(3, length), atol=1e-6, rtol=0)

    def test_worked_examples(self):
        uniform = numerics.masked_softmax(torch.ones(1, 4), torch.zeros(1, 4))
        torch.testing.assert_close(uniform, torch.full((1, 4), 0.25), atol=0, rtol=0)

        inf = float("-inf")
        probs = numerics.masked_softmax(torch.tensor([[5.0, 2.0, 9.0]], dtype=torch.float64),
                                        torch.tensor([[0.0, inf, 0.0]], dtype=torch.float64))
        denominator = math.exp(5) + math.exp(9)
        assert probs[0, 1].item() == 0.0
        assert abs(probs[0, 0].item() - math.exp(5) / denominator) < 1e-12
        assert abs(probs[0, 2].item() - math.exp(9) / denominator) < 1e-12

        logits = [0.3, -1.2, 2.0, 0.0]
        probs = numerics.masked_softmax(torch.tensor([logits]), torch.tensor([[0.0, 0.0, inf, 0.0]]))
        kept = [math.exp(x) if i != 2 else 0.0 for i, x in enumerate(logits)]
        expected = torch.tensor([[k / sum(kept) for k in kept]])
        torch.testing.assert_close(probs, expected, atol=1e-6, rtol=0)

    def test_shift_invariant(self):
        generator = torch.Generator().manual_seed(1)
        logits = torch.randn(5, 7, generator=generator, dtype=torch.float64)
        mask = build_key_mask(7, 0.3, seed=2).additive(torch.float64)[:5]
        base = numerics.masked_softmax(logits, mask)
        for shift in (-50.0, 3.5, 1e4):
            torch.testing.assert_close(numerics.masked_softmax(logits + shift, mask), base, atol=1e-9, rtol=0)

    def test_large_logits_do_not_overflow(self):
        logits = torch.tensor([[1e4, -1e4, 1e4 - 1.0]])
        probs = numerics.masked_softmax(logits, torch.zeros(1, 3))
        assert torch.isfinite(probs).all()
        assert abs(probs.sum().item() - 1.0) < 1e-6

    def test_causal_future_is_zero(self):
        probs = numerics.masked_softmax(torch.randn(6, 6), causal_mask(6))
        assert torch.all(probs.triu(diagonal=1) == 0)

    def test_empty_row_raises(self):
        mask = torch.zeros(2, 3)
        mask[1, :] = float("-inf")
        with pytest.raises(NumericsError, match="empty attention row"):
            numerics.masked_softmax(torch.randn(2, 3), mask)

    def test_non_finite_logits_raise(self):
        logits = torch.zeros(2, 2)
        logits[0, 0] = float("nan")
        with pytest.raises(NumericsError):
            numerics.masked_softmax(logits, torch.zeros(2, 2))

    def test_float64_sentinel(self):
        mask = causal_mask(4, torch.float64)
        assert mask.dtype == torch.float64
        assert mask[0, 1].item() == numerics.mask_sentinel(torch.float64)
        assert numerics.blocked_entries(mask).sum().item() == 6


class TestCosineDistance:
    def test_identical_vectors_give_exact_zero(self):
        a = torch.randn(5, 7, dtype=torch.float64)
        assert torch.all(numerics.cosine_distance(a, a.clone()) == 0)

    def test_opposite_vectors_give_two(self):
        a = torch.randn(4, 3, dtype=torch.float64)
        torch.testing.assert_close(numerics.cosine_distance(a, -a), torch.full((4,), 2.0, dtype=torch.float64))

    def test_zero_vector_raises(self):
        with pytest.raises(NumericsError, match="degenerate feature vector"):
            numerics.cosine_distance(torch.zeros(1, 3), torch.ones(1, 3))


class TestKernels:
    def test_cross_entropy_of_uniform_logits(self):
        loss = numerics.cross_entropy(torch.zeros(2, 5, 11), torch.zeros(2, 5, dtype=torch.long))
        assert abs(loss.item() - math.log(11)) < 1e-6

    def test_rms_norm_unit_rms(self):
        x = torch.randn(3, 8, dtype=torch.float64) * 4
        y = numerics.rms_norm(x, torch.ones(8, dtype=torch.float64), eps=0.0)
        torch.testing.assert_close(y.pow(2).mean(dim=-1), torch.ones(3, dtype=torch.float64))

    def test_l2_normalize(self):
        x = numerics.l2_normalize(torch.randn(4, 6))
        torch.testing.assert_close(x.norm(dim=-1), torch.ones(4))

    def test_check_finite(self):
        with pytest.raises(NumericsError, match="index"):
            numerics.check_finite(torch.tensor([1.0, float("inf")]), "probe")


class TestGradientCheck:
    def test_correct_gradient_passes(self):
        report = numerics.gradient_check(
            lambda x: (x["a"] ** 2 * x["b"]).sum() + x["a"].sin().sum(),
            {"a": torch.randn(3, 4), "b": torch.randn(3, 4)},
            epsilon=1e-4, tolerance=1e-4)
        assert report.passed
        assert report.checked == {"a": 12, "b": 12}

    def test_wrong_gradient_fails(self):
        x = torch.linspace(0.5, 2.0, 6)
        report = numerics.gradient_check(lambda v: _WrongCube.apply(v["x"]).sum(), {"x": x})
        assert not report.passed
        assert report.worst() > 0.1

    def test_max_coords_subsamples(self):
        report = numerics.gradient_check(lambda x: (x["w"] ** 2).sum(), {"w": torch.randn(50)},
                                         max_coords=7, seed=3)
        assert report.checked["w"] == 7
        assert report.passed

    def test_unused_input_has_zero_gradient(self):
        report = numerics.gradient_check(lambda x: x["a"].sum(), {"a": torch.randn(3), "b": torch.randn(2)})
        assert report.passed
        assert report.max_abs_error["b"] == 0.0

    def test_non_finite_perturbation_raises(self):
        with pytest.raises(GradientCheckError) as info:
            numerics.gradient_check(lambda x: torch.sqrt(x["x"]).sum(),
                                    {"x": torch.tensor([1.0, 5e-5])}, epsilon=1e-4)
        assert info.value.name == "x"
        assert info.value.index == (1,)

    def test_runs_in_float64(self):
        seen = []

        def fn(x):
            seen.append(x["v"].dtype)
            return x["v"].sum()

        numerics.gradient_check(fn, {"v": torch.ones(2, dtype=torch.float32)})
        assert set(seen) == {torch.float64}


def test_relative_error_is_symmetric():
    a, b = np.array([1.0, -2.0, 0.0]), np.array([1.1, -2.0, 0.0])
    np.testing.assert_allclose(numerics.relative_error(a, b), numerics.relative_error(b, a))
