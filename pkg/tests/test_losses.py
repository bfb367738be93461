import pytest
import torch

from multitap.losses import (
    LossKind,
    LossSpec,
    Reduction,
    ShapeMismatchError,
    compute_loss,
    l1,
    monitor_loss,
    mse,
    mse_no_forward,
    mse_no_forward_grad,
    smooth_l1,
)


class TestMse:
    def test_example(self):
        out = mse(torch.tensor([1.0, 3.0]), torch.tensor([1.0, 1.0]), Reduction.MEAN)
        assert out.item() == 2.0

    def test_zero_when_equal(self):
        x = torch.randn(7)
        assert mse(x, x.clone()).item() == 0.0

    def test_matches_scalar_loop_oracle(self):
        g = torch.Generator().manual_seed(0)
        p = torch.randn(10, generator=g, dtype=torch.float64)
        t = torch.randn(10, generator=g, dtype=torch.float64)
        acc = 0.0
        for i in range(10):
            acc += (p[i].item() - t[i].item()) ** 2
        assert abs(mse(p, t, Reduction.SUM).item() - acc) < 1e-12
        assert abs(mse(p, t, Reduction.MEAN).item() - acc / 10) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mse(torch.zeros(3), torch.zeros(4))


class TestMseNoForward:
    def test_dummy_is_exactly_zero(self):
        out = mse_no_forward(torch.randn(5, requires_grad=True), torch.randn(5))
        assert out.item() == 0.0

    def test_example_gradient(self):
        pred = torch.tensor([1.0, 3.0], requires_grad=True)
        target = torch.tensor([1.0, 1.0])
        mse_no_forward(pred, target, Reduction.MEAN).backward()
        assert pred.grad.tolist() == [0.0, 2.0]

    def test_upstream_scaling(self):
        pred = torch.tensor([1.0, 3.0], requires_grad=True)
        target = torch.tensor([1.0, 1.0])
        out = mse_no_forward(pred, target, Reduction.MEAN)
        out.backward(gradient=torch.tensor(0.5))
        assert pred.grad.tolist() == [0.0, 1.0]

    def test_equal_inputs_zero_grad(self):
        pred = torch.randn(6, requires_grad=True)
        mse_no_forward(pred, pred.detach().clone()).backward()
        assert torch.all(pred.grad == 0)

    def test_functional_form(self):
        pred = torch.tensor([1.0, 3.0])
        target = torch.tensor([1.0, 1.0])
        dummy, grad = mse_no_forward_grad(pred, target, Reduction.MEAN, upstream_grad=1.0)
        assert dummy.item() == 0.0 and grad.tolist() == [0.0, 2.0]
        _, grad = mse_no_forward_grad(pred, target, Reduction.MEAN, upstream_grad=0.5)
        assert grad.tolist() == [0.0, 1.0]

    @pytest.mark.parametrize("reduction", [Reduction.MEAN, Reduction.SUM])
    @pytest.mark.parametrize("upstream", [1.0, 0.5, 0.125])
    def test_gradient_equivalence_with_autodiff_mse(self, reduction, upstream):
        g = torch.Generator().manual_seed(42)
        for shape in [(3,), (17, 5), (64, 96)]:
            pred_a = torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)
            target = torch.randn(*shape, generator=g, dtype=torch.float64)
            pred_b = pred_a.detach().clone().requires_grad_(True)
            mse(pred_b, target, reduction).backward(gradient=torch.tensor(upstream, dtype=torch.float64))
            mse_no_forward(pred_a, target, reduction).backward(
                gradient=torch.tensor(upstream, dtype=torch.float64)
            )
            rel = (pred_a.grad - pred_b.grad).abs().max() / pred_b.grad.abs().max()
            assert rel < 1e-6


class TestOtherLosses:
    def test_zero_diff(self):
        x = torch.randn(4)
        assert smooth_l1(x, x.clone()).item() == 0.0
        assert l1(x, x.clone()).item() == 0.0

    def test_smooth_l1_quadratic_zone(self):
        out = smooth_l1(torch.tensor([0.5]), torch.tensor([0.0]), beta=1.0)
        assert abs(out.item() - 0.125) < 1e-7

    def test_l1_absolute(self):
        assert l1(torch.tensor([-2.0]), torch.tensor([0.0])).item() == 2.0

    def test_smooth_l1_linear_zone(self):
        out = smooth_l1(torch.tensor([3.0]), torch.tensor([0.0]), beta=1.0)
        assert abs(out.item() - 2.5) < 1e-7


class TestSpecAndMonitor:
    def test_compute_loss_dispatch(self):
        p, t = torch.tensor([1.0, 3.0]), torch.tensor([1.0, 1.0])
        assert compute_loss(p, t, LossSpec(kind=LossKind.MSE)).item() == 2.0
        assert compute_loss(p.requires_grad_(), t, LossSpec(kind=LossKind.MSE_NO_FORWARD)).item() == 0.0

    def test_monitor_loss_reports_true_value_for_no_forward(self):
        p, t = torch.tensor([1.0, 3.0]), torch.tensor([1.0, 1.0])
        spec = LossSpec(kind=LossKind.MSE_NO_FORWARD)
        assert monitor_loss(p, t, spec).item() == 2.0

    def test_monitor_every_validated(self):
        with pytest.raises(ValueError):
            LossSpec(monitor_every=0)
