import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from swinmae.config import ScheduleConfig
from swinmae.gradcheck import check_coordinates
from swinmae.optim import NonFiniteError, OptState, adamw_step, ce_loss, dice_loss, lr_at, seg_loss

PAPER = ScheduleConfig(base_lr=1e-4, warmup_epochs=10, total_epochs=800)


def test_lr_boundaries():
    assert lr_at(PAPER, 0) == 0.0
    assert lr_at(PAPER, 10) == 1e-4
    assert lr_at(PAPER, 800) == 0.0


def test_lr_cosine_midpoint():
    s = ScheduleConfig(base_lr=3e-4, warmup_epochs=10, total_epochs=810)
    assert abs(lr_at(s, 410) - 1.5e-4) < 1e-12


def test_lr_continuous_at_warmup_and_monotone_after():
    below = lr_at(PAPER, 10 - 1e-9)
    assert abs(below - lr_at(PAPER, 10)) < 1e-12
    xs = np.linspace(10, 800, 2000)
    ys = [lr_at(PAPER, x) for x in xs]
    assert all(b <= a for a, b in zip(ys, ys[1:]))


@pytest.mark.parametrize("epoch", [-0.1, 800.5])
def test_lr_out_of_range(epoch):
    with pytest.raises(ValueError):
        lr_at(PAPER, epoch)


def _sched(wd=0.0, lr=0.1):
    return ScheduleConfig(base_lr=lr, warmup_epochs=0, total_epochs=10, weight_decay=wd)


def test_zero_grad_no_decay_is_fixed_point():
    p = {"w": torch.randn(5)}
    before = p["w"].clone()
    adamw_step(p, {"w": torch.zeros(5)}, OptState(), _sched(), 0.0, lr=0.1)
    assert torch.equal(p["w"], before)


def test_first_step_magnitude():
    p = {"w": torch.tensor([2.0], dtype=torch.float64)}
    adamw_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, OptState(), _sched(), 0.0, lr=0.1)
    # bias-corrected first step: lr * g / (sqrt(g^2) + eps)
    assert p["w"].item() == pytest.approx(2.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_decoupled_decay_with_zero_grad():
    p = {"w": torch.tensor([3.0], dtype=torch.float64)}
    st_ = OptState()
    for _ in range(5):
        adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)}, st_, _sched(wd=0.05), 0.0, lr=0.1)
    assert p["w"].item() == pytest.approx(3.0 * (1 - 0.1 * 0.05) ** 5, rel=1e-14)


def test_no_decay_names_are_exempt():
    p = {"w": torch.tensor([3.0]), "b": torch.tensor([3.0])}
    g = {"w": torch.zeros(1), "b": torch.zeros(1)}
    adamw_step(p, g, OptState(), _sched(wd=0.5), 0.0, lr=0.1, no_decay={"b"})
    assert p["b"].item() == 3.0
    assert p["w"].item() < 3.0


def test_non_finite_gradient_aborts_with_name():
    p = {"layer.weight": torch.zeros(2)}
    with pytest.raises(NonFiniteError, match="layer.weight"):
        adamw_step(p, {"layer.weight": torch.tensor([1.0, float("nan")])}, OptState(), _sched(), 0.0)


def test_quadratic_convergence():
    x = {"x": torch.tensor([5.0], dtype=torch.float64)}
    state = OptState()
    sched = ScheduleConfig(base_lr=0.5, warmup_epochs=0, total_epochs=200, weight_decay=0.0)
    f0 = 0.5 * 5.0**2
    for step in range(200):
        adamw_step(x, {"x": x["x"].clone()}, state, sched, float(step))
    assert 0.5 * x["x"].item() ** 2 < 1e-3 * f0


def test_adamw_deterministic():
    def run():
        p = {"w": torch.linspace(-1, 1, 7)}
        s = OptState()
        for k in range(3):
            adamw_step(p, {"w": torch.sin(p["w"] * (k + 1))}, s, _sched(wd=0.05), 0.0, lr=0.01)
        return p["w"]

    assert torch.equal(run(), run())


def test_ce_uniform_logits():
    loss = ce_loss(torch.zeros(3, 4), torch.tensor([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-7)


def test_ce_stable_for_huge_logits():
    logits = torch.zeros(2, 3)
    logits[:, 1] = 1000.0
    loss = ce_loss(logits, torch.tensor([1, 1]))
    assert torch.isfinite(loss) and loss.item() < 1e-6


def test_ce_rejects_bad_class():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 3), torch.tensor([3]))


def test_ce_finite_difference():
    torch.manual_seed(0)
    logits = torch.randn(2, 5, 5, 3, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 3, (2, 5, 5))
    assert check_coordinates(lambda: ce_loss(logits, target), [logits]) < 1e-5


def _onehot(target, k):
    return torch.nn.functional.one_hot(target, k).double()


def test_dice_perfect_prediction():
    target = torch.zeros(64, 64, dtype=torch.long)
    target[10:30, 5:40] = 1
    assert dice_loss(_onehot(target, 2), target).item() < 1e-3


def test_dice_complement_prediction():
    target = torch.zeros(64, 64, dtype=torch.long)
    target[10:30, 5:40] = 1
    loss = dice_loss(_onehot(1 - target, 2), target).item()
    # no overlap: each class scores eps / (64*64 + eps)
    assert loss == pytest.approx(1 - 1 / 4097, abs=1e-12)
    assert 0.99 <= loss <= 1.0


def test_dice_finite_difference():
    torch.manual_seed(1)
    logits = torch.randn(6, 6, 3, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 3, (6, 6))
    assert check_coordinates(lambda: dice_loss(logits.softmax(-1), target), [logits]) < 1e-4


def test_seg_loss_zero_for_perfect_logits():
    target = torch.randint(0, 3, (2, 8, 8))
    logits = 1000.0 * (_onehot(target, 3) * 2 - 1)
    assert seg_loss(logits, target).item() == 0.0


def test_seg_loss_weights():
    torch.manual_seed(2)
    logits = torch.randn(2, 8, 8, 3, dtype=torch.float64)
    target = torch.randint(0, 3, (2, 8, 8))
    d = dice_loss(logits.softmax(-1), target)
    c = ce_loss(logits, target)
    assert seg_loss(logits, target, (1.0, 0.0)).item() == d.item()
    assert seg_loss(logits, target).item() == pytest.approx(0.5 * (d + c).item(), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 5), scale=st.floats(0.01, 50.0))
def test_losses_non_negative(seed, k, scale):
    g = torch.Generator().manual_seed(seed)
    logits = scale * torch.randn(3, 4, 4, k, generator=g, dtype=torch.float64)
    target = torch.randint(0, k, (3, 4, 4), generator=g)
    assert ce_loss(logits, target).item() >= 0
    assert dice_loss(logits.softmax(-1), target).item() >= 0
    assert seg_loss(logits, target).item() >= 0
