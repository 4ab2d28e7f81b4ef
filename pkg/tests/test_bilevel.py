import copy
import math

import numpy as np
import pytest
import torch

from mmkd import bilevel as B
from mmkd.baselines import aver_weights
from mmkd.errors import BufferNotReady
from mmkd.losses import ce_loss, distill_losses
from mmkd.meta_weight import MetaWeightNet
from mmkd.models import flat_parameters
from conftest import TinyProblem, central_difference, max_rel_err


def quadratic_hg(theta0, phi0, lr, m):
    """Inner loss 1/2 (theta - phi)^2, outer 1/2 theta_M^2, through the generic core."""
    phi = torch.tensor(phi0, dtype=torch.float64, requires_grad=True)
    snaps = [[torch.tensor(theta0, dtype=torch.float64)]]
    for _ in range(m):
        t = snaps[-1][0]
        snaps.append([t - lr * (t - phi.detach())])
    step = lambda th, th_const: 0.5 * (th[0] - phi) ** 2  # noqa: E731
    adjoint = [snaps[-1][0].clone()]
    (g,) = B.reverse_hypergradient(snaps, [step] * m, [lr] * m, adjoint, [phi])
    return snaps[-1][0].item(), g.item()


def test_quadratic_toy_one_step():
    theta1, g = quadratic_hg(1.0, 0.0, 0.5, 1)
    assert theta1 == 0.5
    assert abs(g - 0.25) < 1e-8


@pytest.mark.parametrize("m,lr,phi", [(2, 0.5, 0.0), (3, 0.3, 0.7), (5, 0.1, -1.2)])
def test_quadratic_toy_closed_form(m, lr, phi):
    theta_m, g = quadratic_hg(1.0, phi, lr, m)
    assert abs(theta_m - (phi + (1 - lr) ** m * (1 - phi))) < 1e-12
    assert abs(g - theta_m * (1 - (1 - lr) ** m)) < 1e-8


@pytest.mark.parametrize("m", [1, 2, 4])
def test_core_matches_unrolled_autograd_with_state_dependent_weights(m):
    """Step loss 1/2 w theta^2 where w = sigmoid(phi . theta) is frozen for the step gradient."""
    g = torch.Generator().manual_seed(m)
    phi = torch.randn(3, dtype=torch.float64, generator=g).requires_grad_(True)
    theta0 = torch.randn(3, dtype=torch.float64, generator=g)
    lr = 0.3

    def weight(theta_const):
        return torch.sigmoid((phi * theta_const).sum())

    # oracle: unroll with autograd through everything
    th = theta0.clone()
    for _ in range(m):
        th = th - lr * weight(th) * th
    e = 0.5 * (th ** 2).sum()
    (oracle,) = torch.autograd.grad(e, [phi])

    snaps = [[theta0]]
    with torch.no_grad():
        for _ in range(m):
            t = snaps[-1][0]
            snaps.append([t - lr * weight(t) * t])
    step = lambda th, th_c: 0.5 * weight(th_c[0]) * (th[0] ** 2).sum()  # noqa: E731
    (got,) = B.reverse_hypergradient(snaps, [step] * m, [lr] * m, [snaps[-1][0].clone()], [phi])
    assert torch.allclose(got, oracle, rtol=1e-10, atol=1e-12)


def test_non_finite_adjoint_raises():
    phi = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    snaps = [[torch.tensor(1.0, dtype=torch.float64)], [torch.tensor(0.5, dtype=torch.float64)]]
    step = lambda th, th_c: 0.5 * (th[0] - phi) ** 2  # noqa: E731
    with pytest.raises(B.HypergradientError):
        B.reverse_hypergradient(snaps, [step], [0.5], [torch.tensor(float("nan"), dtype=torch.float64)], [phi])


def outer_value(p: TinyProblem, m, lr=0.1):
    traj = B.inner_loop(p.student, p.align, p.teachers, p.buffer, p.meta, m, p.settings, lr, p.rng())
    return traj, B.outer_objective(p.student, p.align, traj.snapshots[-1], p.x, p.y)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_reverse_hg_matches_finite_differences(m):
    p = TinyProblem()
    n_params = sum(q.numel() for q in [*p.student.parameters(), *p.align.parameters(),
                                        *p.meta.parameters()])
    assert n_params <= 500
    traj, _ = outer_value(p, m)
    got = B.reverse_hg(traj, p.meta, p.student, p.align, p.x, p.y, p.settings)
    fd = central_difference(lambda: outer_value(p, m)[1], list(p.meta.parameters()))
    assert max_rel_err(got, fd) < 1e-4


def test_reverse_hg_respects_uniform_override():
    p = TinyProblem()
    p.settings.uniform_wr = True
    traj, _ = outer_value(p, 2)
    got = B.reverse_hg(traj, p.meta, p.student, p.align, p.x, p.y, p.settings)
    # the logit head is unused, so its hypergradient vanishes
    n_logit = len(list(p.meta.logit_head.parameters()))
    assert all(torch.count_nonzero(g) == 0 for g in got[:n_logit])
    fd = central_difference(lambda: outer_value(p, 2)[1], list(p.meta.parameters()))
    assert max_rel_err(got, fd) < 1e-4


def test_zero_steps_gives_single_snapshot_and_zero_gradient():
    p = TinyProblem()
    traj = B.inner_loop(p.student, p.align, p.teachers, p.buffer, p.meta, 0, p.settings, 0.1, p.rng())
    assert len(traj.snapshots) == 1 and traj.num_steps == 0
    grads = B.reverse_hg(traj, p.meta, p.student, p.align, p.x, p.y, p.settings)
    assert all(torch.count_nonzero(g) == 0 for g in grads)


def test_zero_learning_rate_is_a_null_step():
    p = TinyProblem()
    traj = B.inner_loop(p.student, p.align, p.teachers, p.buffer, p.meta, 1, p.settings, 0.0, p.rng())
    assert all(torch.equal(traj.snapshots[0][k], traj.snapshots[1][k]) for k in traj.snapshots[0])


def test_two_steps_match_hand_rolled_loop():
    p = TinyProblem()
    lr = 0.2
    traj = B.inner_loop(p.student, p.align, p.teachers, p.buffer, p.meta, 2, p.settings, lr, p.rng(9))

    student, align = copy.deepcopy(p.student), copy.deepcopy(p.align)
    rng = p.rng(9)
    for _ in range(2):
        x, y = p.buffer.sample(p.settings.batch_size, rng)
        s = student(x)
        t = [t_(x) for t_ in p.teachers]
        with torch.no_grad():
            w_r, w_f = p.meta(type(s)(s.logits.detach(), s.features.detach()), t, p.settings.tau)
        loss = distill_losses(s, align(s.features), t, y, w_r, w_f, 1.0, 10.0, 4.0).L_total
        params = [*student.parameters(), *align.parameters()]
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for q, g in zip(params, grads):
                q -= lr * g
    expected = torch.cat([flat_parameters(student), flat_parameters(align)])
    got = torch.cat([v.reshape(-1) for v in traj.snapshots[-1].values()])
    assert torch.allclose(got, expected, rtol=0, atol=1e-12)


def test_inner_loop_needs_a_full_batch():
    p = TinyProblem()
    p.settings.batch_size = 100
    with pytest.raises(BufferNotReady):
        B.inner_loop(p.student, p.align, p.teachers, p.buffer, p.meta, 1, p.settings, 0.1, p.rng())


def test_outer_objective_examples():
    p = TinyProblem()
    params = B.student_params(p.student, p.align)
    direct = ce_loss(p.student(p.x).logits, p.y)
    assert B.outer_objective(p.student, p.align, params, p.x, p.y).item() == pytest.approx(direct.item(), abs=1e-14)
    with torch.no_grad():
        for k in params:
            if k.startswith("net.head"):
                params[k].zero_()
    assert B.outer_objective(p.student, p.align, params, p.x, p.y).item() == pytest.approx(math.log(3))


def test_outer_update_leaves_live_student_untouched():
    p = TinyProblem()
    before = torch.cat([flat_parameters(p.student), flat_parameters(p.align)]).clone()
    phi_before = flat_parameters(p.meta).clone()
    opt = B.make_meta_optimizer(p.meta, 1e-2)
    diag = B.outer_update(p.student, p.align, p.teachers, p.buffer, p.meta, opt, 2, p.settings, 0.1,
                          p.rng(1), p.rng(2))
    assert torch.equal(torch.cat([flat_parameters(p.student), flat_parameters(p.align)]), before)
    assert not torch.equal(flat_parameters(p.meta), phi_before)
    assert diag.hypergrad_norm > 0 and 0 <= diag.mean_entropy_wr <= math.log(2) + 1e-9


def test_meta_step_zero_gradient_keeps_phi():
    meta = MetaWeightNet(3, 2, 4)
    before = flat_parameters(meta).clone()
    opt = B.make_meta_optimizer(meta, 1e-3)
    B.meta_step(meta, [torch.zeros_like(q) for q in meta.parameters()], opt)
    assert torch.equal(flat_parameters(meta), before)


def adam_scalar(g, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


def test_meta_step_constant_gradient_is_monotone_and_matches_scalar_adam():
    meta = MetaWeightNet(3, 2, 4).double()
    opt = B.make_meta_optimizer(meta, 1e-3)
    params = list(meta.parameters())
    signs = [torch.where(torch.rand_like(q) > 0.5, 1.0, -1.0) * 0.3 for q in params]
    start = [q.detach().clone() for q in params]
    trace = []
    for _ in range(50):
        B.meta_step(meta, signs, opt)
        trace.append(params[0].detach().clone())
    deltas = torch.stack([t - start[0] for t in trace])
    direction = -torch.sign(signs[0])
    assert ((deltas[1:] - deltas[:-1]) * direction > 0).all()
    expected = adam_scalar(0.3, 50)[-1]
    assert torch.allclose((trace[-1] - start[0]).abs(), torch.full_like(start[0], abs(expected)), atol=1e-12)


def test_meta_weights_uniform_overrides():
    p = TinyProblem()
    p.settings.uniform_wf = True
    out = p.student(p.x[:6])
    t = B.teacher_outputs(p.teachers, p.x[:6])
    w_r, w_f = B.meta_weights(p.meta, out, t, p.settings)
    assert torch.equal(w_f, aver_weights(6, 2, torch.float64))
    assert not torch.allclose(w_r, w_f)
