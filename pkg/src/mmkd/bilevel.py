"""Outer-loop training of the meta-weight network.

A copy of the student takes ``M`` plain SGD steps on hard-buffer batches under
the meta-weighted distillation loss; the meta parameters are then moved to
reduce the copy's cross-entropy on the buffer. The gradient through the
unrolled steps is computed in reverse mode (Reverse-HG): only parameter
snapshots are stored, and each step is rebuilt during the backward sweep to
form vector-Jacobian products with the step map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch.func import functional_call

from .baselines import aver_weights
from .buffer import HardBuffer
from .errors import BufferNotReady, ConfigError, TrainingError
from .losses import ce_loss, distill_losses
from .meta_weight import MetaWeightNet, mean_entropy
from .models import BatchOutput, sgd_step

log = logging.getLogger(__name__)

OUTER_EVAL_MAX = 1024


class HypergradientError(TrainingError):
    pass


@dataclass
class StepRecord:
    inputs: torch.Tensor
    labels: torch.Tensor
    teachers: list[BatchOutput]
    lr: float


@dataclass
class InnerTrajectory:
    snapshots: list[dict[str, torch.Tensor]]
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass
class InnerSettings:
    """The subset of the run configuration the inner loss needs."""

    alpha: float = 1.0
    beta: float = 10.0
    tau: float = 4.0
    batch_size: int = 64
    uniform_wr: bool = False
    uniform_wf: bool = False

    @classmethod
    def from_config(cls, cfg) -> "InnerSettings":
        return cls(alpha=cfg.effective_alpha, beta=cfg.beta, tau=cfg.tau, batch_size=cfg.batch_size,
                   uniform_wr=cfg.uniform_wr, uniform_wf=cfg.uniform_wf)


# -- functional student ---------------------------------------------------------

def student_params(student: torch.nn.Module, align: torch.nn.Module) -> dict[str, torch.Tensor]:
    params = {f"net.{k}": v for k, v in student.named_parameters()}
    params.update({f"align.{k}": v for k, v in align.named_parameters()})
    return params


def student_forward(student, align, params: dict[str, torch.Tensor],
                    inputs: torch.Tensor) -> tuple[BatchOutput, torch.Tensor]:
    net_p = {k[4:]: v for k, v in params.items() if k.startswith("net.")}
    align_p = {k[6:]: v for k, v in params.items() if k.startswith("align.")}
    out = functional_call(student, net_p, (inputs,))
    return out, functional_call(align, align_p, (out.features,))


@torch.no_grad()
def teacher_outputs(teachers: Sequence[torch.nn.Module], inputs: torch.Tensor) -> list[BatchOutput]:
    return [BatchOutput(*t(inputs)) for t in teachers]


def meta_weights(meta: MetaWeightNet, student_out: BatchOutput, teachers: Sequence[BatchOutput],
                 settings: InnerSettings, detach: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Weights from the meta network (student outputs detached unless ``detach=False``)."""
    s = BatchOutput(student_out.logits.detach(), student_out.features.detach()) if detach else student_out
    w_r, w_f = meta(s, teachers, settings.tau)
    if settings.uniform_wr or settings.uniform_wf:
        u = aver_weights(w_r.shape[0], w_r.shape[1], w_r.dtype, w_r.device)
        w_r = u if settings.uniform_wr else w_r
        w_f = u if settings.uniform_wf else w_f
    return w_r, w_f


def inner_loss(student, align, meta: MetaWeightNet, params: dict[str, torch.Tensor],
               record: StepRecord, settings: InnerSettings,
               weight_params: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
    """L_total of one inner step.

    The weights are constants for the step's own gradient. ``weight_params``
    (same values as ``params``) feeds the meta network through a separate,
    differentiable path so the reverse sweep sees how the weights move with theta.
    """
    out, aligned = student_forward(student, align, params, record.inputs)
    if weight_params is None:
        w_r, w_f = meta_weights(meta, out, record.teachers, settings)
    else:
        w_out, _ = student_forward(student, align, weight_params, record.inputs)
        w_r, w_f = meta_weights(meta, w_out, record.teachers, settings, detach=False)
    return distill_losses(out, aligned, record.teachers, record.labels, w_r, w_f,
                          settings.alpha, settings.beta, settings.tau).L_total


# -- inner loop -----------------------------------------------------------------

def inner_loop(student, align, teachers: Sequence[torch.nn.Module], buffer: HardBuffer,
               meta: MetaWeightNet, steps: int, settings: InnerSettings, lr: float,
               rng: np.random.Generator) -> InnerTrajectory:
    """Run ``steps`` SGD updates on a detached copy of the student's parameters.

    The live student is only read. Raises ``BufferNotReady`` if the buffer holds
    fewer than one batch while ``steps > 0``.
    """
    if steps < 0:
        raise ConfigError("number of inner steps must be nonnegative")
    theta = {k: v.detach().clone() for k, v in student_params(student, align).items()}
    traj = InnerTrajectory([theta])
    if steps == 0:
        return traj
    if len(buffer) < settings.batch_size:
        raise BufferNotReady(f"buffer holds {len(buffer)} < {settings.batch_size} samples")
    for _ in range(steps):
        x, y = buffer.sample(settings.batch_size, rng)
        record = StepRecord(x, y, teacher_outputs(teachers, x), float(lr))
        live = {k: v.clone().requires_grad_(True) for k, v in theta.items()}
        loss = inner_loss(student, align, meta, live, record, settings)
        grads = torch.autograd.grad(loss, list(live.values()))
        theta = {k: v.detach() for k, v in sgd_step(theta, dict(zip(live, grads)), lr).items()}
        traj.snapshots.append(theta)
        traj.steps.append(record)
    return traj


def outer_eval_batch(buffer: HardBuffer, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    if len(buffer) <= OUTER_EVAL_MAX:
        return buffer.contents()
    return buffer.sample(OUTER_EVAL_MAX, rng)


def outer_objective(student, align, params: dict[str, torch.Tensor],
                    inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    out, _ = student_forward(student, align, params, inputs)
    return ce_loss(out.logits, labels)


# -- reverse-mode hypergradient -------------------------------------------------

def reverse_hypergradient(snapshots: Sequence[Sequence[torch.Tensor]], step_losses: Sequence,
                          lrs: Sequence[float], adjoint: Sequence[torch.Tensor],
                          phi: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-HG over SGD steps ``theta_i = theta_{i-1} - lr_i * grad L_i(theta_{i-1}, phi)``.

    ``snapshots`` holds theta_0..theta_M and ``adjoint`` is dE/dtheta_M.
    ``step_losses[i-1](theta, theta_const)`` rebuilds L_i; the step gradient is
    taken with respect to ``theta`` only, while anything computed from
    ``theta_const`` is held fixed in that gradient but still differentiated
    through by the sweep (the step map's full dependence on theta). Starting from
    a_M = adjoint, for i = M..1:
        g_phi += a_i . dO_i/dphi,   a_{i-1} = a_i . dO_i/dtheta
    Only vector-Jacobian products are formed; no Jacobian is materialized.
    """
    g_phi = [torch.zeros_like(p) for p in phi]
    adj = list(adjoint)
    n = len(adj)
    for i in range(len(step_losses), 0, -1):
        lr = lrs[i - 1]
        theta = [t.detach().clone().requires_grad_(True) for t in snapshots[i - 1]]
        direct = [t.clone() for t in theta]
        loss = step_losses[i - 1](direct, theta)
        grads = torch.autograd.grad(loss, direct, create_graph=True, allow_unused=True)
        dot = sum((g * a).sum() for g, a in zip(grads, adj) if g is not None)
        if not torch.is_tensor(dot) or not dot.requires_grad:
            continue  # step map does not depend on theta or phi beyond the identity
        vjp = torch.autograd.grad(dot, [*theta, *phi], allow_unused=True)
        for j, d in enumerate(vjp[n:]):
            if d is not None:
                g_phi[j] = g_phi[j] - lr * d
        adj = [a - lr * d if d is not None else a for a, d in zip(adj, vjp[:n])]
        if not all(torch.isfinite(a).all() for a in adj):
            raise HypergradientError(f"non-finite adjoint at inner step {i}")
    for j, g in enumerate(g_phi):
        if not torch.isfinite(g).all():
            raise HypergradientError(f"non-finite hypergradient for meta parameter {j}")
    return g_phi


def reverse_hg(traj: InnerTrajectory, meta: MetaWeightNet, student, align,
               eval_inputs: torch.Tensor, eval_labels: torch.Tensor,
               settings: InnerSettings) -> list[torch.Tensor]:
    """Gradient of the buffer cross-entropy at theta_M with respect to the meta parameters."""
    phi = list(meta.parameters())
    if traj.num_steps == 0:
        return [torch.zeros_like(p) for p in phi]
    names = list(traj.snapshots[-1])
    theta_m = {k: v.clone().requires_grad_(True) for k, v in traj.snapshots[-1].items()}
    e = outer_objective(student, align, theta_m, eval_inputs, eval_labels)
    adj = torch.autograd.grad(e, list(theta_m.values()), allow_unused=True)
    # the alignment map does not reach the logits, so its adjoint starts at zero
    adj = [torch.zeros_like(v) if a is None else a for a, v in zip(adj, theta_m.values())]

    def step_loss(record):
        return lambda theta, theta_const: inner_loss(student, align, meta, dict(zip(names, theta)), record,
                                                     settings, dict(zip(names, theta_const)))

    snapshots = [[snap[k] for k in names] for snap in traj.snapshots]
    return reverse_hypergradient(snapshots, [step_loss(r) for r in traj.steps],
                                 [r.lr for r in traj.steps], adj, phi)


def make_meta_optimizer(meta: MetaWeightNet, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(meta.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def meta_step(meta: MetaWeightNet, grads: Sequence[torch.Tensor], optimizer: torch.optim.Optimizer) -> None:
    """One Adam update of phi; moments persist in ``optimizer`` across calls."""
    for p, g in zip(meta.parameters(), grads):
        if not torch.isfinite(g).all():
            raise HypergradientError("refusing a meta step with a non-finite gradient")
        p.grad = g.detach().to(p.dtype).clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@dataclass
class OuterDiagnostics:
    outer_ce_before: float
    outer_ce_after: float
    hypergrad_norm: float
    mean_entropy_wr: float


def outer_update(student, align, teachers, buffer: HardBuffer, meta: MetaWeightNet,
                 optimizer, steps: int, settings: InnerSettings, lr: float,
                 rng: np.random.Generator, eval_rng: np.random.Generator) -> OuterDiagnostics:
    """A full outer cycle: inner rollout, hypergradient, meta step. Live student is untouched."""
    eval_x, eval_y = outer_eval_batch(buffer, eval_rng)
    traj = inner_loop(student, align, teachers, buffer, meta, steps, settings, lr, rng)
    grads = reverse_hg(traj, meta, student, align, eval_x, eval_y, settings)
    with torch.no_grad():
        before = float(outer_objective(student, align, traj.snapshots[0], eval_x, eval_y))
        after = float(outer_objective(student, align, traj.snapshots[-1], eval_x, eval_y))
        if traj.steps:
            rec = traj.steps[0]
            out, _ = student_forward(student, align, traj.snapshots[0], rec.inputs)
            ent = mean_entropy(meta_weights(meta, out, rec.teachers, settings)[0])
        else:
            ent = math.log(meta.num_teachers)
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    meta_step(meta, grads, optimizer)
    return OuterDiagnostics(before, after, norm, ent)
