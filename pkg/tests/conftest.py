import numpy as np
import pytest
import torch

from mmkd.bilevel import InnerSettings
from mmkd.buffer import HardBuffer
from mmkd.meta_weight import MetaWeightNet
from mmkd.models import MLP, AlignmentMap

torch.set_num_threads(1)


class TinyProblem:
    """Double-precision student/teachers/meta network small enough for finite differences."""

    def __init__(self, seed=0, num_classes=3, n_in=4, batch=6, k=2, random_meta=True):
        g = torch.manual_seed(seed)
        self.C, self.n_in, self.b, self.K = num_classes, n_in, batch, k
        self.student = MLP(n_in, num_classes, [5]).double()
        self.align = AlignmentMap((5,), (4,)).double()
        self.teachers = [MLP(n_in, num_classes, [4]).double() for _ in range(k)]
        for t in self.teachers:
            t.requires_grad_(False)
        self.meta = MetaWeightNet(num_classes, k, batch, logit_hidden=4, feature_hidden=4).double()
        if random_meta:
            with torch.no_grad():
                for p in self.meta.parameters():
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
        self.x = torch.randn(2 * batch, n_in, dtype=torch.float64, generator=g)
        self.y = torch.randint(0, num_classes, (2 * batch,), generator=g)
        self.buffer = HardBuffer(2 * batch)
        self.buffer.update(self.x, self.y, torch.rand(2 * batch, generator=g))
        self.settings = InnerSettings(alpha=1.0, beta=10.0, tau=4.0, batch_size=batch)

    def rng(self, seed=5):
        return np.random.default_rng(seed)


@pytest.fixture
def tiny():
    return TinyProblem()


def central_difference(f, params, eps=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        flat = p.data.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(f().detach())
            flat[i] = orig - eps
            down = float(f().detach())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out.append(g.view_as(p))
    return out


def max_rel_err(a, b):
    a = torch.cat([t.reshape(-1) for t in a])
    b = torch.cat([t.reshape(-1) for t in b])
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-300))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
