"""Hard buffer: a fixed-capacity store of the samples the student finds hardest.

It stands in for a validation set in the outer loop. ``ReplayBuffer`` is the
uniform (reservoir) variant used by the no-hard-buffer ablation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .errors import BufferNotReady, ConfigError
from .losses import per_sample_ce


@torch.no_grad()
def score_difficulty(student: torch.nn.Module, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy of the current student."""
    return per_sample_ce(student(inputs).logits, labels)


class HardBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.inputs: torch.Tensor | None = None
        self.labels: torch.Tensor | None = None  # class indices
        self.scores = torch.zeros(0, dtype=torch.float64)
        self.ids = torch.zeros(0, dtype=torch.long)
        self.counters = torch.zeros(0, dtype=torch.long)
        self._counter = 0

    def __len__(self) -> int:
        return int(self.scores.numel())

    @property
    def min_difficulty(self) -> float:
        return float(self.scores.min()) if len(self) else float("nan")

    def _new_counters(self, n: int) -> torch.Tensor:
        c = torch.arange(self._counter, self._counter + n, dtype=torch.long)
        self._counter += n
        return c

    def _merge(self, inputs, labels, scores, ids):
        n = inputs.shape[0]
        if scores.shape[0] != n or labels.shape[0] != n:
            raise ConfigError("scores and labels must align with the batch")
        if labels.ndim == 2:
            labels = labels.argmax(dim=1)
        if ids is None:
            ids = torch.full((n,), -1, dtype=torch.long)
        new = (inputs.detach(), labels.long(), scores.detach().to(torch.float64),
               torch.as_tensor(ids, dtype=torch.long), self._new_counters(n))
        if self.inputs is None:
            return new
        old = (self.inputs, self.labels, self.scores, self.ids, self.counters)
        return tuple(torch.cat([o, x]) for o, x in zip(old, new))

    def update(self, inputs: torch.Tensor, labels: torch.Tensor, scores: torch.Tensor,
               ids: torch.Tensor | None = None) -> "HardBuffer":
        """Merge a scored batch and keep the ``capacity`` hardest samples.

        Ties go to the newer insertion. A sample id already present is replaced
        by its newer copy.
        """
        x, y, s, i, c = self._merge(inputs, labels, scores, ids)
        keep = torch.ones(s.numel(), dtype=torch.bool)
        if (i >= 0).any():
            # later occurrences of the same id supersede earlier ones
            last = {}
            for pos, sid in enumerate(i.tolist()):
                if sid >= 0:
                    if sid in last:
                        keep[last[sid]] = False
                    last[sid] = pos
        idx = keep.nonzero().squeeze(1)
        # lexsort: primary score desc, secondary counter desc
        order = np.lexsort((-c[idx].numpy(), -s[idx].numpy()))
        idx = idx[torch.from_numpy(order[: self.capacity])]
        self.inputs, self.labels, self.scores, self.ids, self.counters = x[idx], y[idx], s[idx], i[idx], c[idx]
        return self

    def rescore(self, student: torch.nn.Module) -> None:
        if len(self):
            self.scores = score_difficulty(student, self.inputs, self.labels).to(torch.float64)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """``n`` entries uniformly, without replacement unless ``n`` exceeds the size."""
        if len(self) == 0:
            raise BufferNotReady("buffer not yet warmed up")
        idx = rng.choice(len(self), size=n, replace=n > len(self))
        idx = torch.from_numpy(np.asarray(idx, dtype=np.int64))
        return self.inputs[idx], self.labels[idx]

    def contents(self) -> tuple[torch.Tensor, torch.Tensor]:
        if len(self) == 0:
            raise BufferNotReady("buffer not yet warmed up")
        return self.inputs, self.labels

    def dump_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "difficulty"])
            for sid, s in zip(self.ids.tolist(), self.scores.tolist()):
                w.writerow([sid, repr(float(s))])
        return path


class ReplayBuffer(HardBuffer):
    """Uniform reservoir over the seen stream; difficulty is tracked but not used to select."""

    def __init__(self, capacity: int, seed: int = 0):
        super().__init__(capacity)
        self._rng = np.random.default_rng(seed)
        self._seen = 0

    def update(self, inputs, labels, scores, ids=None):
        if labels.ndim == 2:
            labels = labels.argmax(dim=1)
        if ids is None:
            ids = torch.full((inputs.shape[0],), -1, dtype=torch.long)
        for j in range(inputs.shape[0]):
            self._seen += 1
            row = (inputs[j:j + 1].detach(), labels[j:j + 1].long(),
                   scores[j:j + 1].detach().to(torch.float64),
                   torch.as_tensor(ids[j:j + 1], dtype=torch.long), self._new_counters(1))
            if self.inputs is None:
                self.inputs, self.labels, self.scores, self.ids, self.counters = row
            elif len(self) < self.capacity:
                self.inputs, self.labels, self.scores, self.ids, self.counters = (
                    torch.cat([o, x]) for o, x in zip(
                        (self.inputs, self.labels, self.scores, self.ids, self.counters), row))
            else:
                r = int(self._rng.integers(self._seen))
                if r < self.capacity:
                    for store, x in zip((self.inputs, self.labels, self.scores, self.ids, self.counters), row):
                        store[r] = x[0]
        return self


class HoldoutBuffer(HardBuffer):
    """A fixed validation set in buffer form; updates and rescoring leave the set unchanged."""

    def __init__(self, inputs: torch.Tensor, labels: torch.Tensor):
        super().__init__(max(1, inputs.shape[0]))
        super().update(inputs, labels, torch.zeros(inputs.shape[0]))

    def update(self, inputs, labels, scores, ids=None):
        return self
