"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7
SMALL = 1e-6


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale

    @property
    def absolute_pass(self) -> bool:
        """Tiny gradients are judged by absolute error instead of relative error."""
        return abs(self.analytic) < SMALL and abs(self.analytic - self.numeric) < ATOL

    @property
    def passed(self) -> bool:
        return self.absolute_pass or self.rel_error < RTOL


def check_gradients(fn, tensors, n_probes=None, rng=None, step=STEP):
    """Compare backprop against central differences.

    ``fn`` is a zero-argument callable returning a scalar Tensor computed from
    ``tensors`` (a name -> Tensor mapping, all with ``requires_grad``). With
    ``n_probes`` set, that many entries are drawn at random across all
    tensors; otherwise every entry is checked. Returns a list of :class:`Probe`.
    """
    for t in tensors.values():
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks need float64 tensors")
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}

    names = list(tensors)
    if n_probes is None:
        todo = [(k, idx) for k in names for idx in np.ndindex(tensors[k].shape)]
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = np.array([tensors[k].data.size for k in names], dtype=float)
        todo = []
        for _ in range(n_probes):
            k = names[rng.choice(len(names), p=sizes / sizes.sum())]
            flat = int(rng.integers(tensors[k].data.size))
            todo.append((k, np.unravel_index(flat, tensors[k].shape)))

    probes = []
    for k, idx in todo:
        arr = tensors[k].data
        orig = arr[idx]
        arr[idx] = orig + step
        up = float(fn().data)
        arr[idx] = orig - step
        down = float(fn().data)
        arr[idx] = orig
        probes.append(Probe(k, tuple(int(i) for i in idx), float(analytic[k][idx]), (up - down) / (2 * step)))
    for t in tensors.values():
        t.grad = None
    return probes


def all_passed(probes) -> bool:
    return all(p.passed for p in probes)


def worst(probes):
    return max(probes, key=lambda p: p.rel_error if not p.passed else -1.0)
