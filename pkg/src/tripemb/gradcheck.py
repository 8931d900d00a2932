"""Central finite-difference check of the hand-written network gradients.

For each trial a small random network and three random images are drawn;
the scalar checked is the clipped triplet loss with bounds wide enough that
its argument sits strictly inside the linear part.  Coordinates whose +-h
perturbation (or +-10h) flips a ReLU, changes a pooling winner or leaves the linear
part of the clip are skipped and redrawn, since the derivative is not
defined there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import UsageError
from .nn import ModelConfig, NetworkParams, backward_triplet, forward_batch, init_params

STEP = 1e-5
TOLERANCE = 1e-3
REQUIRED_PASS_RATE = 0.99


@dataclass
class CoordinateCheck:
    trial: int
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradCheckReport:
    checks: list[CoordinateCheck] = field(default_factory=list)
    skipped: int = 0

    @property
    def pass_rate(self) -> float:
        if not self.checks:
            return 0.0
        return float(np.mean([c.rel_error < TOLERANCE for c in self.checks]))

    @property
    def worst(self) -> CoordinateCheck | None:
        return max(self.checks, key=lambda c: c.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and self.pass_rate >= REQUIRED_PASS_RATE


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _pattern(cache):
    return [z > 0 for z in cache.preact], cache.pool_idx


def _same_pattern(p, q) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p[0], q[0])) and \
        all(np.array_equal(a, b) for a, b in zip(p[1], q[1]))


def check_network(params: NetworkParams, images: np.ndarray, rng: np.random.Generator, n_coords: int,
                  trial: int = 0, step: float = STEP, max_skips: int = 50) -> tuple[list[CoordinateCheck], int]:
    """Compare analytic and central-difference gradients at ``n_coords`` random coordinates."""
    emb, cache = forward_batch(images, params)
    arg = float(losses.triplet_arg(emb[0], emb[1], emb[2]))
    spread = max(1.0, 10 * abs(arg))
    bounds = losses.ClipBounds(arg - spread, arg + spread)
    grads = backward_triplet(params, cache, losses.loss_grad(emb[0], emb[1], emb[2], bounds))
    base_pattern = _pattern(cache)
    names = list(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names], dtype=np.float64)
    checks, skipped = [], 0
    while len(checks) < n_coords:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        tensor = params.tensors[name]
        index = tuple(int(i) for i in np.unravel_index(rng.integers(tensor.size), tensor.shape))
        original = tensor[index]
        values, patterns = [], []
        # values at +-h; the pattern must also hold out to +-10h
        for delta in (step, -step, 10 * step, -10 * step):
            tensor[index] = original + delta
            e, c = forward_batch(images, params)
            values.append(float(losses.clipped_triplet_loss(e[0], e[1], e[2], bounds)))
            interior = bounds.l < losses.triplet_arg(e[0], e[1], e[2]) < bounds.u
            patterns.append(_pattern(c) if interior else None)
        tensor[index] = original
        if any(p is None or not _same_pattern(p, base_pattern) for p in patterns):
            skipped += 1
            if skipped > max_skips * max(n_coords, 1):
                raise RuntimeError("too many kink-adjacent coordinates; network is degenerate")
            continue
        numeric = (values[0] - values[1]) / (2 * step)
        checks.append(CoordinateCheck(trial, name, index, float(grads[name][index]), numeric))
    return checks, skipped


def _random_network(rng: np.random.Generator) -> tuple[NetworkParams, np.ndarray]:
    schedule = rng.choice(["fixed", "increasing"])
    height, width = int(rng.integers(8, 15)), int(rng.integers(8, 19))
    config = ModelConfig(schedule, 3, int(rng.integers(1, 4)), height, width)
    params = init_params(config, int(rng.integers(2**31)))
    # nonzero biases so that every parameter type is exercised away from zero
    for name, t in params.tensors.items():
        if name.endswith(".bias"):
            t[...] = rng.normal(0, 0.1, size=t.shape)
    images = rng.uniform(-1.0, 0.0, size=(3, height, width, 1))
    return params, images


def grad_check(seed: int = 0, trials: int = 20, coords_per_trial: int = 50) -> GradCheckReport:
    """Run ``trials`` random networks, checking ``coords_per_trial`` coordinates each."""
    if trials < 1 or coords_per_trial < 1:
        raise UsageError("grad_check needs at least one trial and one coordinate per trial")
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for trial in range(trials):
        params, images = _random_network(rng)
        checks, skipped = check_network(params, images, rng, coords_per_trial, trial)
        report.checks += checks
        report.skipped += skipped
    return report
