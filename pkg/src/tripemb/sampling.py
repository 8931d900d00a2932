"""Simulated similarity ratings and triplet selection.

Labels are ordinal extent scores 0..5 covering the intervals
0%, 1-5%, 6-25%, 26-50%, 51-75% and 76-100%.  A simulated rater orders three
images so that the two with the closest scores come first and the anchor is
the member of that pair nearer to the odd one out.
"""

from __future__ import annotations

import enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import SamplingError, UsageError

NUM_SCORES = 6
EXTENT_INTERVALS = ("0%", "1-5%", "6-25%", "26-50%", "51-75%", "76-100%")
MAX_ANCHOR_ATTEMPTS = 100


class Triplet(NamedTuple):
    i: int
    j: int
    k: int


class TestScheme(str, enum.Enum):
    """Test-triplet selection rules.

    ALL_DIFF: anchor and near share a score, far has another score.
    GEk: anchor and near have score <= k-1, far has score >= k, i.e.
      GE1  0%     vs >0%
      GE2  0-5%   vs >5%   (scores {0,1} vs {2..5})
      GE3  0-25%  vs >25%  (scores {0,1,2} vs {3,4,5})
      GE4  0-50%  vs >50%  (scores {0..3} vs {4,5})
    """

    __test__ = False  # keep pytest from collecting this enum

    ALL_DIFF = "ALL_DIFF"
    GE1 = "GE1"
    GE2 = "GE2"
    GE3 = "GE3"
    GE4 = "GE4"

    @property
    def threshold(self) -> int | None:
        return None if self is TestScheme.ALL_DIFF else int(self.value[2])

    @property
    def column(self) -> str:
        return {"ALL_DIFF": "All", "GE1": "0%", "GE2": "0-5%", "GE3": "0-25%", "GE4": "0-50%"}[self.value]


def label_distance(a: int, b: int) -> int:
    return abs(int(a) - int(b))


def is_oracle_order(ya: int, yn: int, yf: int) -> bool:
    """Whether labels in role order (anchor, near, far) satisfy the rater's ordering."""
    an, af, nf = label_distance(ya, yn), label_distance(ya, yf), label_distance(yn, yf)
    return an <= af and an <= nf and af <= nf


def order_triplet(labels: Sequence[int]) -> tuple[int, int, int]:
    """Positions of ``labels`` rearranged into (anchor, near, far) order.

    The far element is one not belonging to a closest pair; the anchor is
    the pair member nearer to the far element.  Among several valid orders
    the lexicographically smallest permutation is returned.
    """
    y = [int(v) for v in labels]
    if len(y) != 3:
        raise UsageError(f"order_triplet needs 3 labels, got {len(y)}")
    gaps = {far: label_distance(*(y[x] for x in range(3) if x != far)) for far in range(3)}
    closest = min(gaps.values())
    candidates = []
    for far, gap in gaps.items():
        if gap != closest:
            continue
        p, q = (x for x in range(3) if x != far)
        # anchor is whichever pair member sits nearer the far element; p on ties
        if label_distance(y[q], y[far]) < label_distance(y[p], y[far]):
            p, q = q, p
        candidates.append((p, q, far))
    return min(candidates)


def _orient(idx: Sequence[int], labels: np.ndarray) -> Triplet:
    sigma = order_triplet([labels[i] for i in idx])
    return Triplet(*(int(idx[s]) for s in sigma))


def sample_uniform(labels: Sequence[int], rng: np.random.Generator) -> Triplet:
    """Three distinct images chosen uniformly, put in rater order by their labels."""
    labels = np.asarray(labels)
    if len(labels) < 3:
        raise UsageError(f"need at least 3 images to sample a triplet, got {len(labels)}")
    return _orient(rng.choice(len(labels), size=3, replace=False), labels)


class ExtentSampler:
    """Label-driven sampler: same-score near image, far image weighted by score distance."""

    def __init__(self, labels: Sequence[int]):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.groups = {s: np.flatnonzero(self.labels == s) for s in np.unique(self.labels)}
        if not any(len(g) >= 2 for g in self.groups.values()):
            raise UsageError("extent sampling needs at least one score shared by two images")
        if len(self.groups) < 2:
            raise UsageError("extent sampling needs at least two distinct scores")

    def far_weights(self, anchor_score: int) -> np.ndarray:
        return np.abs(self.labels - anchor_score).astype(np.float64)

    def draw_for_anchor(self, anchor: int, rng: np.random.Generator) -> Triplet:
        score = self.labels[anchor]
        partners = self.groups[score][self.groups[score] != anchor]
        if len(partners) == 0:
            raise SamplingError(f"image {anchor} has no other image with score {score}")
        weights = self.far_weights(score)
        near = int(rng.choice(partners))
        far = int(rng.choice(len(self.labels), p=weights / weights.sum()))
        return Triplet(int(anchor), near, far)

    def draw(self, rng: np.random.Generator) -> Triplet:
        for _ in range(MAX_ANCHOR_ATTEMPTS):
            anchor = int(rng.integers(len(self.labels)))
            try:
                return self.draw_for_anchor(anchor, rng)
            except SamplingError:
                continue
        raise SamplingError(f"no anchor with a same-score partner in {MAX_ANCHOR_ATTEMPTS} attempts")


def sample_extent(labels: Sequence[int], rng: np.random.Generator, anchor: int | None = None) -> Triplet:
    sampler = ExtentSampler(labels)
    if anchor is None:
        return sampler.draw(rng)
    return sampler.draw_for_anchor(anchor, rng)


def sample_validation(labels: Sequence[int], count: int, rng: np.random.Generator) -> list[Triplet]:
    """Rater-ordered uniform triplets, skipping those where all three scores agree."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise UsageError("validation triplets need at least two distinct scores")
    out = []
    while len(out) < count:
        t = sample_uniform(labels, rng)
        if not labels[t.i] == labels[t.j] == labels[t.k]:
            out.append(t)
    return out


def scheme_groups(scheme: TestScheme, labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Indices allowed as (anchor, near) and as far under a GE scheme."""
    labels = np.asarray(labels)
    k = TestScheme(scheme).threshold
    return np.flatnonzero(labels <= k - 1), np.flatnonzero(labels >= k)


def select_test_triplets(scheme: TestScheme, labels: Sequence[int], count: int,
                         rng: np.random.Generator) -> list[Triplet]:
    """Draw ``count`` test triplets for one selection scheme.

    Same-class triplets never appear.  For the GE schemes the anchor/near
    pair comes from the low group and the far image from the high group, and
    only triplets where a rater would unambiguously single out the far image
    are kept.  Scores 0, 2 against 3 are rejected because 2 and 3 form the
    closest pair; scores 0, 2 against 4 are rejected because 2 is equally
    close to both, so either answer would be a valid rating.
    """
    scheme = TestScheme(scheme)
    labels = np.asarray(labels, dtype=np.int64)
    if scheme is TestScheme.ALL_DIFF:
        return _select_all_diff(labels, count, rng)
    low, high = scheme_groups(scheme, labels)
    if len(low) < 2 or len(high) < 1:
        raise UsageError(
            f"scheme {scheme.value} needs >= 2 images with score <= {scheme.threshold - 1} "
            f"and >= 1 with score >= {scheme.threshold}; got {len(low)} and {len(high)}"
        )
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 1000 * max(count, 1):
            raise SamplingError(f"scheme {scheme.value}: too few rater-consistent triplets")
        a, n = rng.choice(low, size=2, replace=False)
        f = rng.choice(high)
        ya, yn, yf = labels[a], labels[n], labels[f]
        pair = abs(ya - yn)
        if pair >= abs(ya - yf) or pair >= abs(yn - yf):
            continue
        if abs(yn - yf) < abs(ya - yf):
            a, n = n, a  # anchor is the pair member nearer the far image
        out.append(Triplet(int(a), int(n), int(f)))
    return out


def _select_all_diff(labels: np.ndarray, count: int, rng: np.random.Generator) -> list[Triplet]:
    scores = np.unique(labels)
    groups = [np.flatnonzero(labels == s) for s in scores]
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    # number of (same-score pair, different-score far) sets per score
    weights = sizes * (sizes - 1) / 2 * (len(labels) - sizes)
    if weights.sum() == 0:
        raise UsageError("scheme ALL_DIFF needs a shared score and at least one other score")
    p = weights / weights.sum()
    out = []
    for _ in range(count):
        g = rng.choice(len(groups), p=p)
        a, n = rng.choice(groups[g], size=2, replace=False)
        others = np.flatnonzero(labels != scores[g])
        out.append(Triplet(int(a), int(n), int(rng.choice(others))))
    return out


def save_triplets(path, triplets: Sequence[Triplet], scheme: str) -> None:
    """Write ``# <count> <scheme>`` followed by one ``i,j,k`` line per triplet."""
    lines = [f"# {len(triplets)} {scheme}"]
    lines += [f"{t[0]},{t[1]},{t[2]}" for t in triplets]
    Path(path).write_text("\n".join(lines) + "\n")


def load_triplets(path) -> tuple[list[Triplet], str]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise UsageError(f"{path}: missing '# <count> <scheme>' header")
    _, count, scheme = lines[0].split()
    triplets = [Triplet(*map(int, line.split(","))) for line in lines[1:] if line.strip()]
    if len(triplets) != int(count):
        raise UsageError(f"{path}: header says {count} triplets, found {len(triplets)}")
    return triplets, scheme
