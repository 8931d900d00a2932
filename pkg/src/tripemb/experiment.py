"""Training with early stopping, repeated runs, and test-scheme evaluation."""

from __future__ import annotations

import csv
import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .data import LabeledImage, SplitSpec, halve
from .errors import ConfigurationError, SamplingError, TrainingError, UsageError
from .nn import ModelConfig, NetworkParams, adam_step, backward_batch, embed_many, forward_batch, init_params
from .sampling import ExtentSampler, TestScheme, sample_uniform, sample_validation, select_test_triplets

log = logging.getLogger(__name__)


class Sampler(str, enum.Enum):
    UNIFORM = "uniform"
    EXTENT = "extent"


class LossKind(str, enum.Enum):
    CLIPPED = "clipped"
    HINGE = "hinge"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 15
    max_epochs: int = 100
    patience: int = 10
    triplets_per_epoch: int = 500
    sampler: Sampler = Sampler.EXTENT
    loss: LossKind = LossKind.CLIPPED
    clip_l: float = -0.01
    clip_u: float = 0.1
    hinge_margin: float = losses.DEFAULT_HINGE_MARGIN
    learning_rate: float = 1e-3
    val_triplets: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sampler", Sampler(self.sampler))
        object.__setattr__(self, "loss", LossKind(self.loss))
        for name in ("batch_size", "max_epochs", "patience", "triplets_per_epoch", "val_triplets"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience cannot exceed max_epochs")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        self.bounds  # validates l < u
        if self.hinge_margin < 0:
            raise ConfigurationError("hinge_margin must be >= 0")

    @property
    def bounds(self) -> losses.ClipBounds:
        try:
            return losses.ClipBounds(self.clip_l, self.clip_u)
        except UsageError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["model"] = self.model.to_dict()
        out["sampler"] = self.sampler.value
        out["loss"] = self.loss.value
        return out


@dataclass
class RunResult:
    best_params: NetworkParams
    epochs_used: int
    best_epoch: int
    val_violations: float
    untrained_val_violations: float
    history: list[dict] = field(default_factory=list)


class EarlyStopping:
    """Keeps the best weights seen; signals a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_value = None
        self.best_epoch = 0
        self.best_params = None
        self.stale = 0

    def update(self, epoch: int, value: float, params: NetworkParams) -> bool:
        if self.best_value is None or value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.best_params = params.copy()
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _images_array(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])


def _labels(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.array([im.score for im in images], dtype=np.int64)


def triplet_step(params: NetworkParams, config: TrainConfig, pixels: np.ndarray,
                 batch: np.ndarray) -> float:
    """One Adam step on the mean loss of ``batch`` (rows of image indices)."""
    used, inverse = np.unique(batch.ravel(), return_inverse=True)
    inverse = inverse.reshape(batch.shape)
    emb, cache = forward_batch(pixels[used], params)
    hi, hj, hk = emb[inverse[:, 0]], emb[inverse[:, 1]], emb[inverse[:, 2]]
    if config.loss is LossKind.CLIPPED:
        loss = losses.clipped_triplet_loss(hi, hj, hk, config.bounds)
        gi, gj, gk = losses.loss_grad(hi, hj, hk, config.bounds)
    else:
        loss = losses.hinge_triplet_loss(hi, hj, hk, config.hinge_margin)
        gi, gj, gk = losses.hinge_loss_grad(hi, hj, hk, config.hinge_margin)
    loss = float(np.mean(loss))
    if not np.isfinite(loss):
        raise TrainingError("non-finite training loss")
    grad_emb = np.zeros_like(emb)
    scale = 1.0 / len(batch)
    for col, g in zip(range(3), (gi, gj, gk)):
        np.add.at(grad_emb, inverse[:, col], g * scale)
    adam_step(params, backward_batch(params, cache, grad_emb), lr=config.learning_rate)
    return loss


def draw_training_triplets(config: TrainConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if config.sampler is Sampler.EXTENT:
        sampler = ExtentSampler(labels)
        draw = lambda: sampler.draw(rng)  # noqa: E731
    else:
        draw = lambda: sample_uniform(labels, rng)  # noqa: E731
    return np.array([draw() for _ in range(config.triplets_per_epoch)], dtype=np.int64)


def train(config: TrainConfig, train_images: Sequence[LabeledImage], val_images: Sequence[LabeledImage],
          callback: Callable[[int, NetworkParams, float], None] | None = None) -> RunResult:
    """Train one network and return the weights from its best validation epoch.

    Each epoch draws ``triplets_per_epoch`` fresh training triplets and takes
    Adam steps on minibatches of ``batch_size`` triplets.  Validation uses a
    fixed set of rater-ordered triplets (all-same-score ones excluded).
    """
    if not train_images or not val_images:
        raise UsageError("train and validation sets must be non-empty")
    pixels = _images_array(train_images)
    labels = _labels(train_images)
    val_pixels = _images_array(val_images)
    if config.sampler is Sampler.EXTENT:
        try:
            ExtentSampler(labels)
        except UsageError as exc:
            raise ConfigurationError(f"extent sampler infeasible on training labels: {exc}") from exc
    elif len(labels) < 3:
        raise ConfigurationError("uniform sampler needs at least 3 training images")
    try:
        val_triplets = sample_validation(_labels(val_images), config.val_triplets,
                                         np.random.default_rng([config.seed, 2]))
    except UsageError as exc:
        raise ConfigurationError(f"validation set unusable: {exc}") from exc
    rng = np.random.default_rng([config.seed, 1])
    params = init_params(config.model, seed=config.seed)

    def validate(p):
        return losses.violation_rate(embed_many(val_pixels, p), val_triplets)

    untrained = validate(params)
    stopper = EarlyStopping(config.patience)
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        triplets = draw_training_triplets(config, labels, rng)
        batch_losses = [
            triplet_step(params, config, pixels, triplets[s:s + config.batch_size])
            for s in range(0, len(triplets), config.batch_size)
        ]
        val = validate(params)
        history.append({"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_violations": val})
        log.debug("epoch %d loss %.4f val %.2f", epoch, history[-1]["train_loss"], val)
        if callback is not None:
            callback(epoch, params, val)
        if stopper.update(epoch, val, params):
            break
    return RunResult(stopper.best_params, epoch, stopper.best_epoch, stopper.best_value, untrained, history)


def evaluate(params: NetworkParams, test_images: Sequence[LabeledImage], triplets_per_scheme: int = 5000,
             seed: int = 0) -> dict[str, float | None]:
    """Violation percentage per test scheme; ``None`` where a scheme has no usable triplets."""
    emb = embed_many(_images_array(test_images), params)
    return evaluate_embeddings(emb, _labels(test_images), triplets_per_scheme, seed)


def evaluate_embeddings(emb: np.ndarray, labels: np.ndarray, triplets_per_scheme: int = 5000,
                        seed: int = 0) -> dict[str, float | None]:
    report = {}
    for n, scheme in enumerate(TestScheme):
        try:
            triplets = select_test_triplets(scheme, labels, triplets_per_scheme,
                                            np.random.default_rng([seed, n]))
        except (UsageError, SamplingError) as exc:
            log.warning("scheme %s unavailable: %s", scheme.value, exc)
            report[scheme.value] = None
            continue
        report[scheme.value] = losses.violation_rate(emb, triplets)
    return report


def embed_dataset(params: NetworkParams, images: Sequence[LabeledImage]) -> list[tuple]:
    """Rows ``(id, score, e1, ..., ed)``."""
    emb = embed_many(_images_array(images), params)
    return [(im.id, im.score, *map(float, e)) for im, e in zip(images, emb)]


# ---------------------------------------------------------------------------
# repeated runs

@dataclass
class RunRecord:
    run: int
    seed: int
    status: str
    result: RunResult | None = None
    untrained_test: dict | None = None
    test: dict | None = None
    error: str | None = None


def run_seed(base_seed: int, run: int) -> int:
    return int(np.random.default_rng([base_seed, run, 7]).integers(2**31))


def _one_run(config: TrainConfig, run: int, train_group: list[LabeledImage], test_images: list[LabeledImage],
             triplets_per_scheme: int, eval_seed: int) -> RunRecord:
    seed = run_seed(config.seed, run)
    cfg = replace(config, seed=seed)
    train_part, val_part = halve(range(len(train_group)), seed)
    train_images = [train_group[i] for i in train_part]
    val_images = [train_group[i] for i in val_part]
    try:
        result = train(cfg, train_images, val_images)
    except TrainingError as exc:
        return RunRecord(run, seed, "aborted", error=str(exc))
    untrained = evaluate(init_params(cfg.model, seed=seed), test_images, triplets_per_scheme, eval_seed)
    test = evaluate(result.best_params, test_images, triplets_per_scheme, eval_seed)
    return RunRecord(run, seed, "ok", result, untrained, test)


@dataclass
class ExperimentResult:
    config: TrainConfig
    records: list[RunRecord]
    eval_seed: int
    triplets_per_scheme: int

    @property
    def completed(self) -> list[RunRecord]:
        return [r for r in self.records if r.status == "ok"]

    @property
    def best(self) -> RunRecord | None:
        done = self.completed
        if not done:
            return None
        return min(done, key=lambda r: (r.result.val_violations, r.run))

    def medians(self, key: str = "test") -> dict[str, float | None]:
        return {s.value: _median([getattr(r, key)[s.value] for r in self.completed]) for s in TestScheme}

    def summary(self) -> dict:
        done = self.completed
        best = self.best
        epochs = [r.result.epochs_used for r in done]
        best_epochs = [r.result.best_epoch for r in done]
        val = [r.result.val_violations for r in done]
        untrained_val = [r.result.untrained_val_violations for r in done]
        return {
            "config": self.config.to_dict(),
            "eval_seed": self.eval_seed,
            "triplets_per_scheme": self.triplets_per_scheme,
            "runs": [
                {
                    "run": r.run, "seed": r.seed, "status": r.status, "error": r.error,
                    "epochs_used": r.result.epochs_used if r.result else None,
                    "best_epoch": r.result.best_epoch if r.result else None,
                    "val_violations": r.result.val_violations if r.result else None,
                    "untrained_val_violations": r.result.untrained_val_violations if r.result else None,
                    "test": r.test, "untrained_test": r.untrained_test,
                }
                for r in self.records
            ],
            "completed_runs": len(done),
            "aborted_runs": [r.run for r in self.records if r.status != "ok"],
            "validation_table": [
                {"sampling": "untrained", "model": self.config.model.name, "median_epochs": None,
                 "epochs_iqr": None, "median_violations": _median(untrained_val), "violations_iqr": _iqr(untrained_val)},
                {"sampling": self.config.sampler.value, "model": self.config.model.name,
                 "median_epochs": _median(epochs), "epochs_iqr": _iqr(epochs),
                 "median_best_epoch": _median(best_epochs),
                 "median_violations": _median(val), "violations_iqr": _iqr(val)},
            ],
            "test_medians": self.medians("test"),
            "untrained_test_medians": self.medians("untrained_test"),
            "best_run": best.run if best else None,
            "best_run_test": best.test if best else None,
        }


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def _iqr(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    q1, q3 = np.percentile(values, [25, 75])
    return float(q3 - q1)


def run_experiment(config: TrainConfig, images: dict[str, LabeledImage], split: SplitSpec, n_runs: int = 10,
                   triplets_per_scheme: int = 5000, eval_seed: int | None = None, jobs: int = 1) -> ExperimentResult:
    """Train ``n_runs`` networks on fresh halvings of the training group and test each on the fixed test set."""
    if n_runs < 1:
        raise UsageError("n_runs must be >= 1")
    train_group = [images[i] for i in split.train_group]
    test_images = [images[i] for i in split.test_ids]
    if not train_group or not test_images:
        raise UsageError("split has an empty training group or test set")
    eval_seed = split.seed if eval_seed is None else eval_seed
    args = [(config, run, train_group, test_images, triplets_per_scheme, eval_seed) for run in range(n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_one_run, *zip(*args)))
    else:
        records = [_one_run(*a) for a in args]
    for r in records:
        if r.status != "ok":
            log.warning("run %d aborted: %s", r.run, r.error)
    return ExperimentResult(config, records, eval_seed, triplets_per_scheme)


def write_reports(result: ExperimentResult, out_dir) -> None:
    """``test_violations.csv``, ``untrained_violations.csv``, ``history.csv`` and ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, key in (("test_violations.csv", "test"), ("untrained_violations.csv", "untrained_test")):
        with open(out_dir / name, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["scheme", "run", "violations"])
            for r in result.completed:
                for scheme in TestScheme:
                    v = getattr(r, key)[scheme.value]
                    w.writerow([scheme.value, r.run, "" if v is None else repr(v)])
    with open(out_dir / "history.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "epoch", "train_loss", "val_violations"])
        for r in result.completed:
            for h in r.result.history:
                w.writerow([r.run, h["epoch"], repr(h["train_loss"]), repr(h["val_violations"])])
    (out_dir / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")


def write_embedding_csv(rows: Sequence[tuple], path) -> None:
    d = len(rows[0]) - 2 if rows else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "score", *(f"e{i + 1}" for i in range(d))])
        for row in rows:
            w.writerow([row[0], row[1], *(repr(v) for v in row[2:])])
