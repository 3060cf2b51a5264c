"""MLM pretraining, classification fine-tuning, and evaluation.

Training is deterministic per seed: batch order, masking, and dropout all
draw from named streams, so rerunning a config reproduces the loss curve
bit for bit. Metric history is kept as (step, split, metric, value) rows
that serialize to a line-delimited log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .errors import InvalidArgumentError, NumericalError
from .models import ModelBundle, pad_batch
from .seeding import rng_for
from .synlang import MASK_ID, NUM_SPECIALS, PAD_ID, Corpus
from .tasks import TaskDataset


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 3e-4
    mask_rate: float = 0.15
    mask_ratio: float = 0.8
    random_ratio: float = 0.1
    keep_ratio: float = 0.1
    val_count: int = 1000
    avg_tail: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.mask_rate < 1.0:
            raise InvalidArgumentError("mask_rate must be in (0, 1)")
        if abs(self.mask_ratio + self.random_ratio + self.keep_ratio - 1.0) > 1e-9:
            raise InvalidArgumentError("mask/random/keep ratios must sum to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.val_count < 1:
            raise InvalidArgumentError("val_count must be >= 1")
        if not 0 <= self.avg_tail <= self.epochs:
            raise InvalidArgumentError("avg_tail must be in [0, epochs]")


@dataclass(frozen=True)
class FinetuneConfig:
    max_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    patience: int = 5
    seed: int = 0
    freeze_encoder: bool = False  # diagnostics only; normal runs tune everything

    def validate(self) -> None:
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("max_epochs and batch_size must be >= 1")


class MetricsLog:
    """Ordered (step, split, metric, value) rows; one space-separated line each."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.rows.append((step, split, metric, float(value)))

    def values(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def write(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for step, split, metric, value in self.rows:
                f.write(f"{step} {split} {metric} {value:.9g}\n")

    @classmethod
    def read(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        with open(path) as f:
            for line in f:
                step, split, metric, value = line.split()
                log.add(int(step), split, metric, float(value))
        return log


class EarlyStopping:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.streak = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch's metric; returns True when it set a new best."""
        self.epoch += 1
        if self.best is None or value > self.best:
            self.best = value
            self.best_epoch = self.epoch
            self.streak = 0
            return True
        self.streak += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.streak >= self.patience


def mask_batch(tokens: np.ndarray, cfg: PretrainConfig, vocab_size: int,
               rng: np.random.Generator):
    """Apply the mask/random/keep recipe to one padded (B, T) batch.

    Only real token positions participate (CLS and PAD never), and every
    row gets at least one target. Returns (masked tokens, batch indices,
    position indices, target token ids).
    """
    B, T = tokens.shape
    maskable = np.ones_like(tokens, dtype=bool)
    maskable[:, 0] = False
    maskable &= tokens != PAD_ID

    u = rng.random((B, T))
    u[~maskable] = np.inf
    chosen = u < cfg.mask_rate
    none = ~chosen.any(axis=1)
    if none.any():
        # force the smallest-u position so no row contributes zero signal
        rows = np.nonzero(none)[0]
        chosen[rows, u[rows].argmin(axis=1)] = True

    b_idx, p_idx = np.nonzero(chosen)
    targets = tokens[b_idx, p_idx].astype(np.int64)
    masked = tokens.copy()
    roll = rng.random(b_idx.size)
    to_mask = roll < cfg.mask_ratio
    to_random = (~to_mask) & (roll < cfg.mask_ratio + cfg.random_ratio)
    masked[b_idx[to_mask], p_idx[to_mask]] = MASK_ID
    masked[b_idx[to_random], p_idx[to_random]] = rng.integers(
        NUM_SPECIALS, vocab_size, size=int(to_random.sum())
    )
    return masked, b_idx, p_idx, targets


@dataclass
class PretrainResult:
    metrics: MetricsLog
    initial_val_loss: float
    final_val_loss: float
    steps: int


def _mlm_loss(bundle: ModelBundle, tokens, b_idx, p_idx, targets, train_rng=None):
    logits = bundle.mlm_logits(tokens, b_idx, p_idx, train_rng=train_rng)
    return ad.cross_entropy_with_logits(logits, targets)


def pretrain_mlm(bundle: ModelBundle, corpus: Corpus, cfg: PretrainConfig) -> PretrainResult:
    """Train the bundle in place; the last val_count sequences are held out.

    With avg_tail > 0 the bundle ends up holding the running mean of the
    post-step weights over the last avg_tail epochs instead of the final
    iterate. Constant-rate Adam never settles: per-state conditionals keep
    wandering with an amplitude set by the rate, and tail averaging is what
    recovers the underlying minimizer from that plateau.
    """
    cfg.validate()
    if len(corpus) <= cfg.val_count:
        raise InvalidArgumentError(
            f"corpus has {len(corpus)} sequences, needs more than val_count={cfg.val_count}"
        )
    vocab = bundle.config.vocab_size
    all_tokens = pad_batch([r.token_ids for r in corpus.records])
    train_tokens = all_tokens[: -cfg.val_count]
    val_tokens = all_tokens[-cfg.val_count :]

    # one fixed val masking so epoch losses are comparable
    vm = mask_batch(val_tokens, cfg, vocab, rng_for(cfg.seed, "pretrain", "valmask"))

    def val_loss() -> float:
        total, count = 0.0, 0
        masked, b_idx, p_idx, targets = vm
        for lo in range(0, masked.shape[0], cfg.batch_size):
            sel = (b_idx >= lo) & (b_idx < lo + cfg.batch_size)
            if not sel.any():
                continue
            loss = _mlm_loss(bundle, masked[lo : lo + cfg.batch_size],
                             b_idx[sel] - lo, p_idx[sel], targets[sel])
            total += float(loss.data) * int(sel.sum())
            count += int(sel.sum())
        return total / count

    metrics = MetricsLog()
    opt = Adam(bundle.store, lr=cfg.lr)
    initial = val_loss()
    metrics.add(0, "val", "mlm_loss", initial)

    step = 0
    n_train = train_tokens.shape[0]
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "pretrain", "order", epoch).permutation(n_train)
        for lo in range(0, n_train, cfg.batch_size):
            batch = train_tokens[order[lo : lo + cfg.batch_size]]
            step_rng = rng_for(cfg.seed, "pretrain", "step", step)
            masked, b_idx, p_idx, targets = mask_batch(batch, cfg, vocab, step_rng)
            try:
                bundle.store.zero_grad()
                loss = _mlm_loss(bundle, masked, b_idx, p_idx, targets, train_rng=step_rng)
                ad.backward(loss)
                opt.step()
            except NumericalError as e:
                raise NumericalError(f"pretraining diverged at step {step}: {e}") from e
            metrics.add(step, "train", "mlm_loss", float(loss.data))
            step += 1
        metrics.add(step, "val", "mlm_loss", val_loss())

    final = metrics.values("val", "mlm_loss")[-1]
    return PretrainResult(metrics=metrics, initial_val_loss=initial,
                          final_val_loss=final, steps=step)


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray  # argmax class per example
    probs: np.ndarray  # (N, 2)


def evaluate(bundle: ModelBundle, dataset: TaskDataset, batch_size: int = 256) -> EvalResult:
    if not dataset.examples:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    tokens = pad_batch([e.token_ids for e in dataset.examples])
    probs = np.empty((len(dataset), 2), dtype=np.float64)
    for lo in range(0, tokens.shape[0], batch_size):
        logits = bundle.cls_logits(tokens[lo : lo + batch_size])
        probs[lo : lo + batch_size] = ad.softmax(logits).data
    predictions = probs.argmax(axis=1)
    labels = dataset.labels().astype(np.int64)
    return EvalResult(
        accuracy=float((predictions == labels).mean()),
        predictions=predictions,
        probs=probs,
    )


@dataclass
class FinetuneResult:
    bundle: ModelBundle
    metrics: MetricsLog
    chosen_epoch: int
    best_val_accuracy: float
    epochs_run: int


def fine_tune(bundle: ModelBundle, train_set: TaskDataset, val_set: TaskDataset,
              cfg: FinetuneConfig) -> FinetuneResult:
    """Classification fine-tuning with early stopping on validation accuracy.

    The bundle is trained in place, then rolled back to the best-validation
    epoch (ties keep the earliest), which is also what gets returned.
    """
    cfg.validate()
    if not train_set.examples:
        raise InvalidArgumentError("empty training set")
    if not val_set.examples:
        raise InvalidArgumentError("empty validation set")

    tokens = pad_batch([e.token_ids for e in train_set.examples])
    labels = train_set.labels().astype(np.int64)
    n = tokens.shape[0]

    frozen = set()
    if cfg.freeze_encoder:
        frozen = {name for name in bundle.store.names() if not name.startswith("cls_head")}

    opt = Adam(bundle.store, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    metrics = MetricsLog()
    best_params: dict[str, np.ndarray] = {}
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_for(cfg.seed, "finetune", "order", epoch).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            step_rng = rng_for(cfg.seed, "finetune", "step", step)
            try:
                bundle.store.zero_grad()
                logits = bundle.cls_logits(tokens[sel], train_rng=step_rng)
                loss = ad.cross_entropy_with_logits(logits, labels[sel])
                ad.backward(loss)
                if frozen:
                    for name in frozen:
                        bundle.store[name].grad = None
                opt.step()
            except NumericalError as e:
                raise NumericalError(f"fine-tuning diverged at step {step}: {e}") from e
            losses.append(float(loss.data))
            step += 1

        val_acc = evaluate(bundle, val_set).accuracy
        metrics.add(step, "train", "cls_loss", float(np.mean(losses)))
        metrics.add(step, "val", "accuracy", val_acc)
        if stopper.update(val_acc):
            best_params = {name: p.data.copy() for name, p in bundle.store.items()}
        if stopper.should_stop:
            break

    for name, data in best_params.items():
        bundle.store[name].data[...] = data
    return FinetuneResult(
        bundle=bundle,
        metrics=metrics,
        chosen_epoch=stopper.best_epoch or 0,
        best_val_accuracy=stopper.best or float("nan"),
        epochs_run=stopper.epoch,
    )
