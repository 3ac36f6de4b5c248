"""Step-shifted training-pair construction and the softmax forecasting head.

A pair joins the digest at month m with the escalation state at m + s;
one model is trained per (step, digest kind). Features are mean-pooled
member-article embeddings (the interface point where an external encoder
could supply digest-level vectors instead). Training is full-batch
gradient descent on class-weighted cross-entropy with L2, deterministic
from a zero initialization.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .digests import Digest
from .evaluation import ForecastRecord

logger = logging.getLogger(__name__)

N_CLASSES = 4
DEFAULT_STEPS = (0, 1, 3, 6)


class TrainingCollapseError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training collapsed at epoch {epoch} (loss {loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 2000
    l2: float = 1e-3
    seed: int = 0


@dataclass
class TrainingPair:
    dyad_id: str
    digest_month: int
    target_month: int
    features: np.ndarray
    target: int
    partition: str  # "train" | "test"
    kind: str


@dataclass
class SoftmaxModel:
    weights: np.ndarray  # (4, D + 1), bias in the last column
    class_weights: np.ndarray
    config: TrainConfig
    final_loss: float = float("nan")
    step: int | None = None
    kind: str | None = None


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def pool_embedding(digest: Digest, embeddings) -> np.ndarray:
    """L2-normalized arithmetic mean of the member snippet-article embeddings."""
    vectors = [
        np.asarray(embeddings.get(aid), dtype=float)
        for aid in digest.snippet_ids
        if aid in embeddings
    ]
    if not vectors:
        raise ValueError(f"digest {digest.dyad_id}/{digest.month} has no member embeddings")
    mean = np.mean(vectors, axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ValueError(
            f"digest {digest.dyad_id}/{digest.month} pools to a zero vector"
        )
    return mean / norm


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def build_dataset(
    digests: list[Digest],
    labels_train: dict[str, dict[int, int]],
    labels_val: dict[str, dict[int, int]],
    step: int,
    train_end: int,
    test_start: int,
    val_end: int,
    embeddings,
) -> tuple[list[TrainingPair], list[TrainingPair], int]:
    """(train pairs, test pairs, dropped count) for one forecast step.

    Train pairs require digest month + step <= train_end with the target
    drawn from the train-window labels; test pairs start at test_start
    and read validation labels, dropping anything past val_end.
    """
    train: list[TrainingPair] = []
    test: list[TrainingPair] = []
    dropped = 0
    for digest in sorted(digests, key=lambda d: (d.dyad_id, d.month, d.kind)):
        m = digest.month
        target_month = m + step
        if digest.partition in (None, "train") and target_month <= train_end:
            labels, partition = labels_train, "train"
        elif digest.partition in (None, "val") and m >= test_start and target_month <= val_end:
            labels, partition = labels_val, "test"
        else:
            continue
        state = labels.get(digest.dyad_id, {}).get(target_month)
        if state is None:
            dropped += 1
            continue
        pair = TrainingPair(
            dyad_id=digest.dyad_id,
            digest_month=m,
            target_month=target_month,
            features=pool_embedding(digest, embeddings),
            target=int(state),
            partition=partition,
            kind=digest.kind,
        )
        (train if partition == "train" else test).append(pair)
    if dropped:
        logger.info("step %d: dropped %d pairs with missing labels", step, dropped)
    return train, test, dropped


def class_weights(targets) -> np.ndarray:
    """w_c = N / (4 n_c) for present classes; absent classes weigh zero."""
    targets = np.asarray(targets, dtype=int)
    if targets.size == 0:
        raise ValueError("no targets")
    counts = np.bincount(targets, minlength=N_CLASSES)
    if np.count_nonzero(counts) < 2:
        raise ValueError("class weighting needs at least two classes present")
    weights = np.zeros(N_CLASSES)
    present = counts > 0
    weights[present] = targets.size / (N_CLASSES * counts[present])
    return weights


# ---------------------------------------------------------------------------
# Softmax head
# ---------------------------------------------------------------------------

def _with_bias(features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=float))
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def loss_and_grad(
    weights: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    sample_class_weights: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray]:
    """Class-weighted mean cross-entropy plus l2 * ||W||^2, with its gradient."""
    x = _with_bias(features)
    y = np.asarray(targets, dtype=int)
    n = x.shape[0]
    probs = _softmax(x @ weights.T)
    w_rows = sample_class_weights[y]
    with np.errstate(divide="ignore"):
        log_p = np.log(probs[np.arange(n), y])
    loss = float(-np.mean(w_rows * log_p) + l2 * np.sum(weights**2))
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    grad = (delta * w_rows[:, None]).T @ x / n + 2.0 * l2 * weights
    return loss, grad


def train_softmax(
    pairs: list[TrainingPair],
    config: TrainConfig = TrainConfig(),
    weights: np.ndarray | None = None,
) -> SoftmaxModel:
    """Full-batch gradient descent; aborts with diagnostics on collapse.

    Deterministic: zero-initialized weights and a fixed epoch count (the
    seed is recorded for provenance of anything stochastic upstream).
    """
    if not pairs:
        raise ValueError("no training pairs")
    features = np.stack([p.features for p in pairs])
    targets = np.array([p.target for p in pairs], dtype=int)
    cw = class_weights(targets) if weights is None else np.asarray(weights, dtype=float)
    dim = features.shape[1]
    W = np.zeros((N_CLASSES, dim + 1))
    for epoch in range(config.epochs):
        loss, grad = loss_and_grad(W, features, targets, cw, config.l2)
        if not np.isfinite(loss):
            raise TrainingCollapseError(epoch, loss)
        W = W - config.lr * grad
    loss, _ = loss_and_grad(W, features, targets, cw, config.l2)
    if not np.isfinite(loss):
        raise TrainingCollapseError(config.epochs, loss)
    return SoftmaxModel(weights=W, class_weights=cw, config=config, final_loss=loss)


def predict(model: SoftmaxModel, features) -> np.ndarray:
    """Probability 4-vector for one pooled feature vector."""
    x = _with_bias(features)
    if x.shape[1] != model.weights.shape[1]:
        raise ValueError(
            f"feature dimension {x.shape[1] - 1} does not match model "
            f"{model.weights.shape[1] - 1}"
        )
    return _softmax(x @ model.weights.T)[0]


# ---------------------------------------------------------------------------
# Per-step, per-kind runs
# ---------------------------------------------------------------------------

def _align_test_structure(
    test_by_kind: dict[str, list[TrainingPair]]
) -> dict[str, list[TrainingPair]]:
    """Hold the test structure identical across digest kinds.

    Every (dyad, digest month) key contributes the same number of rows to
    each kind: the minimum count over kinds, with keys missing anywhere
    dropped everywhere.
    """
    keys_per_kind = {}
    for kind, pairs in test_by_kind.items():
        counter: dict[tuple, int] = {}
        for p in pairs:
            counter[(p.dyad_id, p.digest_month)] = counter.get((p.dyad_id, p.digest_month), 0) + 1
        keys_per_kind[kind] = counter
    shared = None
    for counter in keys_per_kind.values():
        keys = set(counter)
        shared = keys if shared is None else shared & keys
    shared = shared or set()
    quota = {
        key: min(keys_per_kind[kind][key] for kind in test_by_kind) for key in shared
    }
    aligned = {}
    for kind, pairs in test_by_kind.items():
        taken: dict[tuple, int] = {key: 0 for key in shared}
        kept = []
        for p in sorted(pairs, key=lambda p: (p.dyad_id, p.digest_month)):
            key = (p.dyad_id, p.digest_month)
            if key in quota and taken[key] < quota[key]:
                taken[key] += 1
                kept.append(p)
        aligned[kind] = kept
    return aligned


def run_steps(
    digests_by_kind: dict[str, list[Digest]],
    labels_train: dict[str, dict[int, int]],
    labels_val: dict[str, dict[int, int]],
    embeddings,
    train_end: int,
    test_start: int,
    val_end: int,
    steps=DEFAULT_STEPS,
    config: TrainConfig = TrainConfig(),
) -> dict[tuple[int, str], tuple[SoftmaxModel, list[ForecastRecord]]]:
    """One trained model plus its test-set forecast records per (step, kind)."""
    out: dict[tuple[int, str], tuple[SoftmaxModel, list[ForecastRecord]]] = {}
    for step in steps:
        train_by_kind: dict[str, list[TrainingPair]] = {}
        test_by_kind: dict[str, list[TrainingPair]] = {}
        for kind in sorted(digests_by_kind):
            train, test, _ = build_dataset(
                digests_by_kind[kind],
                labels_train,
                labels_val,
                step,
                train_end,
                test_start,
                val_end,
                embeddings,
            )
            train_by_kind[kind] = train
            test_by_kind[kind] = test
        aligned = _align_test_structure(test_by_kind)
        for kind in sorted(digests_by_kind):
            model = train_softmax(train_by_kind[kind], config)
            model.step, model.kind = step, kind
            records = [
                ForecastRecord(
                    dyad_id=p.dyad_id,
                    month=p.target_month,
                    step=step,
                    probabilities=tuple(float(v) for v in predict(model, p.features)),
                    actual=p.target,
                    source="model",
                    kind=kind,
                )
                for p in aligned[kind]
            ]
            out[(step, kind)] = (model, records)
            logger.info(
                "step %d kind %s: %d train pairs, %d test records, final loss %.4f",
                step,
                kind,
                len(train_by_kind[kind]),
                len(records),
                model.final_loss,
            )
    return out


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------

def save_model(model: SoftmaxModel, path: str | Path) -> None:
    payload = {
        "weights": [[float(v) for v in row] for row in model.weights],
        "class_weights": [float(v) for v in model.class_weights],
        "config": {
            "lr": model.config.lr,
            "epochs": model.config.epochs,
            "l2": model.config.l2,
            "seed": model.config.seed,
        },
        "final_loss": model.final_loss,
        "step": model.step,
        "kind": model.kind,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_model(path: str | Path) -> SoftmaxModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return SoftmaxModel(
        weights=np.array(payload["weights"], dtype=float),
        class_weights=np.array(payload["class_weights"], dtype=float),
        config=TrainConfig(**payload["config"]),
        final_loss=float(payload["final_loss"]),
        step=payload["step"],
        kind=payload["kind"],
    )
