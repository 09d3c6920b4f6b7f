"""Training loop: per-example Adam updates on next-token cross-entropy.

The per-example loss is sum_t -log p(token_{t+1} | prefix, image), END
prediction included; the reported train/val losses are means of that sum
over examples. Early stopping tracks validation loss and the returned
parameters are a snapshot from the best epoch.

Updates use batch size 1 (one graph per example), global-norm gradient
clipping (a single positive scale, so direction is preserved) and Adam with
conventional defaults. All randomness (init, shuffling) derives from the
run seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import backward
from .captioner import (
    START_ID,
    ArchitectureKind,
    ModelParams,
    build_loss_graph,
    forward_replay,
)
from .synthworld import GroundedExample, Vocabulary

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "Hyperparams",
    "EpochStats",
    "TrainResult",
    "TrainingDivergedError",
    "init_params",
    "clip_gradients",
    "example_nll",
    "mean_example_nll",
    "train",
    "perplexity",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; names the epoch and offending example."""

    def __init__(self, epoch: int, example_id: int):
        self.epoch = epoch
        self.example_id = example_id
        super().__init__(f"non-finite loss at epoch {epoch}, example id {example_id}")


@dataclass
class Hyperparams:
    m: int = 64
    h: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0

    def validate(self):
        if min(self.m, self.h, self.max_epochs, self.patience) < 1:
            raise ValueError("m, h, max_epochs and patience must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def to_dict(self) -> dict:
        return {
            "m": self.m, "h": self.h, "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "seed": self.seed, "clip_norm": self.clip_norm,
            "adam": [ADAM_BETA1, ADAM_BETA2, ADAM_EPS],
        }


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochStats]
    best_epoch: int


def init_params(
    kind: ArchitectureKind,
    vocab_size: int,
    feature_dim: int,
    hyper: Hyperparams,
) -> ModelParams:
    """Fresh parameters: weights uniform in [-0.1, 0.1], biases zero."""
    hyper.validate()
    rng = np.random.default_rng((hyper.seed, 7))
    shapes = ModelParams.tensor_shapes(kind, vocab_size, hyper.m, hyper.h, feature_dim)
    arrays = {}
    for name, shape in shapes.items():
        if name.startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-0.1, 0.1, shape)
    params = ModelParams(kind=kind, V=vocab_size, m=hyper.m, h=hyper.h,
                         D=feature_dim, **arrays)
    params.validate()
    return params


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale the joint gradient to `max_norm` when it exceeds it.

    Returns (clipped gradients, scale); scale is 1.0 when no clipping was
    needed, so the result is always a positive multiple of the input.
    """
    total = math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads), 1.0
    scale = max_norm / total
    return [g * scale for g in grads], scale


class _AdamState:
    def __init__(self, params: ModelParams):
        self.m = [np.zeros_like(arr) for _, arr in params.tensors()]
        self.v = [np.zeros_like(arr) for _, arr in params.tensors()]
        self.t = 0

    def update(self, params: ModelParams, grads: Sequence[np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for i, (_, arr) in enumerate(params.tensors()):
            g = grads[i]
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * (g * g)
            arr -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + ADAM_EPS)


def example_nll(kind: ArchitectureKind, params: ModelParams, ex: GroundedExample) -> float:
    """sum_t -log p(token_{t+1}) for one example via the plain forward route."""
    traces = forward_replay(kind, params, ex.features, [START_ID, *ex.tokens])
    return -sum(math.log(traces[t].softmax[ex.tokens[t]]) for t in range(len(ex.tokens)))


def mean_example_nll(kind: ArchitectureKind, params: ModelParams,
                     examples: Sequence[GroundedExample]) -> float:
    return sum(example_nll(kind, params, ex) for ex in examples) / len(examples)


def train(
    kind: ArchitectureKind,
    train_examples: Sequence[GroundedExample],
    val_examples: Sequence[GroundedExample],
    vocab: Vocabulary,
    hyper: Hyperparams,
    initial_params: ModelParams | None = None,
    clock: Callable[[], float] | None = None,
) -> TrainResult:
    """Train one architecture; returns the parameters at best validation loss.

    `clock` is only used for the per-epoch seconds column of the log; inject
    a counter to make logs fully reproducible.
    """
    hyper.validate()
    if not train_examples or not val_examples:
        raise ValueError("train and validation splits must be non-empty")
    if clock is None:
        clock = time.perf_counter

    feature_dim = len(train_examples[0].features)
    if initial_params is None:
        params = init_params(kind, len(vocab), feature_dim, hyper)
    else:
        params = initial_params.copy()
        if params.kind is not kind:
            raise ValueError(
                f"initial params are for {params.kind.tag!r}, requested {kind.tag!r}")
        params.validate()

    rng = np.random.default_rng((hyper.seed, 11))
    adam = _AdamState(params)
    log: list[EpochStats] = []
    best_loss = math.inf
    best_params = params.copy()
    best_epoch = -1
    stale = 0

    for epoch in range(hyper.max_epochs):
        started = clock()
        order = rng.permutation(len(train_examples))
        total = 0.0
        for idx in order:
            ex = train_examples[int(idx)]
            replay, loss_id = build_loss_graph(kind, params, ex.features,
                                               [START_ID, *ex.tokens])
            loss = float(replay.graph.value(loss_id)[0])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, ex.id)
            total += loss
            grad_map = backward(replay.graph, loss_id)
            grads = []
            for name, arr in params.tensors():
                g = grad_map.get(replay.params[name])
                grads.append(g if g is not None else np.zeros_like(arr))
            grads, _ = clip_gradients(grads, hyper.clip_norm)
            adam.update(params, grads, hyper.learning_rate)

        train_loss = total / len(train_examples)
        val_loss = mean_example_nll(kind, params, val_examples)
        log.append(EpochStats(epoch, train_loss, val_loss, clock() - started))

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break

    return TrainResult(best_params, log, best_epoch)


def perplexity(params: ModelParams, kind: ArchitectureKind,
               examples: Sequence[GroundedExample]) -> float:
    """exp(mean per-token negative log probability) over all prediction steps."""
    total_nll = 0.0
    total_tokens = 0
    for ex in examples:
        total_nll += example_nll(kind, params, ex)
        total_tokens += len(ex.tokens)
    return math.exp(total_nll / total_tokens)
