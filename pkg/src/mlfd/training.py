"""Shared training machinery: train configs, the convergence policy, the
plain-CE classifier loop, and top-k accuracy evaluation.

Every stochastic choice is keyed through `derive_seed`, so two jobs given
the same seed components replay bitwise-identically regardless of what else
runs in the process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from mlfd.data import BatchPlan, LabeledDataset, iterate_batches
from mlfd.errors import ConfigError
from mlfd.models import Model, forward_with_taps
from mlfd.numerics import (
    OptimizerState,
    Tape,
    Tensor,
    backward,
    cross_entropy,
    optimizer_step,
    softmax_with_temperature,
)
from mlfd.seeding import derive_seed

EVAL_BATCH = 256


@dataclass
class ConvergencePolicy:
    max_epochs: int = 100
    patience: int = 10  # epochs without val acc@1 improvement
    min_epochs: int = 20

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.min_epochs > self.max_epochs:
            raise ConfigError(
                f"min_epochs {self.min_epochs} exceeds max_epochs {self.max_epochs}"
            )


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    accumulation: int = 1
    policy: ConvergencePolicy = field(default_factory=ConvergencePolicy)

    def scaled_epochs(self, fraction: float) -> "TrainConfig":
        """Budget scaled copy (e.g. the joint teacher trains in a fraction of
        the individual-teacher budget)."""
        pol = self.policy
        max_e = max(1, int(round(pol.max_epochs * fraction)))
        return replace(
            self,
            policy=ConvergencePolicy(
                max_epochs=max_e,
                patience=pol.patience,
                min_epochs=min(pol.min_epochs, max_e),
            ),
        )


class EarlyStopper:
    """Tracks best validation acc@1 and signals when patience is exhausted."""

    def __init__(self, policy: ConvergencePolicy):
        self.policy = policy
        self.best = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, val_acc: float) -> bool:
        """Record this epoch; returns True when training should stop."""
        if val_acc > self.best:
            self.best = val_acc
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        done_min = epoch + 1 >= self.policy.min_epochs
        return done_min and self.stale >= self.policy.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, ks=(1, 5)) -> dict:
    """acc@k percentages; k is clamped to the class count and flagged."""
    order = np.argsort(-logits, axis=1, kind="stable")
    out = {}
    classes = logits.shape[1]
    for k in ks:
        kk = min(k, classes)
        hits = (order[:, :kk] == labels[:, None]).any(axis=1)
        out[f"acc{k}"] = 100.0 * float(hits.mean())
        if kk != k:
            out[f"acc{k}_clamped_to"] = kk
    return out


def snapshot_params(model: Model) -> dict:
    state = {name: p.value.data.copy() for name, p in model.named_parameters()}
    state["__bn__"] = {name: arr.copy() for name, arr in model.named_state()}
    return state


def restore_params(model: Model, state: dict) -> None:
    for name, p in model.named_parameters():
        p.value.data[...] = state[name]
    for name, arr in model.named_state():
        arr[...] = state["__bn__"][name]


def model_logits(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Eval-mode logits computed in bounded-size batches."""
    chunks = []
    for start in range(0, len(inputs), EVAL_BATCH):
        x = Tensor(inputs[start : start + EVAL_BATCH])
        logits, _ = forward_with_taps(model, x, mode="eval")
        chunks.append(logits.data)
    return np.concatenate(chunks) if chunks else np.zeros((0, model.spec.classes))


def evaluate_split(model: Model, dataset: LabeledDataset, split: str) -> dict:
    inputs, labels = dataset.subset(split)
    return topk_accuracy(model_logits(model, inputs), labels)


def train_classifier(
    model: Model,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    job_seed: int,
    log_extra: Optional[dict] = None,
) -> list[dict]:
    """Plain cross-entropy training with early stopping on validation acc@1.

    Returns one log row per epoch; the model ends holding the best-validation
    parameters. Deterministic given (model seed, job_seed, cfg).
    """
    params = model.parameters()
    opt = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    plan = BatchPlan(batch_size=cfg.batch_size, shuffle_seed=derive_seed(job_seed, "shuffle"))
    stopper = EarlyStopper(cfg.policy)
    best_state = snapshot_params(model)
    rows = []
    step = 0

    for epoch in range(cfg.policy.max_epochs):
        t0 = time.perf_counter()
        model.train()
        losses = []
        pending = 0
        for batch in iterate_batches(dataset, plan, epoch):
            tape = Tape()
            with tape:
                logits, _ = forward_with_taps(model, batch.inputs, mode="train", step=step)
                probs = softmax_with_temperature(logits, 1.0)
                loss = cross_entropy(probs, batch.targets)
            backward(loss, tape)
            losses.append(loss.item())
            step += 1
            pending += 1
            if pending == cfg.accumulation:
                optimizer_step(opt, params)
                pending = 0
        if pending:
            optimizer_step(opt, params)

        model.eval()
        val = evaluate_split(model, dataset, "val")
        test = evaluate_split(model, dataset, "test")
        row = {
            "epoch": epoch,
            "loss_total": float(np.mean(losses)),
            "loss_ce": float(np.mean(losses)),
            "val_acc1": val["acc1"],
            "acc1": test["acc1"],
            "acc5": test["acc5"],
            "wall_time": time.perf_counter() - t0,
        }
        if log_extra:
            row.update(log_extra)
        rows.append(row)

        stop = stopper.update(epoch, val["acc1"])
        if stopper.improved:
            best_state = snapshot_params(model)
        if stop:
            break

    restore_params(model, best_state)
    model.eval()
    return rows
