"""Adaptive unstructured pruning: per-layer magnitude rounds with an
accuracy-gated accept/rollback loop.

Each round snapshots the model, removes the smallest-magnitude fraction
p_r of every prunable layer's nonzero weights (layers are thresholded
independently, so one layer's small weights cannot soak up the whole
budget), fine-tunes, and evaluates. Rounds that fail the accuracy floor
theta_acc are rolled back bit-exactly and the restored model gets an
extra fine-tune; after max_fails consecutive failures p_r halves, down
to a floor, at which point the machine stops with the best accepted
model.

The trainer is injected behind a two-method interface so the machine can
be driven by scripted mocks; nothing in here depends on real training.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol

import numpy as np

from .errors import NumericError, UsageError
from .nn import ConvLayer, FcLayer, FgfConvLayer, Model

__all__ = [
    "MaskedLayer",
    "PruneConfig",
    "PruneState",
    "RoundRecord",
    "TrainerHook",
    "prunable_layers",
    "masked_view",
    "ensure_masks",
    "layer_threshold",
    "prune_layer",
    "global_sparsity",
    "prune_round",
    "adapt_rate",
    "run_aup",
    "history_csv_lines",
]

STATUS_RUNNING = "running"
STATUS_REACHED = "reached_target"
STATUS_FAILED = "failed_to_reach_target"


@dataclass
class MaskedLayer:
    """Dense weights paired with a binary keep-mask (shared storage is
    fine; pruning mutates both in place)."""

    weights: np.ndarray
    mask: np.ndarray
    layer_id: str

    def validate(self):
        if self.weights.shape != self.mask.shape:
            raise UsageError(
                f"{self.layer_id}: mask shape {self.mask.shape} != weights "
                f"{self.weights.shape}"
            )
        if np.any((self.mask == 0) & (self.weights != 0.0)):
            raise UsageError(f"{self.layer_id}: nonzero weight under a zero mask bit")


@dataclass
class PruneConfig:
    target_sparsity: float
    theta_acc: float
    p_r: float = 0.05
    p_r_min: float = 0.005
    max_fails: int = 3
    finetune_epochs: int = 2
    final_finetune_epochs: int = 2

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise UsageError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if not 0.0 < self.p_r < 1.0:
            raise UsageError(f"p_r must be in (0, 1), got {self.p_r}")


@dataclass
class RoundRecord:
    round: int
    action: str  # accept | reject | adapt | final
    p_r: float
    sparsity: float
    val_acc: float
    wall_seconds: float


@dataclass
class PruneState:
    p_r: float
    theta_acc: float
    target_sparsity: float
    p_r_min: float = 0.005
    max_fails: int = 3
    round: int = 0
    fail_count: int = 0
    status: str = STATUS_RUNNING
    history: list[RoundRecord] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: PruneConfig) -> "PruneState":
        return cls(
            p_r=cfg.p_r,
            theta_acc=cfg.theta_acc,
            target_sparsity=cfg.target_sparsity,
            p_r_min=cfg.p_r_min,
            max_fails=cfg.max_fails,
        )


class TrainerHook(Protocol):
    """What the state machine needs from a trainer."""

    def fine_tune(self, model: Model, epochs: int) -> None: ...

    def validation_accuracy(self, model: Model) -> float: ...


def prunable_layers(model: Model) -> list:
    """Dense conv and fc layers; FGF layers (scalars, not magnitudes),
    batch norm and activations are excluded."""
    out = []
    for layer in model.layers:
        if isinstance(layer, (ConvLayer, FcLayer)) and not isinstance(layer, FgfConvLayer):
            out.append(layer)
    return out


def masked_view(layer) -> MaskedLayer:
    if layer.mask is None:
        raise UsageError(f"{layer.layer_id} has no mask; call ensure_masks first")
    return MaskedLayer(layer.weight.value, layer.mask, layer.layer_id)


def ensure_masks(model: Model):
    for layer in prunable_layers(model):
        if layer.mask is None:
            layer.mask = np.ones(layer.weight.value.shape, dtype=np.uint8)


def layer_threshold(layer: MaskedLayer, p_r: float) -> float | None:
    """Pruning threshold for one layer: the ceil(p_r * n)-th smallest
    |nonzero weight| (1-based order statistic).

    Returns None for an all-zero layer (skip signal) and 0.0 when the
    round would prune nothing.
    """
    magnitudes = np.abs(layer.weights[layer.weights != 0.0])
    n = magnitudes.size
    if n == 0:
        return None
    k = math.ceil(p_r * n)
    if k < 1:
        return 0.0
    return float(np.partition(magnitudes, k - 1)[k - 1])


def prune_layer(layer: MaskedLayer, p_r: float) -> int:
    """Zero out the ceil(p_r * n) smallest-magnitude nonzero weights.

    Ties break by (|w|, flat index) so equal magnitudes prune
    deterministically. Returns the number of newly pruned entries.
    """
    flat_w = layer.weights.reshape(-1)
    flat_m = layer.mask.reshape(-1)
    nonzero_idx = np.flatnonzero(flat_w)
    n = nonzero_idx.size
    if n == 0:
        return 0
    k = math.ceil(p_r * n)
    if k < 1:
        return 0
    order = np.lexsort((nonzero_idx, np.abs(flat_w[nonzero_idx])))
    victims = nonzero_idx[order[:k]]
    flat_w[victims] = 0.0
    flat_m[victims] = 0
    # live-but-zero entries are already below any threshold; retire them
    stale = np.flatnonzero((flat_m != 0) & (flat_w == 0.0))
    flat_m[stale] = 0
    return int(victims.size)


def _sparsity_counts(model: Model) -> tuple[int, int]:
    total = 0
    nonzero = 0
    for layer in prunable_layers(model):
        total += layer.weight.value.size
        nonzero += int(np.count_nonzero(layer.weight.value))
    return nonzero, total


def global_sparsity(model: Model) -> float:
    nonzero, total = _sparsity_counts(model)
    if total == 0:
        return 0.0
    return float(1.0 - Fraction(nonzero, total))


def _target_reached(model: Model, target: float) -> bool:
    nonzero, total = _sparsity_counts(model)
    if total == 0:
        return True
    # exact integer comparison: 1 - nz/total >= target
    return Fraction(total - nonzero, total) >= Fraction(target)


def prune_round(
    model: Model, state: PruneState, trainer: TrainerHook, cfg: PruneConfig
) -> bool:
    """One prune / fine-tune / gate round; returns True when accepted.

    On rejection the pre-round snapshot is restored bit-exactly before
    the extra fine-tune of the restored model. A trainer numeric failure
    rejects the round but keeps the machine running.
    """
    t0 = time.monotonic()
    snapshot = model.state_capture()
    layers = prunable_layers(model)
    pruned = 0
    for layer in layers:
        pruned += prune_layer(masked_view(layer), state.p_r)
    if pruned == 0:
        # nothing prunable: a no-op accept keeps the loop making progress
        state.round += 1
        state.fail_count = 0
        state.history.append(
            RoundRecord(state.round, "accept", state.p_r, global_sparsity(model),
                        math.nan, time.monotonic() - t0)
        )
        return True

    try:
        trainer.fine_tune(model, cfg.finetune_epochs)
        acc = trainer.validation_accuracy(model)
    except NumericError:
        acc = -math.inf

    if acc >= state.theta_acc:
        state.round += 1
        state.fail_count = 0
        state.history.append(
            RoundRecord(state.round, "accept", state.p_r, global_sparsity(model),
                        acc, time.monotonic() - t0)
        )
        return True

    model.state_restore(snapshot)
    try:
        trainer.fine_tune(model, cfg.finetune_epochs)  # extra tune on the reload
    except NumericError:
        pass
    state.fail_count += 1
    state.history.append(
        RoundRecord(state.round, "reject", state.p_r, global_sparsity(model),
                    acc if math.isfinite(acc) else math.nan,
                    time.monotonic() - t0)
    )
    return False


def adapt_rate(state: PruneState) -> PruneState:
    """Halve p_r after max_fails consecutive failures, with a floor.

    At the floor the machine transitions to the terminal
    failed_to_reach_target status. Calling below max_fails is a no-op.
    """
    if state.fail_count < state.max_fails:
        return state
    if state.p_r <= state.p_r_min:
        state.status = STATUS_FAILED
        return state
    state.p_r = max(state.p_r / 2.0, state.p_r_min)
    state.fail_count = 0
    return state


def run_aup(
    model: Model, cfg: PruneConfig, trainer: TrainerHook
) -> tuple[Model, PruneState]:
    """Drive prune rounds until the sparsity target is reached or the
    machine fails terminally; then final fine-tune.

    On terminal failure the best accepted model (masks and weights) is
    restored and returned with state.status = failed_to_reach_target.
    """
    ensure_masks(model)
    state = PruneState.from_config(cfg)
    if _target_reached(model, cfg.target_sparsity):
        state.status = STATUS_REACHED
        return model, state

    best_accepted = model.state_capture()
    while state.status == STATUS_RUNNING:
        accepted = prune_round(model, state, trainer, cfg)
        if accepted:
            best_accepted = model.state_capture()
            if _target_reached(model, cfg.target_sparsity):
                state.status = STATUS_REACHED
        elif state.fail_count >= state.max_fails:
            adapt_rate(state)
            if state.status == STATUS_FAILED:
                model.state_restore(best_accepted)

    if state.status == STATUS_REACHED:
        t0 = time.monotonic()
        try:
            trainer.fine_tune(model, cfg.final_finetune_epochs)
            acc = trainer.validation_accuracy(model)
        except NumericError:
            acc = math.nan
        state.history.append(
            RoundRecord(state.round, "final", state.p_r, global_sparsity(model),
                        acc, time.monotonic() - t0)
        )
    return model, state


def history_csv_lines(state: PruneState) -> list[str]:
    """`round,action,p_r,global_sparsity,val_acc,wall_seconds` records."""
    lines = ["round,action,p_r,global_sparsity,val_acc,wall_seconds"]
    for rec in state.history:
        lines.append(
            f"{rec.round},{rec.action},{rec.p_r:g},{rec.sparsity:.8f},"
            f"{rec.val_acc:.4f},{rec.wall_seconds:.3f}"
        )
    return lines
