"""End-to-end compression staging: rank layers, convert the largest to an
FGF parameterization, fine-tune, repeat, then prune the rest.

Conversion is one layer at a time with interleaved fine-tuning (batch
mode exists behind a flag). Only convolutions that are deep enough to
benefit are eligible: spatial size >= 3, at least 16 input channels, and
neither the first convolution nor the classifier. The accuracy floor
handed to the pruning stage is measured after the FGF stage, so the gate
protects the converted model's accuracy.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aup, fgf, nn
from .errors import FitError, UsageError

__all__ = [
    "ConversionPlan",
    "StageReport",
    "eligible_layers",
    "select_layers",
    "convert_layer",
    "FgfpResult",
    "run_fgfp",
    "stage_csv_lines",
]

log = logging.getLogger(__name__)

MIN_IN_CHANNELS = 16
MIN_SPATIAL = 3


@dataclass
class ConversionPlan:
    layer_ids: list[str]
    fgf_kind: str = "3d"  # 'ca' | '3d'
    fit_restarts: int = 8
    fit_iters: int = 300
    finetune_epochs: int = 2


@dataclass
class StageReport:
    stage: str
    layer_id: str
    logical_params: int
    stored_params: int
    val_acc: float


def eligible_layers(model: nn.Model) -> list[tuple[int, nn.ConvLayer]]:
    """Dense convolutions eligible for conversion, in model order."""
    convs = [
        (i, layer)
        for i, layer in enumerate(model.layers)
        if isinstance(layer, nn.ConvLayer) and not isinstance(layer, nn.FgfConvLayer)
    ]
    out = []
    for pos, (i, layer) in enumerate(convs):
        if pos == 0:
            continue  # first convolution stays dense
        if layer.kh < MIN_SPATIAL or layer.kw < MIN_SPATIAL:
            continue
        if layer.in_ch < MIN_IN_CHANNELS:
            continue
        out.append((i, layer))
    return out


def select_layers(model: nn.Model, k: int, fgf_kind: str = "3d") -> ConversionPlan:
    """The k eligible layers with the most dense parameters, ties broken
    deeper-first. Requesting more than exist truncates with a warning."""
    candidates = eligible_layers(model)
    ranked = sorted(
        candidates, key=lambda item: (item[1].weight.value.size, item[0]), reverse=True
    )
    if k > len(ranked):
        log.warning(
            "requested top:%d but only %d layers are eligible; plan truncated",
            k, len(ranked),
        )
        k = len(ranked)
    return ConversionPlan(layer_ids=[layer.layer_id for _, layer in ranked[:k]],
                          fgf_kind=fgf_kind)


def convert_layer(
    model: nn.Model,
    layer_id: str,
    kind: str,
    plan: ConversionPlan | None = None,
    seed: int = 0,
    threads: int = 1,
) -> bool:
    """Replace one dense convolution's kernels with fitted FGF parameters.

    Each output filter is fitted independently (seed + filter index);
    with threads > 1 filters fit concurrently, which does not change the
    result. Returns False (layer left dense) when any filter's fit blows
    up; converting an already-converted layer is a precondition error.
    """
    plan = plan or ConversionPlan([], fgf_kind=kind)
    idx = next(
        (i for i, l in enumerate(model.layers) if l.layer_id == layer_id), None
    )
    if idx is None:
        raise UsageError(f"no layer named {layer_id!r}")
    old = model.layers[idx]
    if isinstance(old, nn.FgfConvLayer):
        raise UsageError(f"{layer_id} is already converted")
    if not isinstance(old, nn.ConvLayer):
        raise UsageError(f"{layer_id} is not a convolution")

    kernels = old.weight.value.astype(np.float64)

    def fit_one(o: int):
        return fgf.fit_fgf_to_kernel(
            kernels[o], kind,
            restarts=plan.fit_restarts, iters=plan.fit_iters,
            seed=seed + o,
        )

    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(fit_one, range(old.out_ch)))
        else:
            results = [fit_one(o) for o in range(old.out_ch)]
    except FitError as exc:
        log.warning("fit failed for %s: %s; layer left dense", layer_id, exc)
        return False

    new = nn.FgfConvLayer(
        layer_id, kind, old.out_ch, old.in_ch, old.kh, old.kw,
        old.stride, old.pad, dtype=model.dtype,
    )
    new.filter_params.value = np.stack(
        [new.params_to_vec(res.params) for res in results]
    ).astype(new.filter_params.value.dtype)
    new.filter_params.gradient = np.zeros_like(new.filter_params.value)
    model.layers[idx] = new
    total_loss = float(sum(res.loss for res in results))
    log.info("converted %s to %s (total fit loss %.3e)", layer_id, kind, total_loss)
    return True


@dataclass
class FgfpResult:
    model: nn.Model
    stages: list[StageReport] = field(default_factory=list)
    prune_state: aup.PruneState | None = None
    flagged_layers: list[str] = field(default_factory=list)


def run_fgfp(
    model: nn.Model,
    plan: ConversionPlan,
    trainer: "nn.Trainer",
    prune_cfg: aup.PruneConfig | None = None,
    seed: int = 0,
    threads: int = 1,
    fgf_lr: float = 0.1,
    batch_convert: bool = False,
) -> FgfpResult:
    """Convert planned layers (fine-tuning after each), then prune the
    remaining dense layers under an accuracy gate.

    The prune gate's theta_acc, when not set explicitly (nan), becomes
    (post-FGF-stage validation accuracy - 1.0). The best model so far is
    always returned, flagged when stages degrade.
    """
    result = FgfpResult(model=model)

    def record(stage: str, layer_id: str, acc: float):
        result.stages.append(
            StageReport(stage, layer_id, nn.param_count(model, "logical"),
                        nn.param_count(model, "stored"), acc)
        )

    base_acc = (
        nn.evaluate(model, trainer.val_ds) if trainer.val_ds is not None else math.nan
    )
    record("baseline", "", base_acc)

    fgf_cfg = nn.TrainConfig(
        batch_size=trainer.config.batch_size,
        lr=fgf_lr,
        momentum=trainer.config.momentum,
        epochs=plan.finetune_epochs,
        seed=seed,
        lr_schedule=[],
        log_every=trainer.config.log_every,
    )
    fgf_trainer = nn.Trainer(fgf_cfg, trainer.train_ds, trainer.val_ds,
                             augment=trainer.augment, log=trainer.log)

    converted: list[str] = []
    for layer_id in plan.layer_ids:
        ok = convert_layer(model, layer_id, plan.fgf_kind, plan,
                           seed=seed, threads=threads)
        if not ok:
            result.flagged_layers.append(layer_id)
            record("fgf-convert-failed", layer_id, math.nan)
            continue
        converted.append(layer_id)
        if not batch_convert:
            acc = fgf_trainer.fit(model, plan.finetune_epochs)
            record("fgf-convert", layer_id, acc)
        else:
            record("fgf-convert", layer_id, math.nan)
    if batch_convert and converted:
        acc = fgf_trainer.fit(model, plan.finetune_epochs)
        record("fgf-finetune", ",".join(converted), acc)

    if prune_cfg is not None:
        post_fgf_acc = (
            nn.evaluate(model, trainer.val_ds)
            if trainer.val_ds is not None
            else math.nan
        )
        if math.isnan(prune_cfg.theta_acc):
            if math.isnan(post_fgf_acc):
                raise UsageError("no validation split to derive theta_acc from")
            prune_cfg.theta_acc = post_fgf_acc - 1.0
        hook = TrainerAdapter(trainer)
        _, state = aup.run_aup(model, prune_cfg, hook)
        result.prune_state = state
        record("aup", "", hook.last_val_acc)

    final_acc = (
        nn.evaluate(model, trainer.val_ds) if trainer.val_ds is not None else math.nan
    )
    record("final", "", final_acc)
    return result


class TrainerAdapter:
    """aup.TrainerHook over a real nn.Trainer."""

    def __init__(self, trainer: nn.Trainer):
        self.trainer = trainer
        self.last_val_acc = math.nan

    def fine_tune(self, model: nn.Model, epochs: int):
        self.trainer.fit(model, epochs)

    def validation_accuracy(self, model: nn.Model) -> float:
        self.last_val_acc = nn.evaluate(model, self.trainer.val_ds)
        return self.last_val_acc


def stage_csv_lines(stages: list[StageReport]) -> list[str]:
    lines = ["stage,layer_id,logical_params,stored_params,val_acc"]
    for s in stages:
        lines.append(
            f"{s.stage},{s.layer_id},{s.logical_params},{s.stored_params},"
            f"{s.val_acc:.4f}"
        )
    return lines
