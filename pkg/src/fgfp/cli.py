"""Command-line surface: train, compress, eval, report, export-kernel,
gen-data.

Conventions: stdout carries data (tables, CSV, summary lines), stderr
carries diagnostics; the first diagnostic of every run is the fully
resolved configuration. Exit codes: 2 usage error, 3 data/format error,
4 numeric failure. Flags beat --config file values, which beat built-in
defaults. All randomness flows from --seed through named substreams, so
reruns with the same arguments are bit-identical; FGFP_THREADS caps
worker threads for per-filter kernel fits.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import aup, data, fgf, nn, pipeline, store
from .errors import FgfpError, FormatError, NumericError, FitError, UsageError

__all__ = ["main"]


def _log(msg: str):
    print(msg, file=sys.stderr)


def _threads() -> int:
    raw = os.environ.get("FGFP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"FGFP_THREADS must be an integer, got {raw!r}")


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _echo_config(cmd: str, args: argparse.Namespace):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    _log(f"config: {cmd} {json.dumps(resolved, default=str, sort_keys=True)}")


def _load_splits(dataset: str, directory: str, seed: int, val_fraction: float):
    """(train, val, test, augment) with dataset-appropriate preprocessing."""
    if dataset == "mnist":
        train, test = data.load_mnist_idx(directory)
        tr, val = data.split_train_val(train, seed, val_fraction)
        return tr, val, test, None
    if dataset == "cifar10":
        train, test = data.load_cifar10(directory)
        tr, val = data.split_train_val(train, seed, val_fraction)
        _, tr, val, test = data.standardize(tr, val, test)
        return tr, val, test, data.augment_cifar
    raise UsageError(f"unknown dataset {dataset!r}")


_DATASET_CHANNELS = {"mnist": 1, "cifar10": 3}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    data.generate_digit_corpus(args.out, args.train_count, args.test_count, args.seed)
    print(f"wrote {args.train_count}+{args.test_count} digit images to {args.out}")
    return 0


def cmd_train(args) -> int:
    tr, val, test, augment = _load_splits(args.dataset, args.data, args.seed,
                                          args.val_fraction)
    in_ch = _DATASET_CHANNELS[args.dataset]
    if args.model not in nn.ARCHITECTURES:
        raise UsageError(f"unknown model {args.model!r}; have {sorted(nn.ARCHITECTURES)}")
    specs, input_shape = nn.ARCHITECTURES[args.model](in_ch, 10)
    model = nn.build_model(specs, input_shape, seed=args.seed, name=args.model)
    model.meta["arch"] = args.model

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, f"{args.model}-s{args.seed}_train_log.csv")
    cfg = nn.TrainConfig(
        batch_size=args.batch, lr=args.lr, momentum=args.momentum,
        epochs=args.epochs, seed=args.seed,
    )
    with open(log_path, "w") as log_fh:
        log_fh.write("epoch,step,loss,lr,split_acc\n")

        def emit(line):
            log_fh.write(line + "\n")
            print(line)

        trainer = nn.Trainer(cfg, tr, val, augment=augment, log=emit)
        val_acc = trainer.fit(model)

    test_acc = nn.evaluate(model, test)
    model.meta["baseline_val_acc"] = val_acc
    model.meta["baseline_test_acc"] = test_acc
    ckpt = os.path.join(args.out, f"{args.model}-s{args.seed}.fgfp")
    store.save(model, ckpt)
    _log(f"val acc {val_acc:.2f}, test acc {test_acc:.2f}")
    print(f"checkpoint {ckpt} sha256 {_digest(ckpt)}")
    return 0


def cmd_eval(args) -> int:
    model = store.load(args.ckpt)
    tr, val, test, _ = _load_splits(args.dataset, args.data, args.seed,
                                    args.val_fraction)
    split = {"train": tr, "val": val, "test": test}[args.split]
    acc = nn.evaluate(model, split)
    print(f"{args.split} top-1 accuracy: {acc:.4f}")
    return 0


def _parse_layers_flag(raw: str) -> int:
    if not raw.startswith("top:"):
        raise UsageError(f"--layers must look like top:K, got {raw!r}")
    try:
        k = int(raw[4:])
    except ValueError:
        raise UsageError(f"--layers must look like top:K, got {raw!r}")
    if k < 0:
        raise UsageError(f"--layers top:K needs K >= 0, got {k}")
    return k


def cmd_compress(args) -> int:
    model = store.load(args.ckpt)
    tr, val, test, augment = _load_splits(args.dataset, args.data, args.seed,
                                          args.val_fraction)
    k = _parse_layers_flag(args.layers)
    plan = pipeline.select_layers(model, k, args.fgf)
    plan.finetune_epochs = args.ft_epochs
    baseline_logical = nn.param_count(model, "logical")
    baseline_test = nn.evaluate(model, test)

    aup_cfg = nn.TrainConfig(
        batch_size=args.batch, lr=args.aup_lr, momentum=args.momentum,
        epochs=args.ft_epochs, seed=args.seed, lr_schedule=[], log_every=0,
    )
    trainer = nn.Trainer(aup_cfg, tr, val, augment=augment)
    prune_cfg = aup.PruneConfig(
        target_sparsity=args.target_sparsity,
        theta_acc=args.acc_threshold,
        p_r=args.pr,
        finetune_epochs=args.ft_epochs,
        final_finetune_epochs=args.final_ft_epochs,
    )
    result = pipeline.run_fgfp(
        model, plan, trainer, prune_cfg,
        seed=args.seed, threads=_threads(), fgf_lr=args.fgf_lr,
    )

    os.makedirs(args.out, exist_ok=True)
    run_id = f"{model.meta.get('name', 'model')}-s{args.seed}"
    stages_path = os.path.join(args.out, f"{run_id}_stages.csv")
    with open(stages_path, "w") as fh:
        fh.write("\n".join(pipeline.stage_csv_lines(result.stages)) + "\n")
    history_path = os.path.join(args.out, f"{run_id}_history.csv")
    if result.prune_state is not None:
        with open(history_path, "w") as fh:
            fh.write("\n".join(aup.history_csv_lines(result.prune_state)) + "\n")

    test_acc = nn.evaluate(model, test)
    model.meta["compressed_test_acc"] = test_acc
    model.meta["compressed_val_acc"] = result.stages[-1].val_acc
    ckpt_path = os.path.join(args.out, f"{run_id}_compressed.fgfp")
    store.save(model, ckpt_path)

    logical = nn.param_count(model, "logical")
    cr = 100.0 * (1.0 - logical / baseline_logical)
    flagged = ""
    if result.prune_state is not None and result.prune_state.status == aup.STATUS_FAILED:
        flagged = " [target-not-reached]"
    if result.flagged_layers:
        flagged += f" [fit-failed:{','.join(result.flagged_layers)}]"
    print(f"params {baseline_logical} -> {logical} (CR {cr:.2f}%){flagged}")
    print(f"test acc {baseline_test:.2f} -> {test_acc:.2f}")
    print(f"checkpoint {ckpt_path} sha256 {_digest(ckpt_path)}")
    return 0


def _layer_signature(layer):
    if isinstance(layer, nn.FgfConvLayer):
        return (layer.layer_id, "conv", (layer.out_ch, layer.in_ch, layer.kh,
                                         layer.kw, layer.stride, layer.pad))
    if isinstance(layer, nn.ConvLayer):
        return (layer.layer_id, "conv", (layer.out_ch, layer.in_ch, layer.kh,
                                         layer.kw, layer.stride, layer.pad))
    if isinstance(layer, nn.FcLayer):
        return (layer.layer_id, "fc", (layer.in_features, layer.out_features))
    if isinstance(layer, nn.BatchNormLayer):
        return (layer.layer_id, "bn", (layer.channels,))
    if isinstance(layer, nn.MaxPoolLayer):
        return (layer.layer_id, "pool", (layer.size, layer.stride))
    return (layer.layer_id, layer.kind, ())


def cmd_report(args) -> int:
    compressed = store.load(args.ckpt)
    baseline = store.load(args.baseline)
    if len(compressed.layers) != len(baseline.layers):
        raise UsageError("checkpoints have different layer counts")
    for a, b in zip(compressed.layers, baseline.layers):
        if _layer_signature(a) != _layer_signature(b):
            raise UsageError(
                f"architecture mismatch at {a.layer_id!r} vs {b.layer_id!r}"
            )

    rows = []
    for comp, base in zip(compressed.layers, baseline.layers):
        base_logical = base.logical_params()
        comp_logical = comp.logical_params()
        cr = (
            100.0 * (1.0 - comp_logical / base_logical) if base_logical else 0.0
        )
        rows.append(
            (comp.layer_id, comp.spec_kind if hasattr(comp, "spec_kind") else comp.kind,
             base_logical, comp_logical, base.stored_params(), comp.stored_params(), cr)
        )
    total_base = nn.param_count(baseline, "logical")
    total_comp = nn.param_count(compressed, "logical")
    total_cr = 100.0 * (1.0 - total_comp / total_base) if total_base else 0.0

    print(f"{'layer':<12}{'kind':<14}{'base':>10}{'logical':>10}{'stored':>10}{'CR%':>9}")
    for layer_id, kind, bl, cl, _, cs, cr in rows:
        print(f"{layer_id:<12}{kind:<14}{bl:>10}{cl:>10}{cs:>10}{cr:>9.2f}")
    print(f"{'total':<12}{'':<14}{total_base:>10}{total_comp:>10}"
          f"{nn.param_count(compressed, 'stored'):>10}{total_cr:>9.2f}")

    base_acc = baseline.meta.get("baseline_test_acc")
    comp_acc = compressed.meta.get("compressed_test_acc",
                                   compressed.meta.get("baseline_test_acc"))
    if base_acc is not None and comp_acc is not None:
        print(f"test acc {base_acc:.2f} -> {comp_acc:.2f} "
              f"(drop {base_acc - comp_acc:.2f})")
    return 0


def cmd_export_kernel(args) -> int:
    model = store.load(args.ckpt)
    layer = model.layer_by_id(args.layer)
    if not isinstance(layer, nn.FgfConvLayer):
        raise UsageError(f"{args.layer!r} is not an FGF layer")
    if not 0 <= args.filter < layer.out_ch:
        raise UsageError(
            f"filter index {args.filter} out of range [0, {layer.out_ch})"
        )
    params = layer.vec_to_params(layer.filter_params.value[args.filter])
    kernel = fgf.synth_kernel(layer.in_ch, layer.kh, layer.kw, params).astype(np.float32)

    def fmt(values) -> str:
        return ",".join(f"{float(v):.9g}" for v in values)

    lines = []
    for c in range(layer.in_ch):
        lines.append(f"kernel,{c},{fmt(kernel[c].reshape(-1))}")
    if isinstance(params, fgf.Fgf3dParams):
        lines.append(f"factor,x,{fmt(fgf.frac_gauss_1d(layer.kh, params.a, params.x0, params.sigma))}")
        lines.append(f"factor,y,{fmt(fgf.frac_gauss_1d(layer.kw, params.b, params.y0, params.sigma))}")
        lines.append(f"factor,ch,{fmt(fgf.frac_gauss_1d(layer.in_ch, params.c, params.ch0, params.sigma))}")
    elif isinstance(params, fgf.CaFgfParams):
        lines.append(f"factor,x,{fmt(fgf.frac_gauss_1d(layer.kh, params.a, params.x0, params.sigma))}")
        lines.append(f"factor,y,{fmt(fgf.frac_gauss_1d(layer.kw, params.b, params.y0, params.sigma))}")
        lines.append(f"weights,,{fmt(params.weights)}")
    else:
        for c, (a, b, x0, y0, sigma) in enumerate(params.per_channel):
            lines.append(f"factor,x{c},{fmt(fgf.frac_gauss_1d(layer.kh, a, x0, sigma))}")
            lines.append(f"factor,y{c},{fmt(fgf.frac_gauss_1d(layer.kw, b, y0, sigma))}")

    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# argument plumbing
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgfp",
        description="fractional Gaussian filter compression toolkit",
    )
    parser.add_argument("--config", help="JSON file of default flag values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic digit IDX corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=12000)
    p.add_argument("--test-count", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a baseline model")
    p.add_argument("--model", default="cnn3")
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress", help="FGF conversion + adaptive pruning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    p.add_argument("--fgf", choices=["ca", "3d"], default="3d")
    p.add_argument("--layers", default="top:1", help="top:K largest eligible layers")
    p.add_argument("--target-sparsity", type=float, default=0.8)
    p.add_argument("--pr", type=float, default=0.05,
                   help="fraction of nonzero weights pruned per round")
    p.add_argument("--acc-threshold", type=float, default=math.nan,
                   help="absolute validation accuracy floor "
                        "(default: post-FGF accuracy - 1.0)")
    p.add_argument("--ft-epochs", type=int, default=2)
    p.add_argument("--final-ft-epochs", type=int, default=2)
    p.add_argument("--fgf-lr", type=float, default=0.1)
    p.add_argument("--aup-lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="compare a compressed checkpoint to its baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-kernel", help="dump a synthesized kernel as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--filter", type=int, required=True)
    p.add_argument("--out", required=True, help="output path or - for stdout")
    p.set_defaults(func=cmd_export_kernel)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold --config file values in as defaults (flags still win)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    try:
        with open(known.config) as fh:
            values = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read config file: {exc}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"config file is not valid JSON: {exc}")
    if not isinstance(values, dict):
        raise FormatError("config file must hold a JSON object")
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        for sub in action.choices.values():
            sub.set_defaults(
                **{k.replace("-", "_"): v for k, v in values.items()}
            )
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse already printed the diagnostic
            return int(exc.code or 0)
        _echo_config(args.command, args)
        return args.func(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 2
    except FormatError as exc:
        _log(f"data error: {exc}")
        return 3
    except (NumericError, FitError) as exc:
        _log(f"numeric failure: {exc}")
        return 4
    except FgfpError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
