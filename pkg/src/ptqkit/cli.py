"""Batch command line: train, assign-bits, quantize, eval, compare.

Exit status is 0 for any completed run (a collapsed accuracy is still a result),
1 for missing or malformed files and 2 for invalid settings.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import experiments as X
from .bits import CodingConfig, assign_bits
from .calibration import CalibrationError, HyperParams, weight_checksum
from .errors import ConfigError
from .graph import StructureError, accuracy, fuse_bn, predict
from .io import FormatError, SizeError, load_idx, load_model, save_model
from .quantizers import ROUNDERS
from .tensor import ShapeError


class UsageError(ConfigError):
    pass


def _bit_list(text):
    try:
        return [int(b) for b in text.replace(" ", "").split(",") if b]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bit list must look like 3,4,5, got {text!r}") from None


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="model directory")
    common.add_argument("--data-images", help="training/calibration images (IDX, optionally gzipped)")
    common.add_argument("--data-labels")
    common.add_argument("--test-images")
    common.add_argument("--test-labels")
    common.add_argument("--rounder", choices=ROUNDERS, default="attention")
    common.add_argument("--wbits", type=int)
    common.add_argument("--abits", type=int, help="activation bits; omit for float activations")
    common.add_argument("--bit-list", type=_bit_list)
    common.add_argument("--tau", type=float, default=HyperParams.tau)
    common.add_argument("--iters", type=int, default=HyperParams.iters)
    common.add_argument("--lr", type=float, default=HyperParams.lr)
    common.add_argument("--batch", type=int, default=HyperParams.batch)
    common.add_argument("--calib-size", type=int, default=HyperParams.calib_size)
    common.add_argument("--epsilon", type=float, default=CodingConfig.epsilon)
    common.add_argument("--prefactor", choices=("full", "half"), default=CodingConfig.prefactor)
    common.add_argument("--seed", type=int, help="defaults to $QUANT_SEED, then 0")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--epochs", type=int, default=X.TRAIN_EPOCHS)
    common.add_argument("--train-lr", type=float, default=X.TRAIN_LR)

    p = argparse.ArgumentParser(prog="ptqkit", description="Post-training weight quantization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the toy CNN baseline")
    sub.add_parser("assign-bits", parents=[common], help="per-layer bits from coding lengths")
    sub.add_parser("quantize", parents=[common], help="calibrate and quantize a model")
    ev = sub.add_parser("eval", parents=[common], help="top-1 and per-class accuracy")
    ev.add_argument("--reference", help="float model directory to report the accuracy delta against")
    sub.add_parser("compare", parents=[common], help="rounder comparison and tau sweep")
    return p


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("QUANT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"QUANT_SEED must be an integer, got {env!r}") from None


def _hyper(args, seed):
    return HyperParams(lr=args.lr, iters=args.iters, batch=args.batch, calib_size=args.calib_size,
                       tau=args.tau, seed=seed)


def _dataset(images, labels, what):
    if not images and not labels:
        return None
    if not images or not labels:
        raise UsageError(f"{what} needs both images and labels")
    for path in (images, labels):
        if not Path(path).exists():
            raise FileNotFoundError(f"{what} file not found: {path}")
    return load_idx(images, labels)


def _need(ds, flag):
    if ds is None:
        raise UsageError(f"{flag} is required for this command")
    return ds


def _model(args):
    if not args.model:
        raise UsageError("--model is required for this command")
    return load_model(args.model)


def _check_input(model, ds):
    if model.input_shape and tuple(ds.images.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"data shape {ds.images.shape[1:]} does not match model input {tuple(model.input_shape)}")


def _write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def cmd_train(args, seed, out):
    train = _need(_dataset(args.data_images, args.data_labels, "training data"), "--data-images")
    test = _dataset(args.test_images, args.test_labels, "test data")
    model, acc = X.train_toy(train, test, seed=seed, epochs=args.epochs, lr=args.train_lr)
    save_model(model, out / "model")
    cfg = {"command": "train", "epochs": args.epochs, "train_lr": args.train_lr, "seed": seed}
    _write_json(out / "metrics.json", {"accuracy": acc, "epochs": args.epochs, "seed": seed,
                                       "evaluated_on": "test" if test is not None else "train",
                                       "config_hash": X.config_hash(cfg)})
    print(f"accuracy {acc:.4f}")


def cmd_assign_bits(args, seed, out):
    if not args.bit_list:
        raise UsageError("--bit-list is required for assign-bits")
    model = fuse_bn(_model(args))
    cfg = CodingConfig(args.epsilon, args.prefactor)
    ba = assign_bits(model, args.bit_list, cfg)
    doc = json.loads(ba.to_json())
    doc["seed"] = seed
    h = X.config_hash({"command": "assign-bits", "bit_list": args.bit_list, **doc["config"]})
    doc["config_hash"] = h
    _write_json(out / "bits.json", doc)
    rows = [[name, f"{length:.6f}", ba.bits[name], seed, h] for name, length in ba.sorted_lengths]
    _write_csv(out / "coding_lengths.csv", ["layer", "coding_length", "bits", "seed", "config_hash"], rows)
    for name, length in ba.sorted_lengths:
        print(f"{name}\t{length:.1f}\t{ba.bits[name]}")


def cmd_quantize(args, seed, out):
    if (args.wbits is None) == (args.bit_list is None):
        raise UsageError("give exactly one of --wbits or --bit-list")
    for flag, values in (("--wbits", [args.wbits]), ("--abits", [args.abits]), ("--bit-list", args.bit_list or [])):
        if any(v is not None and v < 2 for v in values):
            raise UsageError(f"{flag} must be at least 2")
    hyper = _hyper(args, seed)
    coding = CodingConfig(args.epsilon, args.prefactor)
    model = _model(args)
    calib = _need(_dataset(args.data_images, args.data_labels, "calibration data"), "--data-images")
    test = _dataset(args.test_images, args.test_labels, "test data")
    _check_input(model, calib)
    fused = fuse_bn(model)
    if args.bit_list:
        assignment = assign_bits(fused, args.bit_list, coding).bits
    else:
        assignment = {layer.name: args.wbits for layer in fused.weighted_layers()}
    eval_ds = test if test is not None else calib
    _check_input(model, eval_ds)
    res = X.run_ptq(model, calib, eval_ds, hyper, rounder=args.rounder, bit_assignment=assignment,
                    abits=args.abits)
    cfg = {"command": "quantize", "rounder": args.rounder, "assignment": assignment, "abits": args.abits,
           "epsilon": args.epsilon, "prefactor": args.prefactor, **hyper.to_dict()}
    h = X.config_hash(cfg)
    save_model(res["model"], out / "model")
    rows = [[r.layer, r.bits_w, r.bits_a if r.bits_a else 32, repr(r.scale), f"{r.initial_loss:.6e}",
             f"{r.final_loss:.6e}", f"{r.seconds:.3f}", seed, h] for r in res["records"]]
    _write_csv(out / "report.csv", ["layer", "bits_w", "bits_a", "scale", "init_loss", "final_loss", "seconds",
                                    "seed", "config_hash"], rows)
    _write_json(out / "metrics.json", {"accuracy": res["accuracy"], "rounder": args.rounder, "seed": seed,
                                       "bits_w": res["model"].bit_assignment,
                                       "bits_a": args.abits if args.abits else 32,
                                       "weight_bits_total": res["weight_bits"],
                                       "evaluated_on": "test" if test is not None else "calibration",
                                       "config_hash": h})
    print(f"accuracy {res['accuracy']:.4f}")


def cmd_eval(args, seed, out):
    model = _model(args)
    test = _need(_dataset(args.test_images, args.test_labels, "test data"), "--test-images")
    if len(test) == 0:
        raise UsageError("test set is empty")
    _check_input(model, test)
    preds = predict(model, test.images)
    acc = float((preds == test.labels).mean())
    # hash contents rather than paths so a copied model or dataset keeps its hash
    doc = {"accuracy": acc, "seed": seed, "n": len(test)}
    h = X.config_hash({"command": "eval", "model": {k: weight_checksum(v) for k, v in model.params.items()},
                       "test": [weight_checksum(test.images), weight_checksum(test.labels)]})
    doc["config_hash"] = h
    rows = []
    for c in range(test.classes):
        mask = test.labels == c
        n = int(mask.sum())
        rows.append([c, n, f"{(preds[mask] == c).mean():.6f}" if n else "nan", seed, h])
    _write_csv(out / "per_class.csv", ["class", "count", "accuracy", "seed", "config_hash"], rows)
    if args.reference:
        ref = load_model(args.reference)
        _check_input(ref, test)
        doc["reference_accuracy"] = accuracy(ref, test)
        doc["delta"] = acc - doc["reference_accuracy"]
    _write_json(out / "metrics.json", doc)
    line = f"accuracy {acc:.4f}"
    if "delta" in doc:
        line += f" reference {doc['reference_accuracy']:.4f} delta {doc['delta']:+.4f}"
    print(line)


def cmd_compare(args, seed, out):
    model = _model(args)
    calib = _need(_dataset(args.data_images, args.data_labels, "calibration data"), "--data-images")
    test = _need(_dataset(args.test_images, args.test_labels, "test data"), "--test-images")
    _check_input(model, calib)
    _check_input(model, test)
    wbits = args.wbits if args.wbits is not None else 4
    hyper = _hyper(args, seed)
    rows = X.rounder_rows(model, calib, test, hyper, wbits=wbits, abits=args.abits)
    rows += X.tau_rows(model, calib, test, hyper, wbits=wbits, abits=args.abits)
    header = ["section", "rounder", "tau", "wbits", "abits", "seed", "accuracy", "seconds", "config_hash"]
    _write_csv(out / "compare.csv", header, [[r[k] for k in header] for r in rows])
    for r in rows:
        print(f"{r['section']}\t{r['rounder']}\t{r['tau']}\t{r['accuracy']:.4f}")


COMMANDS = {"train": cmd_train, "assign-bits": cmd_assign_bits, "quantize": cmd_quantize, "eval": cmd_eval,
            "compare": cmd_compare}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        seed = _seed(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, seed, out)
    except (OSError, FormatError, SizeError, ShapeError, StructureError, CalibrationError) as e:
        print(f"ptqkit: error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:  # ConfigError and invalid parameter values
        print(f"ptqkit: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
