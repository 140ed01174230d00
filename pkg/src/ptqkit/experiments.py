"""Desk-scale experiment drivers shared by the CLI, the notebooks and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bits import CodingConfig, assign_bits
from .calibration import HyperParams, model_weight_bits, quantize_model
from .graph import accuracy, fuse_bn, toy_cnn, train_baseline
from .io import load_idx, take_calibration
from .quantizers import ROUNDERS
from .tensor import make_rng

TAU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
TRAIN_EPOCHS = 10
TRAIN_LR = 0.05


def default_data_dir() -> Path:
    env = os.environ.get("PTQKIT_DATA")
    return Path(env) if env else Path(__file__).resolve().parents[2] / "data" / "mnist5k"


def load_mnist(root=None):
    """The bundled 4000/1000 MNIST split as ``(train, test)``."""
    root = Path(root) if root else default_data_dir()
    train = load_idx(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz")
    test = load_idx(root / "t1k-images-idx3-ubyte.gz", root / "t1k-labels-idx1-ubyte.gz")
    return train, test


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def train_toy(train, test, seed=0, epochs=TRAIN_EPOCHS, lr=TRAIN_LR):
    """Train the toy CNN; returns ``(model_with_bn, test_accuracy)``."""
    shape = train.images.shape[1:]
    model = toy_cnn(make_rng([seed, 0]), in_ch=shape[0], classes=train.classes, image=shape[1])
    return train_baseline(model, train, epochs, lr, make_rng([seed, 1]), test=test)


def run_ptq(model, train, test, hyper: HyperParams, rounder="attention", wbits=4, bit_assignment=None,
            abits=None):
    """BN-fuse, draw the calibration subset, quantize and evaluate.

    Returns a dict with the accuracy, the records and the quantized model.
    """
    fused = fuse_bn(model)
    calib = take_calibration(train, hyper.calib_size, make_rng([hyper.seed, 2]))
    names = [layer.name for layer in fused.weighted_layers()]
    assignment = dict(bit_assignment) if bit_assignment else {n: wbits for n in names}
    t0 = time.perf_counter()
    q, records = quantize_model(fused, calib.images, assignment, hyper, rounder=rounder,
                                quantize_acts=abits is not None, abits=abits)
    seconds = time.perf_counter() - t0
    return {
        "accuracy": accuracy(q, test),
        "records": records,
        "model": q,
        "seconds": seconds,
        "weight_bits": model_weight_bits(q, q.bit_assignment),
    }


def rounder_rows(model, train, test, hyper: HyperParams, wbits=4, abits=None, rounders=ROUNDERS):
    rows = []
    for r in rounders:
        res = run_ptq(model, train, test, hyper, rounder=r, wbits=wbits, abits=abits)
        cfg = {"section": "rounder", "rounder": r, "tau": hyper.tau, "wbits": wbits, "abits": abits, **hyper.to_dict()}
        rows.append({"section": "rounder", "rounder": r, "tau": hyper.tau, "wbits": wbits,
                     "abits": abits if abits else 32, "seed": hyper.seed, "accuracy": res["accuracy"],
                     "seconds": round(res["seconds"], 3), "config_hash": config_hash(cfg)})
    return rows


def tau_rows(model, train, test, hyper: HyperParams, wbits=4, abits=None, taus=TAU_GRID):
    rows = []
    for tau in taus:
        hp = replace(hyper, tau=tau)
        res = run_ptq(model, train, test, hp, rounder="attention", wbits=wbits, abits=abits)
        cfg = {"section": "tau", "rounder": "attention", "wbits": wbits, "abits": abits, **hp.to_dict()}
        rows.append({"section": "tau", "rounder": "attention", "tau": tau, "wbits": wbits,
                     "abits": abits if abits else 32, "seed": hp.seed, "accuracy": res["accuracy"],
                     "seconds": round(res["seconds"], 3), "config_hash": config_hash(cfg)})
    return rows


def mixed_precision(model, train, test, hyper: HyperParams, bit_list=(3, 4, 5), cfg=CodingConfig()):
    """Attention round with bits from the coding-length allocator."""
    assignment = assign_bits(fuse_bn(model), bit_list, cfg)
    res = run_ptq(model, train, test, hyper, rounder="attention", bit_assignment=assignment.bits)
    res["assignment"] = assignment
    return res


def seed_mean(values) -> float:
    return float(np.mean(values))
