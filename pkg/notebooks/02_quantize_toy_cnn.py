"""
Post-training quantization of a small MNIST CNN
================================================

Train the toy network, then quantize its weights to 4 bits with a few
rounders using 1024 calibration images. Set ITERS to 2000 for the full
calibration budget; the default keeps the script to about a minute.
"""
from ptqkit import HyperParams
from ptqkit.experiments import load_mnist, run_ptq, train_toy

ITERS = 300

train, test = load_mnist()
model, fp_acc = train_toy(train, test, seed=0)
print(f"float accuracy {fp_acc:.4f}")

# %%
# The first and last layers stay at 8 bits; the middle two get 4.
hyper = HyperParams(iters=ITERS, seed=0)
for rounder in ("nearest", "floor", "stochastic", "attention"):
    res = run_ptq(model, train, test, hyper, rounder=rounder, wbits=4)
    print(f"{rounder:<11} accuracy {res['accuracy']:.4f}  ({res['seconds']:.1f}s)")

# %%
# Per-layer reconstruction error before and after calibrating attention round.
# The initial loss uses the random starting alpha, so it is worse than nearest.
for rec in res["records"]:
    print(f"{rec.layer:<6} {rec.bits_w} bits  loss {rec.initial_loss:.3e} -> {rec.final_loss:.3e}")
