"""
Mixed precision from coding lengths
===================================

Layers whose weights take more bits to describe get more bits. The coding
length of each layer is clustered into as many groups as there are bit widths.
"""
from ptqkit import HyperParams, assign_bits, fuse_bn
from ptqkit.calibration import effective_bits, model_weight_bits
from ptqkit.experiments import load_mnist, run_ptq, train_toy

ITERS = 300

train, test = load_mnist()
model, fp_acc = train_toy(train, test, seed=0)
fused = fuse_bn(model)

ba = assign_bits(fused, [3, 4, 5])
for name, length in ba.sorted_lengths:
    print(f"{name:<6} coding length {length:10.1f}  -> {ba.bits[name]} bits")

# %%
# The first and last layers are pinned to 8 bits either way, so compare the
# total weight storage against uniform 4 and 5 bits.
names = list(ba.bits)
hyper = HyperParams(iters=ITERS)
for label, bits in (("uniform 4", {n: 4 for n in names}), ("uniform 5", {n: 5 for n in names}),
                    ("mixed", ba.bits)):
    res = run_ptq(model, train, test, hyper, bit_assignment=bits)
    total = model_weight_bits(fused, effective_bits(fused, bits, hyper.first_last_bits))
    print(f"{label:<10} {total / 8 / 1024:6.1f} KiB  accuracy {res['accuracy']:.4f}")
print(f"float      accuracy {fp_acc:.4f}")
