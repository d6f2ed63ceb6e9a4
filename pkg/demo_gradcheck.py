"""
Gradient check demonstration
============================

Compares the taped gradients of a tiny gated model with central finite
differences under the full training loss and prints the worst relative
error per tensor.
"""
import vitprune
from vitprune.harness import gradcheck_model

dims = vitprune.ModelDims(layers=2, heads=2, width=16, image_size=16)
prune = vitprune.PruneConfig(gated_layers=(2,), keep_ratios=(0.7,))

report = gradcheck_model(dims, prune, seed=0)
for name, error in sorted(report.errors.items(), key=lambda kv: -kv[1]):
    print("\t", "{0:<24} {1:.2e}".format(name, error))

name, worst = report.worst()
print("passed" if report.passed else "FAILED",
      "(worst {0} at {1:.2e})".format(name, worst))
