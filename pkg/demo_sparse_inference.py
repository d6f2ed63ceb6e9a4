"""
Sparse inference demonstration
===============================

This script runs a freshly initialised gated backbone over a few synthetic
scenes, first keep-all and then with the default keep-ratio schedule
injected as masks.  Here's the basic flow:

0. Build a small model and a handful of scenes
1. Run the dense backbone and report its FLOPs
2. Inject nested schedule masks and run the gathered (sparse) backbone
3. Print per-layer keep counts and the FLOP saving

"""
import numpy as np

import vitprune
from vitprune.harness import schedule_masks
from vitprune.scenes import SceneSpec, make_dataset

dims = vitprune.ModelDims(image_size=64)
prune = vitprune.PruneConfig()
params = vitprune.init_params(dims, np.random.default_rng(0),
                              prune.gated_layers)
scenes = make_dataset(SceneSpec(image_size=64, seed=0), 4)

print("Dense backbone")
dense = vitprune.run_backbone(scenes[0][0], params,
                              vitprune.PruneConfig.dense())
print("\t", "flops:", dense.flops, "\n")

print("Scheduled masks")
rng = np.random.default_rng(1)
for image, labels in scenes:
    masks = schedule_masks(prune, dims.n_tokens, rng)
    out = vitprune.run_backbone(image, params, prune, masks=masks)
    print("\t", "kept:", out.trace.keep_counts.tolist(),
          "flops: {0:.3f} of dense".format(out.flops / dense.flops))
