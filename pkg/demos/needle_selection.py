"""A needle item, what each view of it keeps, and which patches a flex model selects.

Run: python demos/needle_selection.py [steps]
Training is short by default, so the selection is only partly learned.
"""

import sys
from dataclasses import replace

import numpy as np

from flexattn.bench import needle
from flexattn.bench.train import EFFICACY_CONFIG, selection_traces, train

task = needle.make_task(seed=1, index=0)
print("target cell", task.target_cell, "glyph class", task.glyph_class, "at HR patch", task.glyph_patch)
r, c = task.glyph_patch
p = needle.PATCH
print("glyph patch pixels (x64):")
print((task.image.pixels[r * p:(r + 1) * p, c * p:(c + 1) * p, 0] * 64).round().astype(int))
lr = needle.lr_view(task)
print("the same region in the LR view is one pixel:", round(float(lr[r, c, 0]) * 64, 2), "/64")

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
rc = replace(EFFICACY_CONFIG, steps=steps, log_every=max(1, steps // 3), eval_size=128)
rep, cfg, w = train(rc, log=print, return_weights=True)
print("held-out accuracy", rep["metrics"]["final_accuracy"], "in-block fraction", rep["metrics"]["in_block_fraction"])

block = set(needle.target_block(task, rc.hr_factor))
for layer in selection_traces(cfg, w, [task])[0]["layers"]:
    hit = np.mean([i in block for i in layer["hr_indices"]]) if layer["hr_indices"] else 0.0
    print(f"layer {layer['layer']} (map from layer {layer['source_layer']}): LR patches {layer['lr_indices']}, "
          f"{hit:.0%} of selected HR tokens near the glyph")
