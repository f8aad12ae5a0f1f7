"""
Attribution maps
================

Every method returns raw per-pixel scores and an aggregated H x W map (the
sum of absolute values over channels). The pruned-network gradient needs a
sparsity; here it comes from calibration. Maps are written as PGM heatmaps.
"""
import numpy as np

from common import OUT, splits, trained_model
from prunegrad import METHODS, attribute, calibrate_sparsity
from prunegrad.report import write_pgm

model = trained_model()
train_set, test_set = splits()
x = test_set.images[:4]
s = calibrate_sparsity(model, train_set.images[-150:], 0.15)

maps_dir = OUT / "maps"
maps_dir.mkdir(parents=True, exist_ok=True)
for method in METHODS:
    kw = {"sparsity": s} if method.startswith("prune") else {}
    amap = attribute(method, model, x, **kw)
    for j, grid in enumerate(amap.aggregated):
        write_pgm(maps_dir / f"{method}_{j}.pgm", grid)
    peak = amap.aggregated.reshape(len(x), -1).argmax(axis=1)
    print(f"{method:22s} raw {amap.raw.shape}  peak pixels {peak.tolist()}")

# write the input images too, one channel-mean heatmap each
for j, img in enumerate(x):
    write_pgm(maps_dir / f"input_{j}.pgm", img.mean(axis=0))
print("heatmaps in", maps_dir)
