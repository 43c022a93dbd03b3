"""End-to-end episodic run on synthetic data, plus the ablation story.

Builds an in-memory synthetic manifest whose classes differ only in
frame order, trains the full model for a short stretch, and scores it
against the two single-pathway ablations on novel test classes. The
order-only construction is exactly the regime where appearance matching
saturates and the motion pathway pays its way.
"""

import io
import time

from cpm2c import data, runner

synth = data.SyntheticConfig(num_classes=20, dim=64, frames=8, scale=1.0,
                             sigma=0.3, mode="permuted", seed=0,
                             common_ratio=12.0)
manifest = data.build_synthetic_manifest(synth, videos_per_class=30,
                                         fractions=(0.3, 0.2, 0.5))
for split in ("train", "val", "test"):
    classes = manifest.classes_in(split)
    videos = sum(len(manifest.videos_of(split, c)) for c in classes)
    print(f"{split:<6} {len(classes):>2} classes, {videos:>3} videos")

for preset in ("full", "no-motion", "motion-only"):
    cfg = runner.RunConfig(way=5, shot=1, queries=1, steps=300, window=4,
                           lr=1e-3, seed=0, preset=preset,
                           consistency_reduction="mean", log_every=10 ** 9)
    t0 = time.time()
    run = runner.train(manifest, cfg, log=io.StringIO())
    res = runner.evaluate(manifest, run.model, cfg, episodes=300,
                          split="test", shot=5, workers=4)
    print(f"{preset:<12} test 5-way 5-shot accuracy "
          f"{res.accuracy:.3f} +/- {res.half_width:.3f}   "
          f"({time.time() - t0:.0f}s)")
