"""Generate a small shapes dataset, train with the cosine objective, and
score classification on held-out images.

Runs in two to three minutes on one core. Artifacts land in demos/output so
the localization demo can pick up the checkpoint afterwards.
"""

import pathlib
import time

import numpy as np

from camloc.dataset import DatasetConfig, generate_dataset, load_dataset
from camloc.embedding import fit_from_labels
from camloc.metrics import classification_map
from camloc.network import (
    NetworkConfig,
    TrainingConfig,
    build_network,
    forward_cam,
    pyramid_label,
    save_checkpoint,
    train,
)
from camloc.pyramid import PyramidSpec, spp_average_pool

OUT = pathlib.Path(__file__).resolve().parent / "output"
SIZE = (32, 32)

for split, count, seed in (("train", 120, 0), ("eval", 40, 1)):
    manifest = generate_dataset(
        DatasetConfig(image_size=SIZE, image_count=count, seed=seed),
        OUT / f"data_{split}")
    print(f"{split}: {manifest['images']} images, "
          f"sha {manifest['content_sha256'][:12]}...")

train_samples, _ = load_dataset(OUT / "data_train")
spec = PyramidSpec(levels=(1,), class_count=4)
labels = np.stack([pyramid_label(s, spec, SIZE) for s in train_samples])
embedding = fit_from_labels(labels)
print(f"embedding over {labels.shape[1]} label dims, "
      f"clamped mass {embedding.clamped_mass:.3g}")

# Narrower nets tend to park all classes on one shared plateau (the
# cosine loss barely penalizes it); this width reliably escapes.
net = build_network(NetworkConfig(input_size=SIZE, class_count=4,
                                  block_channels=(16, 32), head_channels=32),
                    seed=0)
cfg = TrainingConfig(batch_size=16, iterations=800, warmup_iters=80,
                     seed=0, loss_mode="cosine_ppmi", levels=(1,))
start = time.monotonic()
history = train(net, train_samples, cfg, embedding=embedding)
print(f"trained {cfg.iterations} iterations in {time.monotonic() - start:.0f}s, "
      f"loss {history[0]:.3f} -> {history[-1]:.3f}")

save_checkpoint(net, str(OUT / "ckpt.txt"), meta={"demo": "03"})

eval_samples, _ = load_dataset(OUT / "data_eval")
eval_spec = PyramidSpec(levels=(1, 2), class_count=4)
pooled = np.stack([spp_average_pool(forward_cam(net, s.image), eval_spec)
                   for s in eval_samples])
gt = np.stack([pyramid_label(s, eval_spec, SIZE) for s in eval_samples])
report = classification_map(pooled, gt, eval_spec)

print("\nheld-out average precision per class:")
for cls, ap in report.image_ap.items():
    print(f"  class {cls}: {ap:.3f}" if ap is not None else f"  class {cls}: n/a")
print(f"image mAP {report.image_map:.3f}, "
      f"2x2-tile mAP {report.tile_map[2]:.3f}")
print(f"\ncheckpoint written to {OUT / 'ckpt.txt'}")
