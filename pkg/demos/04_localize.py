"""Read object locations off the activation maps of a trained network.

Needs the checkpoint from demos/03_train_and_evaluate.py. For each of a
few held-out images this prints the peak location and thresholded box
per present class, writes the class maps as PGM images, and closes with
the CorLoc score over the split.

The box threshold runs on the raw maps: after sigmoid squashing every
cell sits in a narrow band near the top, so a fraction-of-peak cut only
separates figure from ground pre-sigmoid.
"""

import pathlib
import sys

import numpy as np

from camloc.dataset import load_dataset
from camloc.detection import cam_probabilities, predict_box, predict_point
from camloc.metrics import corloc
from camloc.netpbm import write_pgm
from camloc.network import forward_cam, load_checkpoint

OUT = pathlib.Path(__file__).resolve().parent / "output"
SIZE = (32, 32)

if not (OUT / "ckpt.txt").exists():
    sys.exit("run demos/03_train_and_evaluate.py first to produce the checkpoint")

net, _ = load_checkpoint(str(OUT / "ckpt.txt"))
samples, doc = load_dataset(OUT / "data_eval")
names = doc["class_names"]

maps_dir = OUT / "maps"
maps_dir.mkdir(exist_ok=True)

predicted = []
for sample in samples:
    cam = forward_cam(net, sample.image)
    probs = cam_probabilities(cam)
    for cls in sample.present_classes:
        point = predict_point(probs, cls, SIZE)
        box = predict_box(cam, cls, SIZE, threshold_frac=0.5)
        if box is not None:
            predicted.append((sample.image_id, cls, box))
        if sample is samples[0] or sample is samples[1]:
            gt = [f"({b.x_min},{b.y_min})-({b.x_max},{b.y_max})"
                  for c, b in ((i.cls, i.box) for i in sample.instances) if c == cls]
            shown = (f"({box.x_min},{box.y_min})-({box.x_max},{box.y_max})"
                     if box else "none")
            print(f"{sample.image_id} {names[cls]:>8}: peak ({point.x},{point.y}) "
                  f"p={point.score:.2f}  box {shown}  gt {' '.join(gt)}")
    if sample is samples[0]:
        for cls in range(len(names)):
            gray = np.round(255 * probs[cls] / probs[cls].max()).astype(np.uint8)
            write_pgm(maps_dir / f"{sample.image_id}_{names[cls]}.pgm", gray)
        print(f"  (probability maps for {sample.image_id} -> {maps_dir})")

gt_boxes = {s.image_id: [(i.cls, i.box) for i in s.instances] for s in samples}
report = corloc(predicted, gt_boxes, len(names))
print("\nCorLoc over the eval split (IoU > 0.5):")
for cls, value in report.per_class.items():
    text = "n/a" if value is None else f"{value:.3f}"
    print(f"  {names[cls]:>8}: {text}")
print(f"  pooled: {report.pooled:.3f}")
