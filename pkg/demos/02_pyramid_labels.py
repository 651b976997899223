"""Point annotations become pyramid bit vectors; activation maps pool
into the same layout.

A click on an object marks the class in every pyramid tile containing
the click. Average-pooling an activation map over the same tiles gives a
score vector in the identical layout, which is what lets one loss
compare the two directly.
"""

import numpy as np

from camloc.pyramid import (
    PyramidSpec,
    encode_image_labels,
    encode_point_labels,
    parse_label_vector,
    serialize_label_vector,
    spp_average_pool,
)

spec = PyramidSpec(levels=(1, 2), class_count=2)
W = H = 100

# Class 0 clicked twice in the top half, class 1 once bottom-right.
points = [(0, 20, 20), (0, 80, 20), (1, 90, 90)]
bits = encode_point_labels(points, (W, H), spec)

print(f"levels {spec.levels}, {spec.class_count} classes -> "
      f"{spec.total_dim} bits\n")
print("tile grid, top to bottom (class0/class1):")
names = ["whole image", "tile (0,0)", "tile (0,1)", "tile (1,0)", "tile (1,1)"]
for t, name in enumerate(names):
    pair = bits[2 * t: 2 * t + 2]
    print(f"  {name:<12} {pair[0]} {pair[1]}")

# Image-level tags only fill the level-1 slots.
image_bits = encode_image_labels([0, 1], spec)
print("\nimage-level tags set only the first block:", image_bits)

line = serialize_label_vector(bits, spec)
print("\none-line text form:", line)
parsed, _ = parse_label_vector(line)
print("parses back exactly:", bool(np.array_equal(parsed, bits)))

# A fake activation map whose class-0 channel lights up where the clicks
# were: the pooled vector mirrors the label layout entry for entry.
cam = np.zeros((2, 4, 4))
cam[0, :2, :] = 1.0     # class 0 hot in the top half
cam[1, 2:, 2:] = 1.0    # class 1 hot bottom-right
pooled = spp_average_pool(cam, spec)
print("\npooled scores next to label bits:")
for t, name in enumerate(names):
    s = pooled[2 * t: 2 * t + 2]
    b = bits[2 * t: 2 * t + 2]
    print(f"  {name:<12} scores {s[0]:.2f} {s[1]:.2f}   bits {b[0]} {b[1]}")
