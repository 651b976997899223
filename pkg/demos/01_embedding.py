"""Walk through the label embedding: counts to PMI to PPMI to a factor.

Four toy images over three classes are enough to see every stage. The
pair (cat, ball) co-occurs more often than chance, (cat, tree) less, and
the embedding turns the clamped log ratios into a linear map that sends
label vectors to directions a cosine loss can aim at.
"""

import numpy as np

from camloc.embedding import (
    backproject,
    compute_pmi,
    compute_ppmi,
    count_cooccurrences,
    fit_embedding,
    load_embedding,
    project,
    save_embedding,
)

CLASSES = ["cat", "ball", "tree"]

# One row per image: which classes are present.
labels = np.array([
    [1, 1, 0],   # cat plays with ball
    [1, 1, 0],   # again; the pair is a habit
    [0, 0, 1],   # a lone tree
    [1, 0, 1],   # cat under tree
])

table = count_cooccurrences(labels)
print("joint presence counts (diagonal = per-class counts):")
print(table.joint_counts)

pmi = compute_pmi(table)
print("\nPMI (masked entries never co-occurred):")
for i in range(3):
    row = []
    for j in range(3):
        row.append(f"{pmi.values[i, j]:+.3f}" if pmi.defined_mask[i, j] else "  -- ")
    print(f"  {CLASSES[i]:>4}: " + " ".join(row))

ppmi = compute_ppmi(pmi)
print("\nPPMI keeps only positive association:")
print(np.round(ppmi, 3))

model = fit_embedding(ppmi)
print(f"\nfactored into E ({model.transform.shape[0]}x{model.transform.shape[1]}), "
      f"clamped eigenvalue mass {model.clamped_mass:.3g}")
print("E E^T reproduces the clamped PPMI up to "
      f"{np.max(np.abs(model.transform @ model.transform.T - ppmi)):.2e} "
      "(difference is the clamped mass)")

one_hot = np.array([1.0, 0.0, 0.0])
z = project(model, one_hot)
print(f"\n'cat' maps to embedding direction {np.round(z, 3)}")
print(f"backprojection recovers {np.round(backproject(model, z), 3)}")

save_embedding(model, "/tmp/demo.embed")
again = load_embedding("/tmp/demo.embed")
print("\nsave/load round trip exact:",
      bool(np.array_equal(again.transform, model.transform)))
