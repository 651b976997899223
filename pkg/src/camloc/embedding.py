"""Label co-occurrence statistics and the PPMI embedding transform.

Binary label vectors (one bit per class, or per pyramid tile and class)
are reduced to a joint-count table, turned into pointwise mutual
information, clamped to PPMI, and factored into a linear transform
``E = U @ sqrt(S)`` whose Gram matrix reproduces the (PSD-projected)
PPMI matrix. ``E`` maps label/score vectors into a de-correlated space;
its pseudo-inverse maps back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "CooccurrenceTable",
    "PmiMatrix",
    "EmbeddingModel",
    "count_cooccurrences",
    "compute_pmi",
    "compute_ppmi",
    "fit_embedding",
    "fit_from_labels",
    "project",
    "backproject",
    "save_embedding",
    "load_embedding",
]

# Max tolerated asymmetry for a matrix handed to fit_embedding.
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class CooccurrenceTable:
    """Joint presence counts over a set of labeled units.

    ``joint_counts[i, j]`` is the number of units in which labels i and j
    are both present; the diagonal holds per-label presence counts.
    """

    class_dim: int
    joint_counts: NDArray[np.int64]
    unit_count: int

    def __post_init__(self) -> None:
        jc = self.joint_counts
        if jc.shape != (self.class_dim, self.class_dim):
            raise ValueError("joint_counts shape does not match class_dim")
        if self.unit_count < 1:
            raise ValueError("unit_count must be positive")
        if np.any(jc < 0):
            raise ValueError("joint_counts must be non-negative")
        if np.any(jc != jc.T):
            raise ValueError("joint_counts must be symmetric")
        diag = np.diag(jc)
        if np.any(jc > np.minimum.outer(diag, diag)) or np.any(diag > self.unit_count):
            raise ValueError("joint counts exceed marginal counts")


@dataclass(frozen=True)
class PmiMatrix:
    """Pointwise mutual information with an explicit definedness mask.

    ``values[i, j] = log(p_ij / (p_i * p_j))`` (natural log) wherever the
    joint probability is positive; entries with a zero joint count carry
    ``defined_mask[i, j] = False`` and a placeholder value of 0.
    """

    values: NDArray[np.float64]
    defined_mask: NDArray[np.bool_]


@dataclass(frozen=True)
class EmbeddingModel:
    """Eigendecomposition of a PPMI matrix packaged as a linear map.

    ``transform`` is ``U @ diag(sqrt(eigenvalues))`` with eigenvalues
    clamped at zero, so ``transform @ transform.T`` equals the PSD
    projection of ``ppmi``. ``clamped_mass`` records the total absolute
    weight of eigenvalues that had to be clamped (elementwise clamping of
    PMI does not guarantee positive semidefiniteness).
    """

    ppmi: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]
    eigenvectors: NDArray[np.float64]
    transform: NDArray[np.float64]
    transform_pinv: NDArray[np.float64]
    clamped_mass: float = field(default=0.0)

    def __post_init__(self) -> None:
        # The model is a fixed component once fit: training must never
        # write to it, so every array is frozen outright.
        for arr in (self.ppmi, self.eigenvalues, self.eigenvectors,
                    self.transform, self.transform_pinv):
            arr.setflags(write=False)

    @property
    def class_dim(self) -> int:
        return self.ppmi.shape[0]


def count_cooccurrences(label_vectors) -> CooccurrenceTable:
    """Count joint label presences over a sequence of binary vectors.

    Parameters
    ----------
    label_vectors : sequence of binary vectors, all of equal length

    Returns
    -------
    CooccurrenceTable with ``joint_counts[i, j]`` = number of vectors in
    which bits i and j are both set, and ``unit_count`` = len(sequence).
    """
    vectors = [np.asarray(v) for v in label_vectors]
    if len(vectors) == 0:
        raise ValueError("no labeled units")
    dim = vectors[0].shape[0] if vectors[0].ndim == 1 else -1
    for v in vectors:
        if v.ndim != 1 or v.shape[0] != dim:
            raise ValueError("inconsistent label vector lengths")
    stack = np.stack(vectors).astype(np.int64)
    if np.any((stack != 0) & (stack != 1)):
        raise ValueError("label vectors must be binary")
    joint = stack.T @ stack
    return CooccurrenceTable(class_dim=dim, joint_counts=joint, unit_count=len(vectors))


def compute_pmi(table: CooccurrenceTable) -> PmiMatrix:
    """Pointwise mutual information from maximum-likelihood count ratios.

    A pair with a zero joint count has an undefined (negatively infinite)
    log ratio; such entries are masked out rather than given a value.
    Diagonal entries, where defined, equal ``-log p_i >= 0``.
    """
    m = float(table.unit_count)
    joint = table.joint_counts.astype(np.float64)
    marginals = np.diag(joint)
    defined = table.joint_counts > 0  # implies both marginals > 0
    p_joint = joint / m
    p_outer = np.outer(marginals / m, marginals / m)
    values = np.zeros_like(p_joint)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(defined, p_joint / np.where(p_outer > 0, p_outer, 1.0), 1.0)
        values = np.where(defined, np.log(ratio), 0.0)
    return PmiMatrix(values=values, defined_mask=defined)


def compute_ppmi(pmi: PmiMatrix) -> NDArray[np.float64]:
    """Clamp PMI at zero; undefined entries are treated as zero.

    Only positive correlation between label presences is retained, which
    is the signal relevant for objects that tend to appear together.
    """
    return np.where(pmi.defined_mask, np.maximum(pmi.values, 0.0), 0.0)


def fit_embedding(ppmi: NDArray[np.float64]) -> EmbeddingModel:
    """Factor a PPMI matrix into the embedding transform ``E``.

    The symmetric eigendecomposition is taken at full dimension (no
    truncation). Negative eigenvalues, which can occur because the
    elementwise clamp does not preserve positive semidefiniteness, are
    clamped to zero before the square root so that ``E`` stays real;
    their absolute sum is reported as ``clamped_mass``.

    Eigenvalues are ordered descending and each eigenvector's sign is
    fixed by making its largest-magnitude entry positive, so the fit is
    deterministic.
    """
    # Copy: the model freezes its arrays, which must not reach back into
    # a caller-owned buffer.
    ppmi = np.array(ppmi, dtype=np.float64)
    if ppmi.ndim != 2 or ppmi.shape[0] != ppmi.shape[1] or ppmi.shape[0] < 1:
        raise ValueError("ppmi must be a square matrix of dimension >= 1")
    asym = np.max(np.abs(ppmi - ppmi.T)) if ppmi.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValueError(f"ppmi is not symmetric (max asymmetry {asym:.3e})")

    eigvals, eigvecs = np.linalg.eigh(ppmi)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for k in range(eigvecs.shape[1]):
        lead = np.argmax(np.abs(eigvecs[:, k]))
        if eigvecs[lead, k] < 0:
            eigvecs[:, k] = -eigvecs[:, k]

    clamped_mass = float(np.sum(np.abs(eigvals[eigvals < 0])))
    eigvals = np.maximum(eigvals, 0.0)
    transform = eigvecs * np.sqrt(eigvals)[np.newaxis, :]
    return EmbeddingModel(
        ppmi=ppmi,
        eigenvalues=eigvals,
        eigenvectors=eigvecs,
        transform=transform,
        transform_pinv=np.linalg.pinv(transform),
        clamped_mass=clamped_mass,
    )


def fit_from_labels(label_vectors) -> EmbeddingModel:
    """Convenience chain: counts -> PMI -> PPMI -> embedding fit."""
    return fit_embedding(compute_ppmi(compute_pmi(count_cooccurrences(label_vectors))))


def project(model: EmbeddingModel, x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Map a vector into the embedding space: ``E @ x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.class_dim,):
        raise ValueError(f"expected vector of length {model.class_dim}, got shape {x.shape}")
    return model.transform @ x


def backproject(model: EmbeddingModel, z: NDArray[np.float64]) -> NDArray[np.float64]:
    """Reconstruct from the embedding space via the pseudo-inverse of ``E``.

    For ``z = E @ x`` this recovers the projection of ``x`` onto the row
    space of ``E`` (equal to ``x`` itself when ``E`` has full rank). Used
    for diagnostics; gradient flow through the fixed embedding layer uses
    the adjoint ``E.T`` instead (see camloc.layers.fixed_linear_backward).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.class_dim,):
        raise ValueError(f"expected vector of length {model.class_dim}, got shape {z.shape}")
    return model.transform_pinv @ z


# ---------------------------------------------------------------------------
# Serialization: versioned plain-text format
#
#   ppmi-embed v1 dim=<n>
#   <n rows of ppmi, n values each>
#   <1 row of n eigenvalues>
#   <n rows of E, n values each>
#
# Values use 17 significant digits, which round-trips float64 exactly.
# ---------------------------------------------------------------------------

_HEADER_PREFIX = "ppmi-embed v1 dim="


def _format_row(row: NDArray[np.float64]) -> str:
    return " ".join(f"{v:.17g}" for v in row)


def save_embedding(model: EmbeddingModel, path) -> None:
    n = model.class_dim
    lines = [f"{_HEADER_PREFIX}{n}"]
    lines.extend(_format_row(r) for r in model.ppmi)
    lines.append(_format_row(model.eigenvalues))
    lines.extend(_format_row(r) for r in model.transform)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_embedding(path) -> EmbeddingModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise ValueError(f"{path}: not a ppmi-embed v1 file")
    n = int(lines[0][len(_HEADER_PREFIX):])
    expected = 1 + n + 1 + n
    if len(lines) != expected:
        raise ValueError(f"{path}: expected {expected} lines, found {len(lines)}")

    def parse_rows(rows, count):
        out = np.array([[float(v) for v in row.split()] for row in rows], dtype=np.float64)
        if out.shape != (count, n):
            raise ValueError(f"{path}: malformed value block")
        return out

    ppmi = parse_rows(lines[1:1 + n], n)
    eigenvalues = parse_rows(lines[1 + n:2 + n], 1)[0]
    transform = parse_rows(lines[2 + n:], n)

    # Eigenvectors are not stored; refit from the (exactly round-tripped)
    # PPMI matrix and cross-check against the stored factors.
    refit = fit_embedding(ppmi)
    if (np.max(np.abs(refit.eigenvalues - eigenvalues)) > 1e-8
            or np.max(np.abs(refit.transform - transform)) > 1e-8):
        raise ValueError(f"{path}: stored factors inconsistent with stored ppmi")
    return EmbeddingModel(
        ppmi=ppmi,
        eigenvalues=eigenvalues,
        eigenvectors=refit.eigenvectors,
        transform=transform,
        transform_pinv=np.linalg.pinv(transform),
        clamped_mass=refit.clamped_mass,
    )
