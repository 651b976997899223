"""A small fully convolutional network with one output channel per class,
plus its training loop.

The architecture is a stack of conv/conv/pool blocks followed by a 3x3
conv head and a 1x1 conv with exactly as many filters as classes, so the
final feature map is the pre-sigmoid class activation map. There is no
global pooling inside the network; training pools the map over pyramid
tiles and drives either the embedded cosine loss or the binary logistic
baseline on the pooled scores. The embedding transform is a fixed model
component: it receives no weight updates.

Everything is deterministic for a fixed seed: initialization, batch
sampling, augmentation draws, and the index order of gradient reduction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .dataset import Instance, Sample
from .detection import Box
from .embedding import EmbeddingModel
from .layers import (
    ConvParams,
    as_tensor,
    conv2d_backward,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
)
from .losses import binary_logistic_loss, embedded_cosine_loss
from .pyramid import (
    PyramidSpec,
    encode_image_labels,
    encode_point_labels,
    spp_average_pool,
    spp_average_pool_backward,
)

__all__ = [
    "NetworkConfig",
    "TrainingConfig",
    "AugmentationConfig",
    "CamNetwork",
    "build_network",
    "forward_cam",
    "augment",
    "pyramid_label",
    "train",
    "batch_loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
    "reference_training_preset",
]

LOSS_MODES = ("cosine_ppmi", "binary_logistic")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)          # (width, height)
    class_count: int = 4
    in_channels: int = 3
    block_channels: tuple[int, ...] = (16, 32, 64)  # each block halves the map
    head_channels: int = 64

    @property
    def cam_size(self) -> tuple[int, int]:
        """(width, height) of the output map after all poolings."""
        factor = 2 ** len(self.block_channels)
        return self.input_size[0] // factor, self.input_size[1] // factor


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    iterations: int = 3000
    warmup_iters: int = 600
    lr_initial: float = 0.0001
    lr_main: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    loss_mode: str = "cosine_ppmi"
    levels: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr_initial <= 0 or self.lr_main <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_iters > self.iterations:
            raise ValueError("warmup_iters must not exceed iterations")

    def learning_rate(self, iteration: int) -> float:
        """Low warmup rate for the first warmup_iters iterations, then
        the main rate (iteration indices are 0-based)."""
        return self.lr_initial if iteration < self.warmup_iters else self.lr_main


def reference_training_preset(loss_mode: str = "cosine_ppmi",
                              levels: tuple[int, ...] = (1,), seed: int = 0) -> TrainingConfig:
    """The large-scale reference schedule: batch 256, 2000 iterations,
    warmup 600 at 1e-4, then 1e-3."""
    return TrainingConfig(batch_size=256, iterations=2000, warmup_iters=600,
                          lr_initial=0.0001, lr_main=0.001, momentum=0.9,
                          seed=seed, loss_mode=loss_mode, levels=levels)


@dataclass(frozen=True)
class AugmentationConfig:
    max_translation_frac: float = 0.05
    max_rotation_deg: float = 5.0
    gaussian_noise_sigma: float = 0.02
    mirror_prob: float = 0.5
    translate: bool = True
    rotate: bool = True
    noise: bool = True
    mirror: bool = True

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(translate=False, rotate=False, noise=False, mirror=False)


@dataclass
class CamNetwork:
    """Parameter container; the layer sequence is implied by the config."""

    config: NetworkConfig
    params: list[ConvParams]

    def param_names(self) -> list[str]:
        names = []
        for b in range(len(self.config.block_channels)):
            names += [f"block{b}.conv0", f"block{b}.conv1"]
        names += ["head.conv3x3", "head.conv1x1"]
        return names


def build_network(config: NetworkConfig, seed: int) -> CamNetwork:
    """Fan-in-scaled uniform initialization, deterministic per seed."""
    width, height = config.input_size
    factor = 2 ** len(config.block_channels)
    if width % factor or height % factor:
        raise ValueError(
            f"input size {width}x{height} not divisible by 2^{len(config.block_channels)}")
    rng = np.random.default_rng(seed)

    def conv(in_ch: int, out_ch: int, k: int) -> ConvParams:
        bound = math.sqrt(6.0 / (in_ch * k * k))
        kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        return ConvParams(kernel=kernel, bias=np.zeros(out_ch))

    params: list[ConvParams] = []
    prev = config.in_channels
    for ch in config.block_channels:
        params.append(conv(prev, ch, 3))
        params.append(conv(ch, ch, 3))
        prev = ch
    params.append(conv(prev, config.head_channels, 3))
    params.append(conv(config.head_channels, config.class_count, 1))
    return CamNetwork(config=config, params=params)


def network_forward(net: CamNetwork, x: NDArray[np.float64]):
    """Batched forward pass to the pre-sigmoid map; returns (cam, caches)."""
    width, height = net.config.input_size
    if x.ndim != 4 or x.shape[1:] != (net.config.in_channels, height, width):
        raise ValueError(
            f"expected input (N, {net.config.in_channels}, {height}, {width}), got {x.shape}")
    caches = []
    out = x
    idx = 0
    for _ in net.config.block_channels:
        for _ in range(2):
            out, c_conv = conv2d_forward(out, net.params[idx], padding=1)
            out, c_relu = relu_forward(out)
            caches.append(("conv", c_conv))
            caches.append(("relu", c_relu))
            idx += 1
        out, c_pool = maxpool2x2_forward(out)
        caches.append(("pool", c_pool))
    out, c_conv = conv2d_forward(out, net.params[idx], padding=1)
    out, c_relu = relu_forward(out)
    caches.append(("conv", c_conv))
    caches.append(("relu", c_relu))
    cam, c_conv = conv2d_forward(out, net.params[idx + 1], padding=0)
    caches.append(("conv", c_conv))
    return cam, caches


def network_backward(net: CamNetwork, dcam: NDArray[np.float64], caches):
    """Gradients for every ConvParams, in parameter order."""
    grads: list[tuple[NDArray, NDArray]] = [None] * len(net.params)
    gi = len(net.params) - 1
    dout = dcam
    for kind, cache in reversed(caches):
        if kind == "conv":
            dout, dk, db = conv2d_backward(dout, cache)
            grads[gi] = (dk, db)
            gi -= 1
        elif kind == "relu":
            dout = relu_backward(dout, cache)
        else:
            dout = maxpool2x2_backward(dout, cache)
    return grads


def forward_cam(net: CamNetwork, image: NDArray[np.float64]) -> NDArray[np.float64]:
    """Pre-sigmoid class activation map of a single (3, H, W) image."""
    cam, _ = network_forward(net, as_tensor(image, checked=True)[np.newaxis])
    return cam[0]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _translate(image, instances, dx: int, dy: int):
    _, h, w = image.shape
    src_x = np.clip(np.arange(w) - dx, 0, w - 1)
    src_y = np.clip(np.arange(h) - dy, 0, h - 1)
    image = image[:, src_y[:, np.newaxis], src_x[np.newaxis, :]]
    moved = []
    for cls, pt, bx in instances:
        new_pt = (pt[0] + dx, pt[1] + dy) if pt else None
        new_bx = (bx[0] + dx, bx[1] + dy, bx[2] + dx, bx[3] + dy) if bx else None
        moved.append((cls, new_pt, new_bx))
    return image, moved


def _rotate(image, instances, theta: float):
    _, h, w = image.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos_b, sin_b = math.cos(-theta), math.sin(-theta)
    ys, xs = np.mgrid[0:h, 0:w]
    sx = cos_b * (xs - cx) - sin_b * (ys - cy) + cx
    sy = sin_b * (xs - cx) + cos_b * (ys - cy) + cy
    sxi = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
    syi = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
    image = image[:, syi, sxi]

    cos_f, sin_f = math.cos(theta), math.sin(theta)

    def fwd(x, y):
        return (cos_f * (x - cx) - sin_f * (y - cy) + cx,
                sin_f * (x - cx) + cos_f * (y - cy) + cy)

    moved = []
    for cls, pt, bx in instances:
        new_pt = fwd(*pt) if pt else None
        new_bx = None
        if bx:
            x0, y0, x1, y1 = bx
            corners = [fwd(x0, y0), fwd(x1, y0), fwd(x0, y1), fwd(x1, y1)]
            new_bx = (min(c[0] for c in corners), min(c[1] for c in corners),
                      max(c[0] for c in corners), max(c[1] for c in corners))
        moved.append((cls, new_pt, new_bx))
    return image, moved


def _mirror(image, instances):
    _, h, w = image.shape
    image = image[:, :, ::-1]
    moved = [(cls,
              (w - 1 - pt[0], pt[1]) if pt else None,
              (w - bx[2], bx[1], w - bx[0], bx[3]) if bx else None)
             for cls, pt, bx in instances]
    return image, moved


def augment(sample: Sample, config: AugmentationConfig,
            rng: np.random.Generator) -> Sample:
    """Random translate/rotate/noise/mirror, applied in that order.

    The image resamples with nearest-neighbor lookup and edge
    replication; annotation points and boxes ride along through the same
    geometric maps. A point pushed out of the frame becomes None (its
    class keeps image-level presence but loses tile information); a box
    is clipped to the frame and becomes None if nothing remains.
    """
    _, h, w = sample.image.shape
    image = sample.image
    # Work on (cls, point, box-corner) tuples in float coordinates.
    work = [(inst.cls,
             (float(inst.point[0]), float(inst.point[1])) if inst.point else None,
             (float(inst.box.x_min), float(inst.box.y_min),
              float(inst.box.x_max), float(inst.box.y_max)) if inst.box else None)
            for inst in sample.instances]

    if config.translate:
        dx = round(rng.uniform(-config.max_translation_frac, config.max_translation_frac) * w)
        dy = round(rng.uniform(-config.max_translation_frac, config.max_translation_frac) * h)
        image, work = _translate(image, work, dx, dy)
    if config.rotate:
        theta = math.radians(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        image, work = _rotate(image, work, theta)
    if config.noise:
        image = np.clip(image + rng.normal(0.0, config.gaussian_noise_sigma, image.shape),
                        0.0, 1.0)
    if config.mirror and rng.uniform() < config.mirror_prob:
        image, work = _mirror(image, work)

    instances = []
    for cls, pt, bx in work:
        point = None
        if pt is not None:
            px, py = round(pt[0]), round(pt[1])
            if 0 <= px < w and 0 <= py < h:
                point = (px, py)
        box = None
        if bx is not None:
            x0 = max(0, math.floor(bx[0]))
            y0 = max(0, math.floor(bx[1]))
            x1 = min(w, math.ceil(bx[2]))
            y1 = min(h, math.ceil(bx[3]))
            if x0 < x1 and y0 < y1:
                box = Box(x0, y0, x1, y1)
        instances.append(Instance(cls=cls, box=box, point=point))
    return Sample(image_id=sample.image_id,
                  image=np.ascontiguousarray(image),
                  instances=tuple(instances))


def pyramid_label(sample: Sample, spec: PyramidSpec,
                  image_size: tuple[int, int]) -> NDArray[np.int64]:
    """Pyramid label bits for a (possibly augmented) sample.

    Level-1 presence comes from every instance's class; tile bits only
    from instances whose annotation point is still inside the frame.
    """
    bits = encode_image_labels(sample.present_classes, spec)
    points = [(inst.cls, inst.point[0], inst.point[1])
              for inst in sample.instances if inst.point is not None]
    if points:
        bits = bits | encode_point_labels(points, image_size, spec)
    return bits


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def batch_loss_and_grads(net: CamNetwork, images: NDArray[np.float64],
                         label_vectors, spec: PyramidSpec, loss_mode: str,
                         embedding: EmbeddingModel | None):
    """Mean loss over a batch and the summed parameter gradients.

    Samples whose label vector is all zeros have no target direction for
    the cosine loss and are excluded from the mean (the logistic baseline
    keeps them). Returns (loss, grads, included_count).
    """
    cam, caches = network_forward(net, images)
    n = images.shape[0]
    pooled = np.stack([spp_average_pool(cam[b], spec) for b in range(n)])

    values = []
    dpooled = np.zeros_like(pooled)
    active = []
    for b in range(n):
        label = np.asarray(label_vectors[b], dtype=np.float64)
        if loss_mode == "cosine_ppmi":
            if not np.any(label):
                continue
            out = embedded_cosine_loss(pooled[b], label, embedding)
        else:
            out = binary_logistic_loss(pooled[b], label)
        values.append(out.value)
        dpooled[b] = out.gradient
        active.append(b)

    if not active:
        return 0.0, [(np.zeros_like(p.kernel), np.zeros_like(p.bias))
                     for p in net.params], 0
    scale = 1.0 / len(active)
    dcam = np.zeros_like(cam)
    for b in active:
        dcam[b] = spp_average_pool_backward(dpooled[b] * scale, cam[b].shape, spec)
    grads = network_backward(net, dcam, caches)
    return float(np.mean(values)), grads, len(active)


def train(net: CamNetwork, samples: list[Sample], config: TrainingConfig,
          embedding: EmbeddingModel | None = None,
          aug: AugmentationConfig | None = None,
          log_path=None) -> list[float]:
    """SGD with momentum over random batches; returns the loss history.

    In cosine mode the embedding transform participates in every loss
    evaluation but is never written to. The optional log file receives
    one ``iter=<n> lr=<v> loss=<v>`` line per iteration.
    """
    if not samples:
        raise ValueError("training set is empty")
    spec = PyramidSpec(levels=config.levels, class_count=net.config.class_count)
    if config.loss_mode == "cosine_ppmi":
        if embedding is None:
            raise ValueError("cosine_ppmi mode requires an embedding model")
        if embedding.class_dim != spec.total_dim:
            raise ValueError(
                f"embedding dimension {embedding.class_dim} does not match "
                f"label dimension {spec.total_dim}")
    if aug is None:
        aug = AugmentationConfig()
    width, height = net.config.input_size

    rng = np.random.default_rng(config.seed)
    velocity = [(np.zeros_like(p.kernel), np.zeros_like(p.bias)) for p in net.params]
    history: list[float] = []
    log = open(log_path, "w", encoding="ascii") if log_path else None
    try:
        for it in range(config.iterations):
            lr = config.learning_rate(it)
            indices = rng.integers(0, len(samples), size=config.batch_size)
            batch = [augment(samples[i], aug, rng) for i in indices]
            images = np.stack([s.image for s in batch])
            labels = [pyramid_label(s, spec, (width, height)) for s in batch]

            loss, grads, _ = batch_loss_and_grads(
                net, images, labels, spec, config.loss_mode, embedding)
            for p, (vk, vb), (gk, gb) in zip(net.params, velocity, grads):
                vk *= config.momentum
                vk -= lr * gk
                p.kernel += vk
                vb *= config.momentum
                vb -= lr * gb
                p.bias += vb

            history.append(loss)
            if log:
                log.write(f"iter={it} lr={lr:.17g} loss={loss:.17g}\n")
    finally:
        if log:
            log.close()
    return history


# ---------------------------------------------------------------------------
# Checkpoints: versioned text, 17 significant digits (lossless round-trip)
# ---------------------------------------------------------------------------

def config_digest(*configs) -> str:
    """Short stable hash of one or more config dataclass reprs."""
    blob = "|".join(repr(c) for c in configs)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()[:16]


def save_checkpoint(net: CamNetwork, path, meta: dict | None = None) -> None:
    cfg = net.config
    lines = [
        "cam-net v1",
        f"width={cfg.input_size[0]}",
        f"height={cfg.input_size[1]}",
        f"in_channels={cfg.in_channels}",
        f"block_channels={','.join(str(c) for c in cfg.block_channels)}",
        f"head_channels={cfg.head_channels}",
        f"class_count={cfg.class_count}",
    ]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key}={value}")
    lines.append("params")
    for name, p in zip(net.param_names(), net.params):
        for label, arr in (("kernel", p.kernel), ("bias", p.bias)):
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name}.{label} {shape}")
            flat = arr.reshape(-1)
            # Wrap long value runs to keep lines editor-friendly.
            for start in range(0, flat.size, 64):
                lines.append(" ".join(f"{v:.17g}" for v in flat[start:start + 64]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[CamNetwork, dict]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "cam-net v1":
        raise ValueError(f"{path}: not a cam-net v1 checkpoint")
    header: dict[str, str] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i] != "params":
        key, _, value = lines[i].partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            header[key] = value
        i += 1
    if i == len(lines):
        raise ValueError(f"{path}: missing params section")
    try:
        config = NetworkConfig(
            input_size=(int(header["width"]), int(header["height"])),
            class_count=int(header["class_count"]),
            in_channels=int(header["in_channels"]),
            block_channels=tuple(int(c) for c in header["block_channels"].split(",")),
            head_channels=int(header["head_channels"]),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header: {exc}") from exc

    net = build_network(config, seed=0)
    tokens = iter(" ".join(lines[i + 1:]).split())
    try:
        for name, p in zip(net.param_names(), net.params):
            for label, target in (("kernel", p.kernel), ("bias", p.bias)):
                decl = f"{name}.{label}"
                if next(tokens) != decl:
                    raise ValueError(f"expected parameter {decl}")
                shape = tuple(int(d) for d in next(tokens).split(","))
                if shape != target.shape:
                    raise ValueError(f"{decl}: shape {shape} does not match {target.shape}")
                flat = np.array([float(next(tokens)) for _ in range(target.size)])
                target[...] = as_tensor(flat, checked=True).reshape(target.shape)
    except StopIteration:
        raise ValueError(f"{path}: truncated parameter data") from None
    return net, meta


def warm_start(net: CamNetwork, checkpoint_path) -> None:
    """Copy parameters from a compatible checkpoint into an existing net."""
    source, _ = load_checkpoint(checkpoint_path)
    if source.config != net.config:
        raise ValueError("warm-start checkpoint has an incompatible architecture")
    for dst, src in zip(net.params, source.params):
        dst.kernel[...] = src.kernel
        dst.bias[...] = src.bias
