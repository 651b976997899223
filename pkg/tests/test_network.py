import math
import re

import numpy as np
import pytest

from camloc.dataset import Instance, Sample
from camloc.detection import Box
from camloc.embedding import fit_from_labels
from camloc.network import (
    AugmentationConfig,
    NetworkConfig,
    TrainingConfig,
    augment,
    batch_loss_and_grads,
    build_network,
    forward_cam,
    load_checkpoint,
    network_forward,
    reference_training_preset,
    pyramid_label,
    save_checkpoint,
    train,
    warm_start,
)
from camloc.network import _mirror, _rotate, _translate, config_digest
from camloc.pyramid import PyramidSpec

MINI = NetworkConfig(input_size=(8, 8), class_count=2, block_channels=(3,),
                     head_channels=4)


def _mini_samples(n=6, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        cls = i % 2
        x, y = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        samples.append(Sample(
            image_id=f"img_{i:04d}",
            image=rng.uniform(0, 1, (3, 8, 8)),
            instances=(Instance(cls=cls, box=Box(max(0, x - 1), max(0, y - 1),
                                                 min(8, x + 1), min(8, y + 1)),
                                point=(x, y)),),
        ))
    return samples


def _mini_embedding(levels=(1,)):
    spec = PyramidSpec(levels=levels, class_count=2)
    labels = np.zeros((6, spec.total_dim), dtype=np.int64)
    labels[:, 0] = [1, 1, 1, 0, 1, 0]
    labels[:, spec.total_dim // 2 if len(levels) > 1 else 1] = [0, 1, 1, 1, 0, 1]
    return fit_from_labels(labels)


# ---------------------------------------------------------------------------
# Configuration and construction
# ---------------------------------------------------------------------------

def test_cam_size_halves_per_block():
    assert NetworkConfig().cam_size == (8, 8)
    assert MINI.cam_size == (4, 4)


def test_training_config_validation():
    with pytest.raises(ValueError, match="loss_mode"):
        TrainingConfig(loss_mode="hinge")
    with pytest.raises(ValueError, match="warmup"):
        TrainingConfig(iterations=10, warmup_iters=11)
    with pytest.raises(ValueError, match="positive"):
        TrainingConfig(lr_main=0.0)


def test_learning_rate_switches_after_warmup():
    cfg = TrainingConfig(iterations=10, warmup_iters=3)
    assert cfg.learning_rate(2) == cfg.lr_initial
    assert cfg.learning_rate(3) == cfg.lr_main


def test_reference_preset_values():
    cfg = reference_training_preset()
    assert (cfg.batch_size, cfg.iterations, cfg.warmup_iters) == (256, 2000, 600)
    assert (cfg.lr_initial, cfg.lr_main, cfg.momentum) == (0.0001, 0.001, 0.9)


def test_build_network_deterministic_per_seed():
    a = build_network(MINI, seed=7)
    b = build_network(MINI, seed=7)
    c = build_network(MINI, seed=8)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.kernel, pb.kernel)
        assert np.array_equal(pa.bias, pb.bias)
    assert not np.array_equal(a.params[0].kernel, c.params[0].kernel)


def test_build_network_layer_shapes():
    net = build_network(NetworkConfig(), seed=0)
    shapes = [p.kernel.shape for p in net.params]
    assert shapes == [(16, 3, 3, 3), (16, 16, 3, 3),
                      (32, 16, 3, 3), (32, 32, 3, 3),
                      (64, 32, 3, 3), (64, 64, 3, 3),
                      (64, 64, 3, 3), (4, 64, 1, 1)]
    assert all(np.all(p.bias == 0.0) for p in net.params)
    assert net.param_names() == ["block0.conv0", "block0.conv1",
                                 "block1.conv0", "block1.conv1",
                                 "block2.conv0", "block2.conv1",
                                 "head.conv3x3", "head.conv1x1"]


def test_build_network_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible"):
        build_network(NetworkConfig(input_size=(50, 64)), seed=0)


def test_forward_shapes_and_input_validation():
    net = build_network(MINI, seed=0)
    cam, _ = network_forward(net, np.zeros((5, 3, 8, 8)))
    assert cam.shape == (5, 2, 4, 4)
    with pytest.raises(ValueError, match="expected input"):
        network_forward(net, np.zeros((5, 3, 8, 9)))
    single = forward_cam(net, np.zeros((3, 8, 8)))
    assert np.array_equal(single, cam[0])


def test_forward_cam_rejects_non_finite():
    net = build_network(MINI, seed=0)
    image = np.zeros((3, 8, 8))
    image[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        forward_cam(net, image)


# ---------------------------------------------------------------------------
# Composed gradients through the full stack
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("loss_mode", ["cosine_ppmi", "binary_logistic"])
def test_composed_loss_gradcheck(loss_mode):
    rng = np.random.default_rng(3)
    net = build_network(MINI, seed=3)
    images = rng.uniform(0, 1, (2, 3, 8, 8))
    spec = PyramidSpec(levels=(1,), class_count=2)
    labels = np.array([[1, 0], [1, 1]])
    emb = _mini_embedding() if loss_mode == "cosine_ppmi" else None

    h = 1e-6
    worst = 0.0
    for pi, p in enumerate(net.params):
        _, grads, _ = batch_loss_and_grads(net, images, labels, spec, loss_mode, emb)
        flat_k = p.kernel.reshape(-1)
        flat_g = grads[pi][0].reshape(-1)
        for idx in rng.choice(flat_k.size, size=4, replace=False):
            orig = flat_k[idx]
            flat_k[idx] = orig + h
            up = batch_loss_and_grads(net, images, labels, spec, loss_mode, emb)[0]
            flat_k[idx] = orig - h
            down = batch_loss_and_grads(net, images, labels, spec, loss_mode, emb)[0]
            flat_k[idx] = orig
            numeric = (up - down) / (2 * h)
            err = abs(flat_g[idx] - numeric) / max(1e-8, abs(flat_g[idx]) + abs(numeric))
            worst = max(worst, err)
    assert worst < 1e-3


def test_all_background_batch_yields_zero_gradients():
    # cosine mode skips samples with empty labels; an all-empty batch is a no-op
    net = build_network(MINI, seed=0)
    spec = PyramidSpec(levels=(1,), class_count=2)
    loss, grads, n = batch_loss_and_grads(
        net, np.zeros((2, 3, 8, 8)), np.zeros((2, 2), dtype=int), spec,
        "cosine_ppmi", _mini_embedding())
    assert (loss, n) == (0.0, 0)
    assert all(np.all(gk == 0) and np.all(gb == 0) for gk, gb in grads)


def test_partial_background_batch_counts_active_only():
    net = build_network(MINI, seed=0)
    spec = PyramidSpec(levels=(1,), class_count=2)
    labels = np.array([[0, 0], [1, 0], [0, 1]])
    images = np.random.default_rng(0).uniform(0, 1, (3, 3, 8, 8))
    _, _, n = batch_loss_and_grads(net, images, labels, spec,
                                   "cosine_ppmi", _mini_embedding())
    assert n == 2
    _, _, n = batch_loss_and_grads(net, images, labels, spec,
                                   "binary_logistic", None)
    assert n == 3


# ---------------------------------------------------------------------------
# Augmentation geometry
# ---------------------------------------------------------------------------

def test_translate_moves_pixels_and_annotations():
    image = np.zeros((1, 5, 5))
    image[0, 2, 1] = 1.0  # (x=1, y=2)
    out, moved = _translate(image, [(0, (1.0, 2.0), (1.0, 2.0, 2.0, 3.0))], dx=2, dy=-1)
    assert out[0, 1, 3] == 1.0
    assert moved == [(0, (3.0, 1.0), (3.0, 1.0, 4.0, 2.0))]


def test_translate_replicates_edges():
    image = np.arange(9, dtype=float).reshape(1, 3, 3)
    out, _ = _translate(image, [], dx=1, dy=0)
    assert out[0].tolist() == [[0, 0, 1], [3, 3, 4], [6, 6, 7]]


def test_mirror_flips_image_and_annotations():
    image = np.zeros((1, 3, 4))
    image[0, 0, 0] = 1.0
    out, moved = _mirror(image, [(1, (0.0, 0.0), (0.0, 0.0, 2.0, 1.0))])
    assert out[0, 0, 3] == 1.0
    # point x -> w-1-x, box (x0, x1) -> (w-x1, w-x0)
    assert moved == [(1, (3.0, 0.0), (2.0, 0.0, 4.0, 1.0))]


def test_rotate_quarter_turn_fixture():
    # 90 degrees about the center of a 5x5 frame: (x, y) -> (cx-(y-cy), cy+(x-cx))
    image = np.zeros((1, 5, 5))
    image[0, 2, 3] = 1.0  # (x=3, y=2)
    out, moved = _rotate(image, [(0, (3.0, 2.0), None)], theta=math.pi / 2)
    px, py = moved[0][1]
    assert (round(px), round(py)) == (2, 3)
    assert out[0, 3, 2] == 1.0


def test_rotate_box_uses_corner_hull():
    _, moved = _rotate(np.zeros((1, 5, 5)), [(0, None, (1.0, 1.0, 3.0, 3.0))],
                       theta=math.pi / 2)
    x0, y0, x1, y1 = moved[0][2]
    assert (round(x0), round(y0), round(x1), round(y1)) == (1, 1, 3, 3)


def test_augment_disabled_is_identity():
    sample = _mini_samples()[0]
    out = augment(sample, AugmentationConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(out.image, sample.image)
    assert out.instances == sample.instances


def test_augment_preserves_shape_range_and_classes():
    rng = np.random.default_rng(5)
    for sample in _mini_samples(8, seed=2):
        out = augment(sample, AugmentationConfig(), rng)
        assert out.image.shape == sample.image.shape
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert [i.cls for i in out.instances] == [i.cls for i in sample.instances]
        for inst in out.instances:
            if inst.point is not None:
                assert 0 <= inst.point[0] < 8 and 0 <= inst.point[1] < 8
            if inst.box is not None:
                assert 0 <= inst.box.x_min < inst.box.x_max <= 8
                assert 0 <= inst.box.y_min < inst.box.y_max <= 8


def test_augment_drops_out_of_frame_point_keeps_presence():
    # a huge translation pushes the annotation out of the frame
    sample = Sample(image_id="x", image=np.zeros((3, 8, 8)),
                    instances=(Instance(cls=1, box=Box(0, 0, 2, 2), point=(1, 1)),))
    cfg = AugmentationConfig(max_translation_frac=4.0, rotate=False,
                             noise=False, mirror=False)
    rng = np.random.default_rng(1)
    for _ in range(50):
        out = augment(sample, cfg, rng)
        if out.instances[0].point is None:
            assert out.present_classes == [1]
            spec = PyramidSpec(levels=(1, 2), class_count=2)
            bits = pyramid_label(out, spec, (8, 8))
            assert bits[1] == 1 and bits[2:].sum() == 0
            return
    raise AssertionError("translation never pushed the point out of frame")


def test_pyramid_label_merges_presence_and_points():
    spec = PyramidSpec(levels=(1, 2), class_count=2)
    sample = Sample(image_id="x", image=np.zeros((3, 8, 8)), instances=(
        Instance(cls=0, box=None, point=(1, 1)),      # tile (0,0)
        Instance(cls=1, box=None, point=None),        # presence only
    ))
    bits = pyramid_label(sample, spec, (8, 8))
    assert bits[:2].tolist() == [1, 1]
    assert bits[2:].tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_train_updates_params_and_logs(tmp_path):
    net = build_network(MINI, seed=0)
    before = [p.kernel.copy() for p in net.params]
    cfg = TrainingConfig(batch_size=2, iterations=5, warmup_iters=2, seed=0,
                         loss_mode="cosine_ppmi", levels=(1,))
    log = tmp_path / "train.log"
    history = train(net, _mini_samples(), cfg, embedding=_mini_embedding(),
                    log_path=log)
    assert len(history) == 5
    assert all(math.isfinite(v) for v in history)
    assert any(not np.array_equal(b, p.kernel) for b, p in zip(before, net.params))
    lines = log.read_text().splitlines()
    assert len(lines) == 5
    assert re.fullmatch(r"iter=0 lr=0\.0001 loss=[0-9.+-e]+", lines[0])


def test_train_is_deterministic():
    runs = []
    for _ in range(2):
        net = build_network(MINI, seed=1)
        cfg = TrainingConfig(batch_size=2, iterations=4, warmup_iters=1, seed=3,
                             loss_mode="binary_logistic", levels=(1,))
        history = train(net, _mini_samples(), cfg)
        runs.append((history, [p.kernel.copy() for p in net.params]))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


def test_train_requires_embedding_for_cosine():
    net = build_network(MINI, seed=0)
    cfg = TrainingConfig(batch_size=2, iterations=1, warmup_iters=0,
                         loss_mode="cosine_ppmi", levels=(1,))
    with pytest.raises(ValueError, match="embedding"):
        train(net, _mini_samples(), cfg)


def test_train_rejects_embedding_dimension_mismatch():
    net = build_network(MINI, seed=0)
    cfg = TrainingConfig(batch_size=2, iterations=1, warmup_iters=0,
                         loss_mode="cosine_ppmi", levels=(1, 2))
    with pytest.raises(ValueError, match="dimension"):
        train(net, _mini_samples(), cfg, embedding=_mini_embedding(levels=(1,)))


def test_train_rejects_empty_sample_list():
    net = build_network(MINI, seed=0)
    with pytest.raises(ValueError, match="empty"):
        train(net, [], TrainingConfig(batch_size=1, iterations=1, warmup_iters=0))


# ---------------------------------------------------------------------------
# Checkpoints and warm starts
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_exact(tmp_path):
    net = build_network(MINI, seed=4)
    net.params[0].bias[:] = np.pi  # non-trivial bias bytes
    path = tmp_path / "ckpt.txt"
    save_checkpoint(net, path, meta={"seed": "4", "loss": "cosine-ppmi"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": "4", "loss": "cosine-ppmi"}
    assert loaded.config == net.config
    for a, b in zip(loaded.params, net.params):
        assert np.array_equal(a.kernel, b.kernel)
        assert np.array_equal(a.bias, b.bias)


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    net = build_network(MINI, seed=4)
    save_checkpoint(net, tmp_path / "a.txt")
    save_checkpoint(net, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_checkpoint_rejects_tampering(tmp_path):
    net = build_network(MINI, seed=4)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(net, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop the last value row
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_warm_start_copies_params(tmp_path):
    src = build_network(MINI, seed=5)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(src, path)
    dst = build_network(MINI, seed=9)
    warm_start(dst, path)
    for a, b in zip(dst.params, src.params):
        assert np.array_equal(a.kernel, b.kernel)


def test_warm_start_rejects_architecture_mismatch(tmp_path):
    src = build_network(MINI, seed=5)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(src, path)
    other = build_network(NetworkConfig(input_size=(8, 8), class_count=2,
                                        block_channels=(4,), head_channels=4), seed=0)
    with pytest.raises(ValueError):
        warm_start(other, path)


def test_config_digest_tracks_config_identity():
    a = config_digest(MINI, TrainingConfig())
    b = config_digest(MINI, TrainingConfig())
    c = config_digest(MINI, TrainingConfig(seed=1))
    assert a == b and a != c and len(a) == 16
