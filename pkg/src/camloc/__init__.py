"""Weakly supervised object localization from class activation maps.

A small fully convolutional network learns one activation map per class
from image-level or point-wise labels. Labels are encoded over a spatial
pyramid of tiles, embedded with a factorization of the positive
pointwise mutual information between label co-occurrences, and the
network is trained by cosine similarity against the embedded labels.
Localization is read directly off the maps: the argmax cell for point
predictions, the largest above-threshold region for boxes.
"""

from .dataset import (
    CLASS_NAMES,
    DatasetConfig,
    Instance,
    Sample,
    bias_preset,
    generate_dataset,
    generate_samples,
    load_dataset,
)
from .detection import (
    Box,
    PointPrediction,
    cam_probabilities,
    default_point_tolerance,
    iou,
    point_hit,
    predict_box,
    predict_point,
)
from .embedding import (
    CooccurrenceTable,
    EmbeddingModel,
    PmiMatrix,
    backproject,
    compute_pmi,
    compute_ppmi,
    count_cooccurrences,
    fit_embedding,
    fit_from_labels,
    load_embedding,
    project,
    save_embedding,
)
from .losses import LossOutput, binary_logistic_loss, cosine_loss, embedded_cosine_loss
from .metrics import (
    ClassificationReport,
    CorlocReport,
    PointLocReport,
    average_precision,
    classification_map,
    corloc,
    pointloc_map,
)
from .network import (
    AugmentationConfig,
    CamNetwork,
    NetworkConfig,
    TrainingConfig,
    augment,
    build_network,
    forward_cam,
    load_checkpoint,
    reference_training_preset,
    pyramid_label,
    save_checkpoint,
    train,
)
from .pyramid import (
    PyramidSpec,
    encode_image_labels,
    encode_point_labels,
    spp_average_pool,
    spp_average_pool_backward,
    tile_of_point,
    tile_pixel_bounds,
)

__version__ = "0.1.0"
