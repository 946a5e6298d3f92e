"""Voxel-statistics nodule generation and CT fusion augmentation for pulmonary nodule datasets."""

from .embedding import (
    EmbeddedPatch,
    EmbeddingTable,
    NoiseSpec,
    ToyClassifier,
    add_noise,
    embed_backward,
    embed_forward,
    train_toy,
)
from .evaluation import (
    ConfusionMatrix,
    DatasetManifest,
    ManifestEntry,
    MetricReport,
    RocCurve,
    assemble_dataset,
    compute_metrics,
    detection_accuracy,
    roc_curve,
    run_augmentation_experiment,
)
from .fusion import FusionResult, fuse, propose_sites
from .nodule_model import (
    AlignedCube,
    GeneratedNodule,
    NoduleStatsModel,
    align_cube,
    build_model,
    load_model,
    sample_nodule,
    save_model,
    segment_foreground,
)
from .preprocess import ResampleSpec, WindowSpec, extract_patch, resample, window_normalize
from .volume_io import (
    Annotation,
    Volume,
    make_mask,
    read_annotations,
    read_volume,
    voxel_to_world,
    world_to_voxel,
    write_volume,
)

__version__ = "0.1.0"
