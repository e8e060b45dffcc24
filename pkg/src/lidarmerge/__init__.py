"""Deterministic computational core for multi-dataset LiDAR segmentation.

Submodules follow the processing chain: ``geometry`` (camera projection and
point-pixel pairing), ``dataspace`` (offsets, voxel grids, decoupled
normalization, radial histograms), ``labelspace`` (unified classes and text
prompts), ``losses`` (alignment/segmentation kernels with gradients),
``panoptic`` (mean-shift instance extraction), ``metrics`` (mIoU, PQ family,
corruption robustness) and ``fileio`` (dataset and tensor file formats).
"""

from .geometry import (
    CameraModel,
    PointCloud,
    PointPixelPairs,
    Projection,
    gather_paired_features,
    pair_points_pixels,
    parse_calibration,
    project_points,
)
from .dataspace import (
    DatasetProfile,
    NormStats,
    VoxelGrid,
    apply_origin_offset,
    downsample_one_per_voxel,
    merge_norm_stats,
    normalize,
    range_class_histogram,
    update_norm_stats,
    voxelize,
)
from .labelspace import (
    LabelSpace,
    PromptRegistry,
    build_unified_space,
    dataset_negative_mask,
    load_label_space,
    prompts_for_class,
    remap_labels,
)
from .losses import (
    AffineLayer,
    LossResult,
    central_difference_gradient,
    cosine_alignment_loss,
    cross_entropy_loss,
    domain_fusion_forward,
    l1_offset_loss,
    label_alignment_loss,
    lovasz_softmax_loss,
    text_contrastive_loss,
    total_objective,
)
from .panoptic import (
    InstanceConfig,
    PanopticLabels,
    assemble_panoptic,
    filter_thing_points,
    mean_shift_cluster,
    shift_points,
)
from .metrics import (
    ConfusionMatrix,
    PanopticScores,
    PanopticStats,
    RobustnessScores,
    RobustnessTable,
    SemanticScores,
    accumulate_confusion,
    panoptic_match,
    panoptic_scores,
    robustness_scores,
    semantic_scores,
)
from .fileio import (
    ScanRecord,
    read_kitti_bin,
    read_kitti_label,
    read_nuscenes_bin,
    read_scan,
    read_tensor_file,
    write_kitti_bin,
    write_kitti_label,
    write_nuscenes_bin,
    write_tensor_file,
)
from .config import ToolConfig, default_label_space_path, load_tool_config
from . import errors

__version__ = "0.1.0"
