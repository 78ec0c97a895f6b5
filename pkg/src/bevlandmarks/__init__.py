"""Learned BEV landmarks for LiDAR global localization: a detector network whose
heatmap peaks and per-patch landmark correspondences feed a RANSAC pose solver."""

from .bev import AugmentParams, AugmentRanges, BevConfig, BevImage, CoordinateMap, augment, build_coordinate_map, project_bev, voxel_downsample
from .bundle import Bundle, BundleError, load_bundle, save_bundle
from .evaluation import EvalReport, EvalThresholds, evaluate
from .geometry import Pose2, Similarity2, angle_diff, compose, invert, local_to_global, wrap_angle
from .landmarks import LandmarkIndex, LandmarkInitConfig, LandmarkSet, grid_average_filter, init_landmarks, nearest_landmark
from .localizer import LocalizationResult, LocalizerConfig, detect_peaks, localize, ransac_pose
from .loss import LossConfig, total_loss
from .model import LandmarkNet, ModelConfig, param_count
from .trainer import TrainConfig, train

__version__ = "0.1.0"
