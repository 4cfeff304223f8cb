"""quadmotion: desk-scale generative modeling of articulated quadruped motion.

A skinned-skeleton geometry core, a spatio-temporal transformer VAE over bone
rotations, a two-phase training schedule, a procedural synthetic gait corpus,
and motion evaluation metrics.
"""

from .config import Config, default_config, load_config, save_config
from .errors import CheckpointError, DatasetError, ValidationError
from .metrics import (
    KeypointMap,
    MetricReport,
    acceleration_error,
    fit_linear_keypoint_map,
    mask_iou,
    motion_chamfer_distance,
    pck_at_threshold,
    velocity_error,
)
from .motionvae import (
    FrameFeatures,
    LatentDistribution,
    ModelConfig,
    MotionVAE,
    build_bone_descriptors,
    reparameterize,
)
from .objectives import (
    LossReport,
    LossWeights,
    full_objective,
    keypoint_recon_loss,
    kl_loss,
    teacher_loss,
    temporal_smoothness,
    video_objective,
)
from .skeleton import (
    Camera,
    MotionSequence,
    Pose,
    SkinnedMesh,
    Skeleton,
    axis_angle_to_matrix,
    forward_kinematics,
    keypoints2d,
    linear_blend_skinning,
    project,
    save_obj,
)
from .synthdata import (
    DataConfig,
    DatasetManifest,
    GaitParams,
    SequenceRecord,
    filter_low_motion_frames,
    filter_overlapping_masks,
    gait_params,
    generate_dataset,
    generate_gait_sequence,
    make_capsule_mesh,
    make_quadruped_skeleton,
    read_dataset,
    render_synthetic_features,
    smooth_bounding_boxes,
    write_dataset,
)
from .trainer import (
    PseudoGTStore,
    TrainConfig,
    generate_long_sequence,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train_phase1,
    train_phase2,
)
from .evaluation import EvalOptions, evaluate_model

__version__ = "0.1.0"
