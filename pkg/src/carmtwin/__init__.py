"""carmtwin: desk-scale digital twin for a language-promptable robotic C-arm.

Simulated X-ray acquisition over a labeled phantom, promptable segmentation
(oracle or external service), sparse 3D reconstruction of prompted anatomy,
and a command-protocol-driven controller with an HTTP API.
"""

from .geometry import (
    Box3,
    CArmState,
    CameraPose,
    IntrinsicMatrix,
    ProjectionMatrix,
    make_intrinsics,
    pose_from_carm,
    project,
    projection_from_carm,
    viewing_angle,
)
from .phantom import (
    LabeledVolume,
    PromptVocabulary,
    build_synthetic_phantom,
    default_torso_phantom,
    default_vocabulary,
    gt_centroid_bbox,
    load_phantom_spec,
    load_volume,
    resolve_prompt,
    save_volume,
    structure_mask,
)
from .xray import CollimationBox, XRayImage, project_collimation, project_gt_mask, render_drr
from .segmentation import (
    CorruptionConfig,
    ExternalSegmenter,
    OracleSegmenter,
    SegmentationHeatmap,
    segment_external,
    segment_oracle,
)
from .twin import (
    ImageHistory,
    ReconstructionResult,
    TwinState,
    ViewSelection,
    reconstruct,
    select_views,
    single_image_fallback,
    update_twin,
)
from .protocol import (
    Action,
    ActionKind,
    InterpreterContext,
    interpret,
    parse_action,
    serialize_action,
)
from .controller import (
    SessionConfig,
    SessionState,
    cancel,
    confirm,
    execute,
    run_session_script,
)

__version__ = "0.1.0"
