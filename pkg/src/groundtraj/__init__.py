"""Trajectory-grounded text-to-video toolkit at desk scale.

Local text is bound to the latent cells a trajectory passes through, and a
location-aware cross-attention branch is blended with ordinary caption
cross-attention inside a small diffusion transformer.
"""

from .attention import AttentionWeights, BlendConfig, blend, cross_attention, grad_check, laca
from .annotation import DatasetRecord, annotate_scene, point_nms, representative_points
from .dit import ConditionBundle, DiT, LocalCondition, ModelConfig, patchify, unpatchify
from .grounding import AssignmentField, GroundingParams, build_assignment, gaussian_weight
from .guidance import GuidanceSpec, SamplerConfig, Scheme, combined_cfg, dual_cfg, sample, single_cfg
from .metrics import epe, gsb, local_alignment, local_windows
from .trajectory import LocalText, Trajectory, VideoDims, to_latent, validate_trajectory

__version__ = "0.1.0"

__all__ = [
    "AssignmentField", "AttentionWeights", "BlendConfig", "ConditionBundle", "DatasetRecord", "DiT",
    "GroundingParams", "GuidanceSpec", "LocalCondition", "LocalText", "ModelConfig",
    "SamplerConfig", "Scheme", "Trajectory", "VideoDims", "annotate_scene", "blend",
    "build_assignment", "combined_cfg", "cross_attention", "dual_cfg", "epe", "gaussian_weight",
    "grad_check", "gsb", "laca", "local_alignment", "local_windows", "patchify", "point_nms",
    "representative_points", "sample", "single_cfg", "to_latent", "unpatchify",
    "validate_trajectory",
]
