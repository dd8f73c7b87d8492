"""Training-free multi-reference sketch style synthesis for diffusion backbones."""
from .attention import (
    AttentionFeatures,
    FeatureCache,
    InjectionConfig,
    InjectionMode,
    injected_attention,
    select_layers,
    smooth_features,
    standard_attention,
)
from .backends import Conditioning, DenoiserBackend, LayerDescriptor, null_conditioning, toy_backend
from .guidance import GuidanceConfig, Ramp, combine, omega2_at
from .modulation import StyleBlendConfig, adain, joint_adain
from .pipeline import RunConfig, SynthesisResult, brighten, sweep, synthesize, vanilla_cfg_sample
from .references import ReferenceBundle, build_feature_cache, invert_reference
from .regulation import RegulationConfig, edge_loss, regulate, sobel_gradients
from .scheduler import (
    CLEAN,
    LatentState,
    NoiseSchedule,
    Role,
    TimestepGrid,
    add_noise,
    build_schedule,
    ddim_invert_step,
    ddim_step,
    timestep_grid,
    tweedie_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "adain",
    "add_noise",
    "AttentionFeatures",
    "brighten",
    "build_feature_cache",
    "build_schedule",
    "CLEAN",
    "combine",
    "Conditioning",
    "ddim_invert_step",
    "ddim_step",
    "DenoiserBackend",
    "edge_loss",
    "FeatureCache",
    "GuidanceConfig",
    "injected_attention",
    "InjectionConfig",
    "InjectionMode",
    "invert_reference",
    "joint_adain",
    "LatentState",
    "LayerDescriptor",
    "NoiseSchedule",
    "null_conditioning",
    "omega2_at",
    "Ramp",
    "ReferenceBundle",
    "regulate",
    "RegulationConfig",
    "Role",
    "RunConfig",
    "select_layers",
    "smooth_features",
    "sobel_gradients",
    "standard_attention",
    "StyleBlendConfig",
    "sweep",
    "SynthesisResult",
    "synthesize",
    "timestep_grid",
    "TimestepGrid",
    "toy_backend",
    "tweedie_estimate",
    "vanilla_cfg_sample",
]
