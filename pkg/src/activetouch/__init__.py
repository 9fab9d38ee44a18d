"""Active tactile perception: particle-filter recognition, GPIS reconstruction, guided probing."""

from .geometry import OrientedPoint, Pose, TriangleMesh, directed_hausdorff, two_way_hausdorff
from .harness import TrialConfig, TrialResult, promote_learned_prior, run_experiment, run_trial
from .measurement import NoiseParams, Observation
from .objects import Library, desk_library, load_library
from .particle_filter import ParticleFilter, PfConfig
from .sdf import ObjectModel

__all__ = [
    "Library", "NoiseParams", "ObjectModel", "Observation", "OrientedPoint", "ParticleFilter", "PfConfig", "Pose",
    "TrialConfig", "TrialResult", "TriangleMesh", "desk_library", "directed_hausdorff", "load_library",
    "promote_learned_prior", "run_experiment", "run_trial", "two_way_hausdorff",
]
__version__ = "0.1.0"
