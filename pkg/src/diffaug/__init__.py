"""Graph structure augmentation via a pre-trained binary diffusion model."""

from .graphs import Graph, GraphCorpus, EgoSubgraph, Partition
from .schedule import NoiseSchedule, build_schedule
from .diffusion import DiffusionState
from .denoiser import Checkpoint, Denoiser, DenoiserConfig, HiddenStates
from .guidance import GuidanceConfig, GuidanceHead, HeadSpec
from .clustering import ClusterModel

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphCorpus",
    "EgoSubgraph",
    "Partition",
    "NoiseSchedule",
    "build_schedule",
    "DiffusionState",
    "Checkpoint",
    "Denoiser",
    "DenoiserConfig",
    "HiddenStates",
    "GuidanceConfig",
    "GuidanceHead",
    "HeadSpec",
    "ClusterModel",
    "__version__",
]
