"""Shape-conditioned equivariant diffusion for small 3D molecules."""

from .geometry import Molecule, PointCloud, build_surface_point_cloud
from .metrics import connectivity, graph_similarity, infer_bonds, shape_similarity
from .predictor import Predictor, PredictorConfig
from .sampling import GuidanceConfig, generate, generate_batch
from .schedule import Schedule
from .shape_autoencoder import AutoencoderConfig, ShapeAutoencoder, fit_autoencoder
from .training import TrainConfig, train_diffusion

__version__ = "0.1.0"

__all__ = [
    "AutoencoderConfig",
    "GuidanceConfig",
    "Molecule",
    "PointCloud",
    "Predictor",
    "PredictorConfig",
    "Schedule",
    "ShapeAutoencoder",
    "TrainConfig",
    "build_surface_point_cloud",
    "connectivity",
    "fit_autoencoder",
    "generate",
    "generate_batch",
    "graph_similarity",
    "infer_bonds",
    "shape_similarity",
    "train_diffusion",
]
