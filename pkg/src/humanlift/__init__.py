"""humanlift: single-image human photo to textured 3D asset.

The pipeline runs in three stages: a coarse radiance-field optimization
driven by view-conditioned diffusion guidance, a texture-consistent
back-view synthesis, and a mesh-based refinement of geometry and texture.
"""

__version__ = "0.1.0"

from .scene import (
    Camera,
    ImageBundle,
    ViewSampler,
    generate_rays,
    preprocess_reference,
    sample_training_view,
)

__all__ = [
    "Camera",
    "ImageBundle",
    "ViewSampler",
    "generate_rays",
    "preprocess_reference",
    "sample_training_view",
    "__version__",
]
