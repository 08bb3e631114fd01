"""CT-to-PET synthesis: volumes, data prep, networks, training, and evaluation."""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    CT_WINDOW,
    MALIGNANCY_SUV,
    SUV_WINDOW,
    AffineTransform,
    Modality,
    Volume3D,
    Window,
    build_alignment_transform,
    compute_suv,
    denormalize,
    load_volume,
    resample_linear,
    save_volume,
    window_and_normalize,
)
