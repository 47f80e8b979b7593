"""Bounded chroma perturbations that disrupt image-to-image generators.

Perturbations live on the Lab a/b channels so luminance is untouched.
Surrogate generators, baselines (PGD, C&W), input transformations,
metrics and an experiment harness are included.
"""

__version__ = "0.1.0"

from .attacks import (  # noqa: E402
    AttackConfig,
    AttackTrace,
    Perturbation,
    antiforge_attack,
    colorspace_attack,
    cw_attack,
    eot_wrap,
    pgd_attack,
)
from .colorspace import ColorSpaceTag, LabImage, RGBImage, lab_to_rgb, rgb_to_lab  # noqa: E402
from .surrogate import ConvNetGenerator, IdentityGenerator, ToyGenerator, ToyGeneratorParams  # noqa: E402

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "ColorSpaceTag",
    "ConvNetGenerator",
    "IdentityGenerator",
    "LabImage",
    "Perturbation",
    "RGBImage",
    "ToyGenerator",
    "ToyGeneratorParams",
    "antiforge_attack",
    "colorspace_attack",
    "cw_attack",
    "eot_wrap",
    "lab_to_rgb",
    "pgd_attack",
    "rgb_to_lab",
]
