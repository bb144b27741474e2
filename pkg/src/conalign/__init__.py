"""Alignment of continuous structural-connectivity densities on Omega x Omega.

Omega is the unit interval, the unit sphere or a pair of spheres (one per
hemisphere).  Densities are compared through their square-root transform,
warped by diffeomorphisms of Omega and averaged into templates.
"""
from .errors import DiffeomorphismError, DomainError, ResourceError, ValidationError
from .density import DensityField, DomainSpec, HalfDensity, SphereWarp, Warp1D, q_map, q_unmap
from .register import RegistrationConfig, RegistrationResult, register_pair
from .template import TemplateConfig, TemplateResult, full_pipeline

__version__ = "0.1.0"

__all__ = [
    "DensityField", "DiffeomorphismError", "DomainError", "DomainSpec", "HalfDensity",
    "RegistrationConfig", "RegistrationResult", "ResourceError", "SphereWarp",
    "TemplateConfig", "TemplateResult", "ValidationError", "Warp1D",
    "full_pipeline", "q_map", "q_unmap", "register_pair",
]
