"""Adiabatic and superadiabatic reductions for thin-fibre Schrödinger operators."""

from __future__ import annotations

__version__ = "0.1.0"

from .adiabatic import assemble_adiabatic, berry_data, project_h1
from .fibre import FibreBasis, check_gap, solve_band
from .geometry import BaseCircle, build_strip_model, build_warped_model
from .reference import assemble_full, lowest_eigenpairs
from .superadiabatic import build_projection_set, correction_m

__all__ = [
    "BaseCircle",
    "FibreBasis",
    "assemble_adiabatic",
    "assemble_full",
    "berry_data",
    "build_projection_set",
    "build_strip_model",
    "build_warped_model",
    "check_gap",
    "correction_m",
    "lowest_eigenpairs",
    "project_h1",
    "solve_band",
]
