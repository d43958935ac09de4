"""Hartree-Fock scattering: propagation, high-velocity probes and inverse problems."""

from .spectral import (ComplexField, GridSpec, S0State, fourier, free_propagate, inner,
                       inverse_fourier, l2_norm, make_grid, s0_state)
from .potentials import PotentialModel, gaussian, validate_assumptions, zero_potential
from .dynamics import (OrbitalSet, StepperConfig, fock_term, hartree_term,
                       pseudo_conformal_diagnostic, rhs_P, step)
from .scattering import ScatterConfig, ScatterOutput, apply_S, born_N, solve_scattering_solution
from .probe import ProbeConfig, ProbeResult, compute_I, expansion_check, kernel_H, make_probe
from .interaction import PicardReconstructor, assemble_T, picard_reconstruct, singular_system
from .external import RieszSpec, Sinogram, XRayInverter, invert_xray, xray_adjoint

__version__ = "0.1.0"

__all__ = [
    "ComplexField", "GridSpec", "S0State", "fourier", "free_propagate", "inner",
    "inverse_fourier", "l2_norm", "make_grid", "s0_state",
    "PotentialModel", "gaussian", "validate_assumptions", "zero_potential",
    "OrbitalSet", "StepperConfig", "fock_term", "hartree_term", "pseudo_conformal_diagnostic",
    "rhs_P", "step",
    "ScatterConfig", "ScatterOutput", "apply_S", "born_N", "solve_scattering_solution",
    "ProbeConfig", "ProbeResult", "compute_I", "expansion_check", "kernel_H", "make_probe",
    "PicardReconstructor", "assemble_T", "picard_reconstruct", "singular_system",
    "RieszSpec", "Sinogram", "XRayInverter", "invert_xray", "xray_adjoint",
]
