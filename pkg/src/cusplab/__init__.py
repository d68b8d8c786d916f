"""Numerical laboratory for scattering maps of compactly perturbed
time-dependent Schrodinger operators: classical bicharacteristic scattering,
the quantum scattering map on asymptotic data, and the property suite tying
the two together."""

from . import errors, flow, phasespace, quantum, shell, symbols, verify

__all__ = ["errors", "flow", "phasespace", "quantum", "symbols", "verify", "shell"]

__version__ = "0.1.0"
