"""Photon counting statistics of pulsed resonance fluorescence.

Submodules
----------
model
    operators, pulse envelopes, Hamiltonians and Liouvillians
engine
    moment equations and the time propagation behind every observable
correlators
    integrated and two-time photon correlators, spectra, filtered g2
counting
    photon-number and time-bin probabilities from intensity moments
trajectories
    quantum-jump simulation used as an independent check
cli
    scenario runner writing CSV tables and a run manifest
"""

from .model import JointModel, PulseEnvelope, make_model

__version__ = "0.1.0"

__all__ = ["JointModel", "PulseEnvelope", "make_model", "__version__"]
