"""Automated single-photon emitter characterisation and its Monte Carlo ground truth."""
__version__ = "0.1.0"
