"""Mesoscopic platoon control: simulation, certificates and string-stability analysis."""

__version__ = "1.0.0"
