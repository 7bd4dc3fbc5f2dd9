"""Discrete-event simulator for solar/battery air-quality datalogger fleets."""

__version__ = "0.1.0"

from .simcore import Event, RandomStream, SimTime, Simulator  # noqa: F401
