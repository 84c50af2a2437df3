"""Distributed multi-agent formation control: simulation, MAPPO training and policy distillation."""

__version__ = "0.1.0"
