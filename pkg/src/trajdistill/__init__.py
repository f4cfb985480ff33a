"""Dataset distillation by matching smooth expert training trajectories."""

__version__ = "0.1.0"
