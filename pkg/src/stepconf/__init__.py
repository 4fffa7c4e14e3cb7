"""Step-wise conformal labeling and probing for agent trajectories."""

__version__ = "0.1.0"
