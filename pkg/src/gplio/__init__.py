"""Continuous-time LiDAR-inertial trajectory estimation with sparse GP motion priors."""

__version__ = "0.1.0"
