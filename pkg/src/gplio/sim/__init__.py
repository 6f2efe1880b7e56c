"""Synthetic scenarios: ground truth, plane worlds, sensor sampling and faults."""
