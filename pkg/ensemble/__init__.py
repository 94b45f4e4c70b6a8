"""Ensemble orchestration, Monte Carlo checks and experiment I/O."""
