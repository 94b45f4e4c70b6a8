"""Grid, noise, error and snapshot helpers."""
