"""Per-trajectory numerics: grid, noise, integrators, functionals, coupling."""
