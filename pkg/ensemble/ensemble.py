"""
Parallel ensemble execution.

Paths are cut into fixed-size batches of indices; batches are shipped to
joblib workers and their results come back in batch order. The batch
layout never depends on the worker count, so every reduction is
bit-identical whatever the parallelism.
"""
import logging
import time
from typing import Callable, List, Sequence

import numpy as np
from joblib import Parallel, delayed

from trajectory.dynamics import SimulationSetup
from trajectory.utils.grid_space import Field, norm_sq
from trajectory.utils.noise import StreamRole

logger = logging.getLogger(__name__)


class EnsembleRunner:
    """
    Dispatch batch tasks over joblib workers.

    Args:
        workers: number of worker processes (1 runs in-process)
        batch_size: paths per batch
    """

    def __init__(self, workers: int = 1, batch_size: int = 50):
        self.workers = max(1, int(workers))
        self.batch_size = max(1, int(batch_size))

    def batches(self, n_paths: int) -> List[range]:
        return [range(start, min(start + self.batch_size, n_paths))
                for start in range(0, n_paths, self.batch_size)]

    def map(self, task: Callable[[Sequence[int]], object], n_paths: int) -> list:
        """
        Run `task(indices)` for every batch.

        Args:
            task: picklable callable taking a range of path indices
            n_paths: ensemble size

        Returns:
            Batch results in batch order
        """
        batches = self.batches(n_paths)
        started = time.time()
        logger.info(f"🔄 {n_paths} paths in {len(batches)} batches on {self.workers} worker(s)")
        if self.workers == 1:
            results = [task(batch) for batch in batches]
        else:
            results = Parallel(n_jobs=self.workers)(delayed(task)(batch) for batch in batches)
        logger.info(f"✅ ensemble finished in {time.time() - started:.1f}s")
        return results


def mean_and_se(values: np.ndarray, axis: int = -1):
    """Sample mean and its standard error along `axis`."""
    values = np.asarray(values)
    n = values.shape[axis]
    mean = np.mean(values, axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean, dtype=float)
    se = np.std(values, axis=axis, ddof=1) / np.sqrt(n)
    return mean, se


def sample_observable(setup: SimulationSetup, u0: Field, n_steps: int, every: int,
                      observable: Callable[[np.ndarray], np.ndarray], role: StreamRole,
                      indices: Sequence[int], noise_on: bool = True) -> np.ndarray:
    """
    Evaluate `observable` on the batch every `every` steps.

    Returns:
        Array (samples, batch, ...) of observable values, sample 0 at t = 0
    """
    integrator = setup.integrator(track_energy=False)
    block = np.broadcast_to(u0.values, (len(indices), setup.grid.n))
    state = integrator.initial_state(block)
    noise = setup.noise(indices, role) if noise_on else None
    samples = [observable(state.u)]
    for _ in range(n_steps):
        state = integrator.step_cgl(state, None if noise is None else noise(state.step))
        if state.step % every == 0:
            samples.append(observable(state.u))
    return np.array(samples)


class SquaredNorm:
    """||u||^2 per row."""

    def __init__(self, setup: SimulationSetup):
        self.grid = setup.grid

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return norm_sq(u, self.grid)


class ModalAmplitudes:
    """Complex amplitudes int u e_j dx of the selected modes."""

    def __init__(self, setup: SimulationSetup, modes: Sequence[int]):
        self.basis = setup.basis
        self.modes = list(modes)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.basis.coefficients(u)[..., self.modes]
