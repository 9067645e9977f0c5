import numpy as np
import pytest


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240817)


def constant_tile(side: int, value: int) -> np.ndarray:
    return np.full((side, side, 3), value, dtype=np.uint8)


def random_tile(np_rng, side: int) -> np.ndarray:
    return np_rng.integers(0, 256, (side, side, 3), dtype=np.uint8)


def finite_difference_grads(loss_fn, arrays, step=1e-4):
    """Central finite differences of loss_fn() with respect to each array.

    Arrays are perturbed in place and restored; loss_fn takes no arguments
    and must read the (mutated) arrays.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr, dtype=np.float64)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(grad)
    return grads


def max_rel_error(analytic, numeric, floor=1e-5):
    """Worst elementwise |a - n| / max(|a|, |n|, floor) over array pairs."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def separable_bags(n, k=16, l=1, d=8, seed=0, noise=0.5):
    """Synthetic MIL set: exactly one of k tiles carries the class signal.

    Dimension 0 marks the signal tile; dimension 1 carries +/-2 by class;
    everything else is Gaussian noise.
    """
    from milbench.embedder import EmbeddingBag

    rng = np.random.default_rng(seed)
    bags, labels = [], []
    for i in range(n):
        label = i % 2
        data = rng.normal(0, noise, (k, l, d))
        sig = rng.integers(k)
        data[sig, :, 0] = 1.0
        data[sig, :, 1] = 2.0 if label == 0 else -2.0
        bags.append(EmbeddingBag(f"s{i:03d}", data.astype(np.float32)))
        labels.append(label)
    return bags, labels
