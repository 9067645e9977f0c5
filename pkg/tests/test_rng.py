import numpy as np

from milbench.rng import GAMMA, MASK64, SeededRng, mix64, phase_seed

# Reference values computed from the splitmix64 definition with Python ints:
# draw k of seed s is mix64((s + (k+1)*GAMMA) mod 2**64).
def _reference_stream(seed, n):
    return [mix64((seed + (k + 1) * GAMMA) & MASK64) for k in range(n)]


def test_scalar_matches_reference():
    rng = SeededRng(12345)
    assert [rng.next_u64() for _ in range(8)] == _reference_stream(12345, 8)


def test_vector_matches_scalar_bit_for_bit():
    a, b = SeededRng(987654321), SeededRng(987654321)
    scalar = [a.next_u64() for _ in range(1000)]
    assert list(b.next_array(1000)) == scalar


def test_mixed_scalar_vector_interleaving():
    a, b = SeededRng(7), SeededRng(7)
    seq_a = [a.next_u64() for _ in range(10)]
    seq_b = list(b.next_array(3)) + [b.next_u64()] + list(b.next_array(6))
    assert seq_a == seq_b


def test_same_seed_same_stream_different_seed_differs():
    assert [SeededRng(5).next_u64() for _ in range(4)] == [SeededRng(5).next_u64() for _ in range(4)]
    assert SeededRng(5).next_u64() != SeededRng(6).next_u64()


def test_uniform_in_range():
    rng = SeededRng(11)
    draws = rng.uniform_array(10_000, -2.0, 3.0)
    assert np.all(draws >= -2.0) and np.all(draws < 3.0)
    # mean of U(-2, 3) is 0.5
    assert abs(draws.mean() - 0.5) < 0.05


def test_uniform_scalar_matches_array():
    a, b = SeededRng(99), SeededRng(99)
    assert [a.uniform() for _ in range(50)] == list(b.uniform_array(50))


def test_randint_bounds_and_error():
    rng = SeededRng(3)
    draws = [rng.randint(7) for _ in range(200)]
    assert set(draws) <= set(range(7))
    try:
        rng.randint(0)
    except ValueError:
        pass
    else:
        raise AssertionError("randint(0) should raise")


def test_shuffle_is_permutation_and_deterministic():
    a, b = SeededRng(21), SeededRng(21)
    xs, ys = list(range(20)), list(range(20))
    a.shuffle(xs)
    b.shuffle(ys)
    assert xs == ys
    assert sorted(xs) == list(range(20))


def test_spawn_gives_independent_streams():
    parent = SeededRng(1)
    child = parent.spawn()
    assert child.next_u64() != parent.next_u64()


def test_phase_seed_stable():
    assert phase_seed(42, 1) == phase_seed(42, 1)
    assert phase_seed(42, 1) != phase_seed(42, 2)
