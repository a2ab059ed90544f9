import numpy as np
import pytest

from src.errors import ContractViolationError, InputError
from src.tasks import codebook as cb
from src.utils.array_utils import to_f32


def brute_force_nearest(vectors, entries):
    indices = []
    for vector in vectors:
        distances = [float(np.sum((vector - entry) ** 2)) for entry in entries]
        indices.append(distances.index(min(distances)))

    return np.array(indices)


def test_nearest_assign_matches_brute_force(rng):
    codebook = cb.init_uniform(32, 5, rng_seed=3)
    vectors = rng.normal(scale=0.05, size=(200, 5))

    result = cb.nearest_assign(vectors, codebook)

    np.testing.assert_array_equal(result.indices, brute_force_nearest(vectors, codebook.entries))
    np.testing.assert_array_equal(result.quantized, codebook.entries[result.indices])
    expected = np.sum((vectors - codebook.entries[result.indices]) ** 2, axis=1)
    np.testing.assert_allclose(result.distances, expected)


def test_nearest_assign_breaks_ties_by_lowest_index():
    entries = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    codebook = cb.Codebook(entries, np.ones(3), entries.copy())

    result = cb.nearest_assign(np.array([[1.0, 0.0], [0.5, 0.0]]), codebook)

    assert result.indices.tolist() == [1, 0]


def test_nearest_assign_rejects_non_finite_rows():
    codebook = cb.init_uniform(4, 2, rng_seed=0)
    vectors = np.array([[0.0, 0.0], [np.nan, 1.0]])

    with pytest.raises(InputError) as info:
        cb.nearest_assign(vectors, codebook)
    assert info.value.row == 1


def test_nearest_assign_rejects_wrong_dimension():
    codebook = cb.init_uniform(4, 2, rng_seed=0)

    with pytest.raises(ContractViolationError):
        cb.nearest_assign(np.zeros((3, 3)), codebook)


def test_codebook_rejects_non_finite_entries():
    entries = np.array([[0.0, np.inf]])

    with pytest.raises(InputError):
        cb.Codebook(entries, np.ones(1), np.zeros((1, 2)))


def test_ema_update_keeps_fixed_point():
    entries = np.arange(12, dtype=np.float64).reshape(4, 3)
    codebook = cb.init_from_samples(entries, 4, rng_seed=0)

    updated = cb.ema_update(codebook, codebook.entries, cb.nearest_assign(codebook.entries, codebook))

    np.testing.assert_allclose(updated.entries, codebook.entries)


def test_ema_update_converges_to_assigned_mean(rng):
    codebook = cb.init_uniform(1, 3, rng_seed=0, decay=0.9)
    vectors = rng.normal(loc=2.0, size=(16, 3))

    for _ in range(400):
        codebook = cb.ema_update(codebook, vectors, cb.nearest_assign(vectors, codebook))

    # Statistics are held at float32 precision, so the fixed point is reached up to a few float32 ulps
    np.testing.assert_allclose(codebook.entries[0], vectors.mean(axis=0), atol=5e-6)


def test_ema_update_leaves_unassigned_codes_in_place():
    entries = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    codebook = cb.Codebook(entries, np.ones(3), entries.copy())
    vectors = np.full((10, 2), 0.1)

    updated = cb.ema_update(codebook, vectors, cb.nearest_assign(vectors, codebook))

    assert (updated.entries[0] != codebook.entries[0]).all()
    np.testing.assert_allclose(updated.entries[1:], codebook.entries[1:], rtol=1e-3)


def test_init_from_samples_picks_distinct_rows(rng):
    samples = to_f32(rng.normal(size=(50, 4)))

    codebook = cb.init_from_samples(samples, 10, rng_seed=5)

    rows = {tuple(row) for row in samples}
    assert {tuple(entry) for entry in codebook.entries} <= rows
    assert len({tuple(entry) for entry in codebook.entries}) == 10


def test_init_from_samples_with_few_samples(rng):
    samples = to_f32(rng.normal(size=(3, 4)))

    codebook = cb.init_from_samples(samples, 8, rng_seed=5)

    assert codebook.entries.shape == (8, 4)
    np.testing.assert_array_equal(codebook.entries[:3], samples)


def test_init_uniform_range():
    codebook = cb.init_uniform(16, 4, rng_seed=2)

    assert codebook.entries.shape == (16, 4)
    assert np.abs(codebook.entries).max() <= 1.0 / 16


def test_init_constant_sends_everything_to_code_zero(rng):
    codebook = cb.init_constant(np.ones(3), 5)

    result = cb.nearest_assign(rng.normal(size=(20, 3)), codebook)

    assert (result.indices == 0).all()


def test_usage_window_arms_codes_after_a_full_window():
    window = cb.UsageWindow(size=3, window_len=3, threshold=2)

    window.push(np.array([5, 1, 0]))
    window.push(np.array([5, 0, 3]))
    assert cb.detect_dead_codes(window) == set()

    window.push(np.array([5, 0, 0]))
    assert window.is_full
    assert cb.detect_dead_codes(window) == {1}


def test_usage_window_drops_oldest_batch():
    window = cb.UsageWindow(size=2, window_len=2, threshold=1)
    for counts in ([0, 4], [4, 0], [4, 0]):
        window.push(np.array(counts))

    np.testing.assert_array_equal(window.aggregate(), [8, 0])
    assert cb.detect_dead_codes(window) == {1}


def test_usage_window_restart_disarms_reset_codes():
    window = cb.UsageWindow(size=2, window_len=2, threshold=1)
    window.push(np.array([4, 0]))
    window.push(np.array([4, 0]))
    assert cb.detect_dead_codes(window) == {1}

    window.restart({1})
    window.push(np.array([4, 0]))
    assert cb.detect_dead_codes(window) == set()

    window.push(np.array([4, 0]))
    assert cb.detect_dead_codes(window) == {1}


def test_detect_dead_codes_needs_history():
    with pytest.raises(ContractViolationError):
        cb.detect_dead_codes(cb.UsageWindow(size=2))


def test_usage_window_rejects_wrong_shape():
    window = cb.UsageWindow(size=2)

    with pytest.raises(ContractViolationError):
        window.push(np.array([1, 2, 3]))


def test_reset_dead_codes_moves_only_dead_codes():
    codebook = cb.init_uniform(4, 2, rng_seed=0)
    recent = np.tile([[3.0, -1.0]], (20, 1))

    reset = cb.reset_dead_codes(codebook, {1, 3}, recent, rng_seed=9)

    np.testing.assert_array_equal(reset.entries[[0, 2]], codebook.entries[[0, 2]])
    np.testing.assert_array_equal(reset.entries[[1, 3]], recent[:2])
    np.testing.assert_array_equal(reset.ema_counts[[1, 3]], [1.0, 1.0])


def test_reset_dead_codes_is_deterministic(rng):
    codebook = cb.init_uniform(6, 3, rng_seed=0)
    recent = rng.normal(size=(30, 3))

    first = cb.reset_dead_codes(codebook, {0, 4}, recent, rng_seed=11)
    second = cb.reset_dead_codes(codebook, {0, 4}, recent, rng_seed=11)

    np.testing.assert_array_equal(first.entries, second.entries)
    assert np.abs(first.entries[[0, 4]] - recent.mean(axis=0)).max() < 2.0


def test_reset_dead_codes_rejects_unknown_codes():
    codebook = cb.init_uniform(4, 2, rng_seed=0)

    with pytest.raises(ContractViolationError):
        cb.reset_dead_codes(codebook, {4}, np.zeros((3, 2)), rng_seed=0)


def test_commitment_loss():
    assert cb.commitment_loss(np.ones((4, 2)), np.zeros((4, 2)), beta=0.25) == pytest.approx(0.25)

    with pytest.raises(ContractViolationError):
        cb.commitment_loss(np.ones((4, 2)), np.zeros((2, 4)), beta=0.25)


def lowest_index_nearest(vectors, entries):
    indices = []
    for vector in vectors:
        distances = np.sum((vector - entries) ** 2, axis=1)
        indices.append(int(np.flatnonzero(distances == distances.min())[0]))

    return np.array(indices)


def test_nearest_assign_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(2024)
    for case in range(1000):
        size, dim, rows = int(rng.integers(1, 65)), int(rng.integers(1, 17)), int(rng.integers(1, 257))
        if case % 2:
            # Small integers make exact ties common and keep every distance exact
            entries = rng.integers(-2, 3, size=(size, dim)).astype(np.float64)
            vectors = rng.integers(-2, 3, size=(rows, dim)).astype(np.float64)
        else:
            entries = rng.normal(size=(size, dim))
            vectors = rng.normal(size=(rows, dim))
        duplicates = rng.integers(0, size, size=size // 4)
        entries[duplicates] = entries[rng.integers(0, size, size=duplicates.size)]
        codebook = cb.Codebook(entries, np.ones(size), entries.copy())
        vectors[: rows // 8] = codebook.entries[rng.integers(0, size, size=rows // 8)]

        result = cb.nearest_assign(vectors, codebook)

        expected = lowest_index_nearest(vectors, codebook.entries)
        np.testing.assert_array_equal(result.indices, expected, err_msg=f"case {case}")


def test_quantization_is_idempotent(rng):
    entries = cb.init_uniform(16, 4, rng_seed=1).entries
    entries[5] = entries[2]
    codebook = cb.Codebook(entries, np.ones(16), entries.copy())

    first = cb.nearest_assign(rng.normal(scale=0.1, size=(300, 4)), codebook)
    second = cb.nearest_assign(first.quantized, codebook)

    np.testing.assert_array_equal(second.quantized, first.quantized)
    np.testing.assert_array_equal(second.indices, first.indices)
    np.testing.assert_array_equal(second.distances, 0.0)
    assert 5 not in first.indices


def test_zero_decay_moves_codes_to_batch_means(rng):
    entries = np.array([[0.0, 0.0], [10.0, 10.0]])
    codebook = cb.Codebook(entries, np.ones(2), entries.copy(), decay=0.0)
    near, far = rng.normal(scale=0.5, size=(5, 2)), 10 + rng.normal(scale=0.5, size=(7, 2))
    vectors = np.concatenate([near, far])

    updated = cb.ema_update(codebook, vectors, cb.nearest_assign(vectors, codebook))

    np.testing.assert_allclose(updated.entries[0], near.mean(axis=0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(updated.entries[1], far.mean(axis=0), rtol=1e-5)


def test_empty_batch_decays_counts_and_keeps_entries():
    codebook = cb.init_uniform(4, 3, rng_seed=0)
    empty = cb.AssignmentResult(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0))

    updated = cb.ema_update(codebook, np.zeros((0, 3)), empty)

    np.testing.assert_allclose(updated.ema_counts, 0.99 * codebook.ema_counts, rtol=1e-6)
    np.testing.assert_allclose(updated.entries, codebook.entries, rtol=1e-6)


def test_repeated_batch_moves_code_monotonically_toward_its_mean(rng):
    codebook = cb.init_uniform(1, 2, rng_seed=0)
    vectors = rng.normal(loc=1.0, size=(8, 2))

    gaps = []
    for _ in range(50):
        codebook = cb.ema_update(codebook, vectors, cb.nearest_assign(vectors, codebook))
        gaps.append(np.abs(codebook.entries[0] - vectors.mean(axis=0)).max())

    assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))


def test_codebook_state_is_held_at_float32_precision(rng):
    entries = rng.normal(size=(5, 3))

    codebook = cb.Codebook(entries, rng.random(5), entries.copy(), decay=0.97)

    for values in (codebook.entries, codebook.ema_counts, codebook.ema_sums):
        np.testing.assert_array_equal(values, values.astype(np.float32))
    assert codebook.decay == float(np.float32(0.97))


def test_dead_set_never_grows_when_the_threshold_drops(rng):
    counts = rng.poisson(1.0, size=(10, 12))

    dead_sets = []
    for threshold in range(6):
        window = cb.UsageWindow(size=12, window_len=10, threshold=threshold)
        for batch_counts in counts:
            window.push(batch_counts)
        dead_sets.append(cb.detect_dead_codes(window))

    assert all(lower <= higher for lower, higher in zip(dead_sets, dead_sets[1:]))


def test_longer_window_never_lowers_aggregate_counts(rng):
    short, long = cb.UsageWindow(size=12, window_len=4), cb.UsageWindow(size=12, window_len=10)
    for batch_counts in rng.poisson(1.0, size=(10, 12)):
        short.push(batch_counts)
        long.push(batch_counts)

    assert (long.aggregate() >= short.aggregate()).all()


def test_reset_code_wins_assignments_on_recent_outputs():
    successes = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        recent = rng.normal(size=(64, 4))
        entries = cb.init_from_samples(recent, 8, rng_seed=seed).entries
        entries[3] = 100.0
        codebook = cb.Codebook(entries, np.ones(8), entries.copy())

        reset = cb.reset_dead_codes(codebook, {3}, recent, rng_seed=seed)

        successes += int((cb.nearest_assign(recent, reset).indices == 3).any())

    assert successes >= 95
