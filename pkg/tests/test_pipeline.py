from dataclasses import replace

import numpy as np
import pytest

from src.errors import (
    ConfigError,
    ContractViolationError,
    InfeasibleBudgetError,
    InputError,
    TrainingDivergenceError,
)
from src.tasks import codebook as cb
from src.tasks import pipeline as pl
from src.tasks.transform import decode, decode_coefficients, encode, encode_coefficients, new_codec, quantize_grid
from src.tools.synthetic import gen_synthetic
from src.utils.grid_utils import to_rows

from .conftest import PATCH_SIZE
from .test_transform import numerical_gradient


def test_match_budget_desk_configuration():
    budget = pl.match_budget((32, 32), (16, 16), 128, 4096, 8, (32, 32), 8)

    assert budget.single.channels == 160
    assert budget.single.codebook_size == 8192
    assert budget.single.continuous == budget.hier.continuous == 32 * 32 * 160
    assert budget.single.discrete == budget.hier.discrete == 2 * 4096 * 8


@pytest.mark.parametrize(
    "d_single, k_single",
    [(8, 8192), (16, 4096), (32, 2048), (4, 16384)],
)
def test_match_budget_discrete_side(d_single, k_single):
    budget = pl.match_budget((32, 32), (16, 16), 64, 4096, 8, (32, 32), d_single)

    assert budget.single.codebook_size == k_single
    assert budget.single.codebook_size * budget.single.code_dim == 2 * 4096 * 8


@pytest.mark.parametrize(
    "code_dim, k_hier",
    [(8, 512), (8, 1024), (8, 2048), (8, 4096), (16, 4096), (32, 4096), (64, 4096), (128, 4096)],
)
def test_match_budget_equal_code_dims(code_dim, k_hier):
    budget = pl.match_budget((32, 32), (16, 16), 128, k_hier, code_dim, (32, 32), code_dim)

    assert budget.single.codebook_size == 2 * k_hier
    assert budget.single.code_dim == budget.hier.code_dim == code_dim
    assert budget.single.channels == 160


def test_match_budget_random_indivisible_discrete_side(rng):
    for _ in range(20):
        code_dim = int(rng.integers(1, 9))
        k_hier = int(rng.integers(1, 64))
        single_code_dim = int(rng.integers(2, 40))
        if (2 * k_hier * code_dim) % single_code_dim == 0:
            single_code_dim = 2 * k_hier * code_dim + 1
        with pytest.raises(InfeasibleBudgetError) as info:
            pl.match_budget((4, 4), (2, 2), 4, k_hier, code_dim, (4, 4), single_code_dim)
        assert info.value.constraint == pl.DISCRETE_BUDGET


@pytest.mark.parametrize(
    "args, constraint",
    [
        (((2, 2), (1, 1), 3, 4, 2, (2, 2), 2), pl.CONTINUOUS_BUDGET),
        (((4, 4), (2, 2), 4, 3, 1, (4, 4), 4), pl.DISCRETE_BUDGET),
        (((4, 4), (3, 3), 4, 4, 2, (4, 4), 2), pl.TOP_GRID_CONSTRAINT),
        (((4, 4), (2, 2), 4, 4, 2, (2, 2), 2), pl.SPATIAL_CONSTRAINT),
        (((4, 4), (2, 2), 0, 4, 2, (4, 4), 2), pl.POSITIVE_DIMENSIONS),
        (((4, 4), (2, 2), 4, 4, 8, (4, 4), 8), pl.CODE_DIM_CONSTRAINT),
    ],
)
def test_match_budget_infeasible(args, constraint):
    with pytest.raises(InfeasibleBudgetError) as info:
        pl.match_budget(*args)

    assert info.value.constraint == constraint
    assert constraint in str(info.value)


def test_budget_spec_checks_both_budgets(budget):
    with pytest.raises(InfeasibleBudgetError) as info:
        pl.BudgetSpec(replace(budget.single, channels=11), budget.hier)
    assert info.value.constraint == pl.CONTINUOUS_BUDGET

    with pytest.raises(InfeasibleBudgetError) as info:
        pl.BudgetSpec(replace(budget.single, codebook_size=15), budget.hier)
    assert info.value.constraint == pl.DISCRETE_BUDGET


def test_budget_spec_dict_round_trip(budget):
    assert pl.BudgetSpec.from_dict(budget.to_dict()) == budget
    assert budget.single.channels == 10
    assert budget.single.codebook_size == 16


def test_build_model_shapes(budget):
    single = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)
    hier = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)

    assert single.codebook.entries.shape == (16, 4)
    assert single.grid_shape == (4, 4)
    assert [c.entries.shape for c in hier.codebooks] == [(8, 4), (8, 4)]
    assert hier.codec.unprojection.shape == (8, 8)
    assert pl.level_names(single) == ["single"]
    assert pl.level_names(hier) == ["bottom", "top"]
    assert pl.count_parameters(hier) == hier.codec.parameter_count() + 8 * 8 + 8 * 4


def test_build_model_rejects_unknown_architecture(budget):
    with pytest.raises(InputError):
        pl.build_model("flat", budget, PATCH_SIZE, 1)


def test_single_forward(budget, images):
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)

    reconstruction, z_e, assignment = pl.single_forward(model, images[0])

    assert reconstruction.shape == images[0].shape
    assert 0.0 <= reconstruction.min() and reconstruction.max() <= 1.0
    assert z_e.shape == (4, 4, 4)
    assert assignment.indices.shape == (16,)


def test_hier_forward(budget, images):
    model = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)

    reconstruction, (z_e_bottom, z_e_top), (bottom, top) = pl.hier_forward(model, images[:3])

    assert reconstruction.shape == images[:3].shape
    assert z_e_bottom.shape == (3, 4, 4, 4)
    assert z_e_top.shape == (3, 2, 2, 4)
    assert bottom.indices.shape == (48,)
    assert top.indices.shape == (12,)


def test_forward_rejects_images_of_another_size(budget):
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)

    with pytest.raises(ContractViolationError):
        pl.single_forward(model, np.zeros((32, 32, 1)))


def random_hier_model(budget, rng, images):
    model = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)
    codec = model.codec
    codec = replace(
        codec,
        beta=0.3,
        analysis=rng.normal(scale=0.5, size=codec.analysis.shape),
        synthesis=rng.normal(scale=0.5, size=codec.synthesis.shape),
        projection=rng.normal(scale=0.5, size=codec.projection.shape),
        unprojection=rng.normal(scale=0.5, size=codec.unprojection.shape),
    )
    top = pl.TopStage(
        encoder=rng.normal(scale=0.5, size=model.top.encoder.shape),
        projection=rng.normal(scale=0.5, size=model.top.projection.shape),
    )
    model = replace(model, codec=codec, top=top)
    bottom_rows, top_rows = pl.encoder_outputs(model, images)

    return replace(
        model,
        bottom_codebook=cb.init_from_samples(bottom_rows, 8, rng_seed=0),
        top_codebook=cb.init_from_samples(top_rows, 8, rng_seed=1),
    )


@pytest.mark.parametrize(
    "owner, name",
    [
        ("codec", "analysis"),
        ("codec", "synthesis"),
        ("codec", "projection"),
        ("codec", "unprojection"),
        ("top", "encoder"),
        ("top", "projection"),
    ],
)
def test_hier_gradients_match_finite_differences(budget, rng, owner, name):
    images = rng.random((2, 16, 16, 1))
    model = random_hier_model(budget, rng, images)
    coefficients = encode_coefficients(model.codec, images)
    latents = pl.hier_encode(model, coefficients)
    z_q_bottom, _ = quantize_grid(latents.z_e_bottom, model.bottom_codebook)
    z_q_top, _ = quantize_grid(latents.z_e_top, model.top_codebook)
    offsets = (z_q_bottom - latents.z_e_bottom, z_q_top - latents.z_e_top)

    loss, codec_gradients, top_gradients = pl.hier_loss_and_gradients(model, coefficients, latents, z_q_bottom, z_q_top)
    gradients = codec_gradients if owner == "codec" else top_gradients

    def perturbed_loss(matrix):
        part = replace(getattr(model, owner), **{name: matrix})
        perturbed = replace(model, **{owner: part})
        return pl.hier_straight_through_loss(perturbed, coefficients, z_q_bottom, z_q_top, *offsets).total

    original = getattr(getattr(model, owner), name)
    assert perturbed_loss(original) == pytest.approx(loss.total)
    np.testing.assert_allclose(
        getattr(gradients, name), numerical_gradient(perturbed_loss, original), rtol=1e-4, atol=1e-8
    )


def test_train_with_zero_steps_returns_unchanged_copy(budget, images):
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)

    report = pl.train(model, images, pl.TrainSchedule(steps=0))

    assert report.history == []
    assert report.model is not model
    np.testing.assert_array_equal(report.model.codebook.entries, model.codebook.entries)
    np.testing.assert_array_equal(report.model.codec.analysis, model.codec.analysis)


@pytest.mark.parametrize("architecture", pl.ARCHITECTURES)
def test_train_is_deterministic_and_leaves_input_alone(budget, images, architecture):
    model = pl.build_model(architecture, budget, PATCH_SIZE, 1, window_len=2, threshold=1)
    before = [c.entries.copy() for c in model.codebooks]
    schedule = pl.TrainSchedule(steps=6, batch_size=4, seed=3)

    first = pl.train(model, images, schedule)
    second = pl.train(model, images, schedule)

    assert first.history == second.history
    for a, b in zip(first.model.codebooks, second.model.codebooks):
        np.testing.assert_array_equal(a.entries, b.entries)
    for entries, codebook in zip(before, model.codebooks):
        np.testing.assert_array_equal(entries, codebook.entries)
    assert len(first.history) == 6
    assert [r.step for r in first.history] == list(range(6))


def test_train_rejects_bad_corpus(budget):
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)

    with pytest.raises(InputError):
        pl.train(model, np.zeros((16, 16, 1)), pl.TrainSchedule(steps=1))
    with pytest.raises(ContractViolationError):
        pl.train(model, np.zeros((2, 32, 32, 1)), pl.TrainSchedule(steps=1))


def test_dead_code_reset_recovers_collapsed_codebook(budget):
    corpus = gen_synthetic("gaussian_field:4", 32, seed=5, size=16)
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1, window_len=3, threshold=1)
    collapsed = pl.TrainSchedule(steps=30, batch_size=8, seed=0, data_init=False, adversarial_init=True)

    without_reset = pl.train(model, corpus, replace(collapsed, dead_reset=False))
    with_reset = pl.train(model, corpus, collapsed)

    assert without_reset.total_resets == 0
    assert with_reset.total_resets > 0
    assert all(event.level == "single" for event in with_reset.resets)
    usage_without = pl.evaluate(without_reset.model, corpus).normalized_perplexity
    usage_with = pl.evaluate(with_reset.model, corpus).normalized_perplexity
    assert usage_with > usage_without


def test_train_reports_divergence(budget, images):
    # One Adam step of this size overflows float32, so the next forward pass sees infinite latents
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1, learning_rate=1e39)

    with pytest.raises(TrainingDivergenceError) as info:
        pl.train(model, images, pl.TrainSchedule(steps=20, batch_size=4, dead_reset=False))

    assert info.value.step == 1


def test_train_schedule_validation_and_decay():
    with pytest.raises(ConfigError):
        pl.TrainSchedule(steps=-1)

    schedule = pl.TrainSchedule(lr_decay=0.5, lr_decay_every=10)
    assert schedule.learning_rate(1.0, 9) == 1.0
    assert schedule.learning_rate(1.0, 25) == 0.25


def test_derived_seed_depends_on_every_key():
    seeds = {pl.derived_seed(0, 2, step, level) for step in range(5) for level in range(2)}

    assert len(seeds) == 10
    assert pl.derived_seed(7, 1) == pl.derived_seed(7, 1)


def test_batch_usage_sums_perplexity_over_levels():
    uniform = cb.AssignmentResult(np.array([0, 1, 2, 3]), np.zeros((4, 1)), np.zeros(4))
    single_code = cb.AssignmentResult(np.array([0, 0, 0, 0]), np.zeros((4, 1)), np.zeros(4))

    perplexity, normalized, gini = pl.batch_usage([uniform, single_code], [4, 4])

    assert perplexity == pytest.approx(5.0)
    assert normalized == pytest.approx(5.0 / 8)
    assert gini == pytest.approx(0.75 / 2)


@pytest.mark.parametrize("architecture", pl.ARCHITECTURES)
def test_evaluate(budget, images, architecture):
    model = pl.build_model(architecture, budget, PATCH_SIZE, 1)
    model = pl.train(model, images, pl.TrainSchedule(steps=3, batch_size=4)).model

    report = pl.evaluate(model, images, batch_size=5)

    assert report.per_image_mse.shape == (16,)
    reconstruction, _ = pl.reconstruct(model, images)
    expected = np.mean((reconstruction - images) ** 2, axis=(1, 2, 3))
    np.testing.assert_allclose(report.per_image_mse, expected)
    assert report.perplexity == pytest.approx(sum(level.perplexity for level in report.levels))
    total_codes = sum(c.size for c in model.codebooks)
    assert report.normalized_perplexity == pytest.approx(report.perplexity / total_codes)
    assert [level.name for level in report.levels] == pl.level_names(model)
    assert sum(level.stats.total for level in report.levels[:1]) == 16 * 16


def test_eval_report_psnr_with_exact_images():
    report = pl.EvalReport(per_image_mse=np.array([0.0, 0.01]), levels=[])

    assert np.isinf(report.psnr)
    assert report.psnr_std == 0.0
    assert report.mse == pytest.approx(0.005)


def test_encoder_outputs_rows(budget, images):
    model = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)

    bottom, top = pl.encoder_outputs(model, images[:2])

    assert bottom.shape == (32, 4)
    assert top.shape == (8, 4)
    coefficients = encode_coefficients(model.codec, images[:2])
    np.testing.assert_allclose(bottom, to_rows(pl.hier_encode(model, coefficients).z_e_bottom))


def test_train_threads_the_optimizer_through_every_step(budget, images):
    model = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)

    first = pl.model_step(model, images[:4])
    second = pl.model_step(first.model, images[4:8], 1, optimizer=first.optimizer)

    assert first.optimizer.step == 1
    assert second.optimizer.step == 2
    assert set(second.optimizer.first) == {
        "analysis", "synthesis", "projection", "unprojection", "top_encoder", "top_projection"
    }  # fmt: skip


def test_top_level_reaches_the_hierarchical_reconstruction(budget, images):
    model = pl.build_model(pl.HIER, budget, PATCH_SIZE, 1)
    model = pl.train(model, images, pl.TrainSchedule(steps=20, batch_size=4)).model
    coefficients = encode_coefficients(model.codec, images)
    latents = pl.hier_encode(model, coefficients)
    z_q_bottom, _ = quantize_grid(latents.z_e_bottom, model.bottom_codebook)
    z_q_top, _ = quantize_grid(latents.z_e_top, model.top_codebook)

    with_top = decode(model.codec, pl.fuse(z_q_bottom, z_q_top))
    without_top = decode(model.codec, pl.fuse(z_q_bottom, np.zeros_like(z_q_top)))

    assert np.abs(with_top - without_top).max() > 1e-6


def with_one_code(model):
    dim = model.codebook.dim
    return replace(model, codebook=cb.init_uniform(1, dim, rng_seed=0), usage=cb.UsageWindow(1, 2, 1))


def test_single_code_model_decodes_a_constant_grid(budget, images):
    model = with_one_code(pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1))

    reconstruction, z_e, assignment = pl.single_forward(model, images)

    assert (assignment.indices == 0).all()
    constant = np.broadcast_to(model.codebook.entries[0], z_e.shape)
    expected = np.clip(decode_coefficients(model.codec, decode(model.codec, constant)), 0.0, 1.0)
    np.testing.assert_allclose(reconstruction, expected)
    np.testing.assert_allclose(reconstruction, np.broadcast_to(reconstruction[0], reconstruction.shape))


def test_trained_model_beats_a_single_code_model(budget, images):
    model = pl.build_model(pl.SINGLE, budget, PATCH_SIZE, 1)
    schedule = pl.TrainSchedule(steps=30, batch_size=8)

    trained = pl.train(model, images, schedule).model
    single_code = pl.train(with_one_code(model), images, schedule).model

    assert pl.evaluate(trained, images).mse < pl.evaluate(single_code, images).mse


def test_full_width_codec_with_every_latent_as_a_code_is_lossless(images):
    codec = new_codec(PATCH_SIZE, 1, 16, 16)
    rows = encoder_rows(codec, images)
    model = pl.SingleLevelModel(
        codec=codec,
        codebook=cb.init_from_samples(rows, rows.shape[0], rng_seed=0),
        usage=cb.UsageWindow(rows.shape[0]),
        grid_shape=(4, 4),
    )

    assert pl.evaluate(model, images).mse < 1e-10


def encoder_rows(codec, images):
    return to_rows(encode(codec, encode_coefficients(codec, images))[1])


SLOW_SEEDS = (0, 1, 2)


def desk_budget(patch_size=8):
    from src.stages import BudgetConfig

    return BudgetConfig(codebook_size=64, code_dim=8, channels=16, patch_size=patch_size).spec(64)


@pytest.mark.slow
def test_matched_architectures_reach_similar_error():
    budget = desk_budget()
    corpus = gen_synthetic("mixed", 256, seed=0)
    held_out = gen_synthetic("mixed", 64, seed=1)

    within = 0
    for seed in SLOW_SEEDS:
        schedule = pl.TrainSchedule(steps=2000, batch_size=16, seed=seed)
        errors = []
        for architecture in pl.ARCHITECTURES:
            model = pl.build_model(architecture, budget, 8, 1, seed=seed)
            errors.append(pl.evaluate(pl.train(model, corpus, schedule).model, held_out).mse)
        within += abs(errors[0] - errors[1]) / errors[1] <= 0.05

    assert within >= 2


@pytest.mark.slow
@pytest.mark.parametrize("architecture", pl.ARCHITECTURES)
def test_dead_code_reset_rescues_a_single_point_start(architecture):
    budget = desk_budget()
    corpus = gen_synthetic("gaussian_field:4", 256, seed=0)
    held_out = gen_synthetic("gaussian_field:4", 64, seed=1)

    better = 0
    for seed in SLOW_SEEDS:
        schedule = pl.TrainSchedule(steps=2000, batch_size=16, seed=seed, adversarial_init=True)
        model = pl.build_model(architecture, budget, 8, 1, seed=seed)
        with_reset = pl.evaluate(pl.train(model, corpus, schedule).model, held_out)
        without_reset = pl.evaluate(pl.train(model, corpus, replace(schedule, dead_reset=False)).model, held_out)
        better += (
            with_reset.mse < without_reset.mse
            and with_reset.normalized_perplexity > without_reset.normalized_perplexity
        )

    assert better >= 2
