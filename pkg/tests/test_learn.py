import csv

import numpy as np
import pytest
from numpy import testing as npt

from modules import learn
from modules.errors import DivergenceError, InputValidationError, NumericalError
from modules.hankel_ops import TemporalFilter
from modules.hqs_solver import reconstruct
from modules.learn import (
    HISTORY_COLUMNS,
    LearnableParams,
    TrainingPair,
    annihilation_residual,
    batch_loss,
    forward_unrolled,
    gradient,
    loss,
    make_training_pairs,
    train,
    write_history_csv,
)
from modules.models import Hyperparams, PhantomConfig, TrainConfig
from modules.ps_model import calibrate_nullspace, generate_phantom, prony_filter, spatial_filter_default
from modules.sampling import adjoint_encode, encode, make_coils, make_mask, undersample

from .conftest import random_complex

STABLE = Hyperparams(lambda1=0.05, lambda2=0.1, rho0=1.0, rho1=1.0, rho2=1.0)


@pytest.fixture
def pairs():
    phantom = PhantomConfig(seed=2, nx=16, ny=16, nt=8, order=3, noise=0.01)
    return make_training_pairs(2, phantom, 4.0, 2, make_coils(16, 16, 2, seed=0))


@pytest.fixture
def params(pairs):
    temporal = calibrate_nullspace([pair.gamma_ref for pair in pairs], 4).filter
    return LearnableParams.initial(temporal, spatial_filter_default(), 5, hyper=STABLE)


def test_loss_examples(rng):
    reference = random_complex(rng, (4, 4, 3))
    assert loss(reference, reference) == 0.0
    offset = 0.1 * np.exp(1j * rng.uniform(0, 2 * np.pi, reference.shape))
    npt.assert_allclose(loss(reference + offset, reference), 0.01, rtol=1e-12)
    output = random_complex(rng, (4, 4, 3))
    oracle = sum(abs(output[i, j, t] - reference[i, j, t]) ** 2
                 for i in range(4) for j in range(4) for t in range(3)) / 48
    npt.assert_allclose(loss(output, reference), oracle, rtol=1e-12)
    phase = np.exp(0.7j)
    npt.assert_allclose(loss(phase * output, phase * reference), loss(output, reference), rtol=1e-12)
    with pytest.raises(InputValidationError):
        loss(output, reference[:, :, :2])


def test_forward_matches_paper_mode_solver(pairs, params):
    pair = pairs[0]
    expected = reconstruct(pair.y_under, pair.mask, pair.coils, params.to_solver_config()).gamma
    npt.assert_allclose(forward_unrolled(params, pair), expected, rtol=1e-10, atol=1e-12)


def test_forward_is_deterministic(pairs, params):
    npt.assert_array_equal(forward_unrolled(params, pairs[0]), forward_unrolled(params, pairs[0]))


def test_zero_depth_returns_zero_filled(pairs, params):
    shallow = LearnableParams(params.sets, 0)
    pair = pairs[1]
    npt.assert_allclose(forward_unrolled(shallow, pair), adjoint_encode(pair.y_under, pair.coils, pair.mask),
                        atol=1e-13)


def test_exact_phantom_full_mask_has_zero_loss():
    gamma, decomp = generate_phantom(PhantomConfig(seed=4, nx=12, ny=12, nt=8, order=2))
    coils, mask = make_coils(12, 12), make_mask(12, 12, 8, 1.0, 0)
    pair = TrainingPair(undersample(gamma, coils, mask), mask, coils, gamma)
    hyper = Hyperparams(lambda1=0.0, lambda2=1.0)
    params = LearnableParams.initial(prony_filter(decomp.roots), spatial_filter_default(), 3, hyper=hyper)
    assert batch_loss(params, [pair]) < 1e-12


def test_gradient_matches_central_differences(pairs, params):
    value, grad = gradient(params, pairs)
    npt.assert_allclose(value, batch_loss(params, pairs), rtol=1e-12)
    vector = params.to_vector()
    assert grad.shape == vector.shape
    step = 1e-6
    numeric = np.empty_like(vector)
    for index in range(vector.size):
        shift = np.zeros_like(vector)
        shift[index] = step
        upper = batch_loss(params.from_vector(vector + shift), pairs)
        lower = batch_loss(params.from_vector(vector - shift), pairs)
        numeric[index] = (upper - lower) / (2 * step)
    npt.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6 * np.abs(grad).max())
    # every parameter class gets a nonzero gradient
    assert np.all(grad[:5] != 0)
    assert np.any(grad[5:13] != 0) and np.any(grad[13:] != 0)


def test_dead_path_has_zero_gradient(pairs, params):
    values = params.sets[0].copy()
    values.log_hyper[0] = -np.inf
    dead = LearnableParams([values], params.unroll_depth)
    _, grad = gradient(dead, pairs)
    assert grad[0] == 0.0
    npt.assert_array_equal(grad[13:], 0.0)
    assert np.any(grad[5:13] != 0)


def test_zero_loss_gives_zero_gradient(pairs, params):
    pair = pairs[0]
    label = forward_unrolled(params, pair)
    perfect = TrainingPair(pair.y_under, pair.mask, pair.coils, label)
    value, grad = gradient(params, [perfect])
    assert value == 0.0
    npt.assert_array_equal(grad, 0.0)


def test_untied_parameters_sum_to_tied_gradient(pairs, params):
    untied = LearnableParams([params.sets[0].copy() for _ in range(5)], 5)
    assert not untied.tied
    npt.assert_allclose(forward_unrolled(untied, pairs[0]), forward_unrolled(params, pairs[0]), rtol=1e-14)
    _, tied_grad = gradient(params, pairs)
    _, untied_grad = gradient(untied, pairs)
    npt.assert_allclose(untied_grad.reshape(5, -1).sum(axis=0), tied_grad, rtol=1e-9, atol=1e-15)
    with pytest.raises(InputValidationError):
        untied.to_solver_config()


def test_non_finite_sweep_is_reported(pairs, params):
    values = params.sets[0].copy()
    values.log_hyper[2] = -np.inf
    with pytest.raises(NumericalError) as info:
        forward_unrolled(LearnableParams([values], 3), pairs[0])
    assert info.value.sweep == 1


def test_pair_validation(pairs, params):
    long_filter = LearnableParams.initial(TemporalFilter(np.ones(9)), spatial_filter_default(), 2)
    with pytest.raises(InputValidationError):
        forward_unrolled(long_filter, pairs[0])
    with pytest.raises(InputValidationError):
        batch_loss(params, [])
    wrong = LearnableParams([params.sets[0].copy() for _ in range(3)], 5)
    with pytest.raises(InputValidationError):
        batch_loss(wrong, pairs)


def test_train_zero_steps_keeps_params(pairs, params):
    result = train(params, pairs, TrainConfig(steps=0, depth=5))
    npt.assert_array_equal(result.params.to_vector(), params.to_vector())
    assert len(result.history) == 1
    assert result.history[0][0] == 0


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_train_records_history(pairs, params, optimizer):
    config = TrainConfig(steps=3, depth=5, optimizer=optimizer, lr_hyper=1e-3, lr_taps=1e-4)
    result = train(params, pairs, config)
    assert [row[0] for row in result.history] == [0, 1, 2, 3]
    assert not np.array_equal(result.params.to_vector(), params.to_vector())
    npt.assert_allclose(result.history[-1][1], batch_loss(result.params, pairs), rtol=1e-12)
    assert result.params.sets[0].hps_taps.shape == params.sets[0].hps_taps.shape


def test_train_aborts_on_blow_up(pairs, params, monkeypatch):
    original = learn._batch_loss
    calls = []

    def exploding(tparams, tensors):
        calls.append(None)
        return original(tparams, tensors) * 10.0 ** (7 * (len(calls) - 1))

    monkeypatch.setattr(learn, "_batch_loss", exploding)
    with pytest.raises(DivergenceError) as info:
        train(params, pairs, TrainConfig(steps=5, depth=5))
    assert len(info.value.history) == 2
    assert info.value.history[1] > 1e6 * info.value.history[0]


def test_params_file(tmp_path, params):
    path = params.save(tmp_path / "params.psnp")
    loaded = LearnableParams.load(path)
    assert loaded.unroll_depth == 5 and loaded.tied
    npt.assert_array_equal(loaded.to_vector(), params.to_vector())
    cfg = loaded.to_solver_config()
    assert cfg.mode == "paper" and cfg.iterations == 5
    npt.assert_allclose(cfg.hyper.lambda2, 0.1)


def test_training_pairs_are_consistent_and_seeded(pairs):
    for pair in pairs:
        npt.assert_allclose(pair.y_under, encode(pair.gamma_ref, pair.coils, pair.mask), atol=1e-12)
    phantom = PhantomConfig(seed=2, nx=16, ny=16, nt=8, order=3, noise=0.01)
    again = make_training_pairs(2, phantom, 4.0, 2, make_coils(16, 16, 2, seed=0))
    npt.assert_array_equal(again[1].gamma_ref, pairs[1].gamma_ref)
    npt.assert_array_equal(again[1].mask.mask, pairs[1].mask.mask)
    assert not np.array_equal(pairs[0].gamma_ref, pairs[1].gamma_ref)


def test_annihilation_residual(small_phantom):
    gamma, decomp = small_phantom
    assert annihilation_residual(prony_filter(decomp.roots).taps, [gamma]) < 1e-10
    assert annihilation_residual(np.array([1.0, 1.0]), [gamma]) > 1e-3


def test_history_csv(tmp_path):
    path = write_history_csv(tmp_path / "history.csv", [(0, 1.0, 0.5), (1, 0.25, 0.125)])
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows == [HISTORY_COLUMNS, ["0", "1", "0.5"], ["1", "0.25", "0.125"]]


@pytest.mark.slow
def test_training_halves_the_loss():
    phantom = PhantomConfig(seed=100, nx=32, ny=32, nt=8, order=3, noise=0.05)
    training = make_training_pairs(10, phantom, 4.0, 4, make_coils(32, 32))
    labels = [pair.gamma_ref for pair in training]
    calibrated = calibrate_nullspace(labels, 4).filter
    params0 = LearnableParams.initial(calibrated, spatial_filter_default(), 5)
    result = train(params0, training, TrainConfig(steps=100, depth=5))
    assert result.history[-1][1] <= 0.5 * result.history[0][1]
    learned = annihilation_residual(result.params.sets[0].hps_taps, labels)
    assert learned < 10 * annihilation_residual(calibrated.taps, labels)
