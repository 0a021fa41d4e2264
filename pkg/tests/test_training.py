import math

import numpy as np
import pytest

from reset_opt import data, nn
from reset_opt import training as tr


def small_problem(tau=0.4, seed=0, per_class=40):
    full = data.make_blobs(4, per_class, 6, 3.0, seed=seed)
    tr_idx, va_idx = data.split_indices(full, 0.25, seed)
    train = data.corrupt(full.subset(tr_idx), data.NoiseSpec("symmetric", tau), seed=seed)
    return nn.fcn((6,), 8, 4), train, full.subset(va_idx)


def fresh_state(seed=0):
    net = nn.fcn((3,), 4, 2)
    return tr.TrainState.create(nn.init_params(net, seed), seed)


def test_sgd_step_examples():
    state = fresh_state()
    state.params.vector[:] = 0
    g = np.linspace(-1, 1, state.params.total_dim)
    tr.sgd_step(state, g, 0.1)
    np.testing.assert_allclose(state.params.vector, -0.1 * g)
    state = fresh_state()
    start = state.params.flatten()
    tr.sgd_step(state, g, 0.1, momentum=0.9)
    tr.sgd_step(state, g, 0.1, momentum=0.9)
    np.testing.assert_allclose(state.params.vector, start - 0.1 * (g + 1.9 * g))
    with pytest.raises(tr.NumericalError):
        tr.sgd_step(state, np.full_like(g, np.nan), 0.1)
    with pytest.raises(nn.DimensionError):
        tr.sgd_step(state, g[:-1], 0.1)


def test_zero_gradient_keeps_params():
    state = fresh_state()
    before = state.params.flatten()
    tr.sgd_step(state, np.zeros(state.params.total_dim), 0.5, momentum=0.5)
    np.testing.assert_array_equal(state.params.vector, before)


def test_checkpoint_arms_after_patience_and_follows_new_best():
    cfg = tr.ResetConfig(0.5, patience=60, validation_interval=20)
    state = fresh_state()
    state, moved = tr.validate_and_update_checkpoint(state, cfg, 1.0)
    assert state.checkpoint is None and not moved
    best = state.best.copy()
    state.params.vector += 1.0
    for k in range(2):
        state, moved = tr.validate_and_update_checkpoint(state, cfg, 2.0)
        assert state.checkpoint is None
    state, moved = tr.validate_and_update_checkpoint(state, cfg, 2.0)
    assert moved and np.array_equal(state.checkpoint, best)
    state, moved = tr.validate_and_update_checkpoint(state, cfg, 0.5)
    assert moved and np.array_equal(state.checkpoint, state.params.vector)


def test_ties_keep_earlier_best():
    cfg = tr.ResetConfig()
    state = fresh_state()
    state.iteration = 20
    tr.validate_and_update_checkpoint(state, cfg, 1.0)
    state.iteration = 40
    tr.validate_and_update_checkpoint(state, cfg, 1.0)
    assert state.best_iteration == 20


def test_accuracy_selection_maximizes():
    cfg = tr.ResetConfig(selection_metric=tr.VAL_ACCURACY)
    state = tr.TrainState.create(fresh_state().params, 0, tr.VAL_ACCURACY)
    tr.validate_and_update_checkpoint(state, cfg, 0.3)
    tr.validate_and_update_checkpoint(state, cfg, 0.2)
    assert state.best_metric == 0.3


def armed_state(seed=0):
    state = fresh_state(seed)
    state.checkpoint = state.params.flatten() + 5.0
    state.checkpoint_buffers = state.params.get_buffers()
    return state


def test_reset_restores_checkpoint_exactly_and_keeps_momentum():
    state = armed_state()
    state.momentum_buffer = np.arange(state.params.total_dim, dtype=float)
    buf = state.momentum_buffer.copy()
    state, did = tr.maybe_reset(state, tr.ResetConfig(1.0))
    assert did
    np.testing.assert_array_equal(state.params.vector, state.checkpoint)
    np.testing.assert_array_equal(state.momentum_buffer, buf)


def test_partial_reset_leaves_other_section():
    state = armed_state()
    before = state.params.flatten()
    state, _ = tr.maybe_reset(state, tr.ResetConfig(1.0, sections=(nn.LATTER,)))
    mask = state.params.section_mask([nn.LATTER])
    np.testing.assert_array_equal(state.params.vector[mask], state.checkpoint[mask])
    np.testing.assert_array_equal(state.params.vector[~mask], before[~mask])


def test_perturbed_reset_distance():
    state = armed_state()
    cfg = tr.ResetConfig(1.0, perturbation_eps=0.3)
    state, _ = tr.maybe_reset(state, cfg)
    d1 = state.params.vector - state.checkpoint
    assert np.linalg.norm(d1) == pytest.approx(0.3, rel=1e-12)
    state, _ = tr.maybe_reset(state, cfg)
    assert not np.allclose(state.params.vector - state.checkpoint, d1)


def test_no_reset_without_checkpoint_or_with_zero_rate():
    state = fresh_state()
    assert not tr.maybe_reset(state, tr.ResetConfig(1.0))[1]
    assert not tr.maybe_reset(armed_state(), tr.ResetConfig(0.0))[1]


def test_reset_frequency():
    state = armed_state()
    cfg = tr.ResetConfig(0.1)
    n = 20000
    hits = sum(tr.maybe_reset(state, cfg)[1] for _ in range(n))
    assert abs(hits / n - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)


def test_config_validation():
    with pytest.raises(ValueError):
        tr.ResetConfig(1.5)
    with pytest.raises(ValueError):
        tr.ResetConfig(0.1, sections=())
    with pytest.raises(ValueError):
        tr.ResetConfig(patience=0)


def test_memorization_fraction_examples():
    net, train, _ = small_problem()
    p = nn.init_params(net, 0)
    frac = tr.memorization_fraction(net, p, train)
    assert 0.0 <= frac <= 1.0
    assert tr.memorization_fraction(net, p, train.clean()) is None


def test_memorization_fraction_uniform_predictor():
    # a random predictor recovers the true class about 1/c of the time
    rng = np.random.default_rng(0)
    n, c = 4000, 10
    y = rng.integers(0, c, n)
    X = rng.normal(size=(n, 5))
    ds = data.corrupt(data.LabeledDataset(X, y, y, c), data.NoiseSpec("symmetric", 1.0), seed=1)
    net = nn.fcn((5,), 16, c, batch_norm=False)
    frac = tr.memorization_fraction(net, nn.init_params(net, 3), ds)
    assert abs(frac - 0.1) < 0.05


def test_relative_difference():
    assert tr.relative_difference(0.9, 1.0) == pytest.approx(-0.1)
    assert tr.relative_difference(2.0, 2.0) == 0.0
    assert tr.relative_difference(2.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        tr.relative_difference(1.0, 0.0)


def test_train_is_reproducible_and_best_matches_table():
    net, train, val = small_problem()
    cfg = tr.ResetConfig(0.05, patience=100)
    opt = tr.OptimizerConfig(batch_size=8, total_iters=600)
    a = tr.train(net, train, val, val, cfg, opt, seed=3)
    b = tr.train(net, train, val, val, cfg, opt, seed=3)
    assert [r.as_csv() for r in a.metrics] == [r.as_csv() for r in b.metrics]
    losses = np.array([r.val_loss for r in a.metrics])
    assert a.best_iteration == a.metrics[int(np.argmin(losses))].iteration
    assert a.best_metric == losses.min()
    best_loss, _ = nn.evaluate(net, a.best_params, val.features, val.noisy_labels)
    assert best_loss == pytest.approx(a.best_metric, rel=1e-12)


def test_zero_rate_equals_plain_sgd():
    net, train, val = small_problem()
    opt = tr.OptimizerConfig(batch_size=8, total_iters=200)
    a = tr.train(net, train, val, val, tr.ResetConfig(0.0), opt, seed=1)
    # hand-rolled reference loop
    params = nn.init_params(net, tr.stream(1, "init"))
    sampler = data.BatchSampler(8, seed=int(tr.stream(1, "batch").integers(2 ** 63)))
    drop = tr.stream(1, "dropout")
    for _ in range(200):
        i = sampler.sample(len(train))
        _, g = nn.loss_and_grad(net, params, train.features[i], train.noisy_labels[i], "ce", "train",
                                drop, update_stats=True)
        params.vector -= 0.01 * g
    np.testing.assert_array_equal(a.final_params.vector, params.vector)


def test_fixed_checkpoint_pins_iteration():
    net, train, val = small_problem()
    opt = tr.OptimizerConfig(batch_size=8, total_iters=300)
    cfg = tr.ResetConfig(1.0, fixed_checkpoint_iteration=100)
    res = tr.train(net, train, val, val, cfg, opt, seed=0)
    # with r = 1 every later step is undone, so the final params equal the pinned ones
    plain = tr.train(net, train, val, val, tr.ResetConfig(0.0), tr.OptimizerConfig(batch_size=8, total_iters=100), seed=0)
    np.testing.assert_array_equal(res.final_params.vector, plain.final_params.vector)


def test_metrics_csv(tmp_path):
    net, train, val = small_problem()
    res = tr.train(net, train, val, val, tr.ResetConfig(), tr.OptimizerConfig(total_iters=60), seed=0)
    path = tmp_path / "m.csv"
    res.write_csv(path, "config_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == ",".join(tr.METRIC_COLUMNS)
    assert len(lines) == 2 + 3


def test_divergence_is_reported():
    _, train, val = small_problem()
    net = nn.fcn((6,), 8, 4, batch_norm=False)
    with np.errstate(all="ignore"):
        res = tr.train(net, train, val, val, tr.ResetConfig(), tr.OptimizerConfig(learning_rate=1e300, total_iters=400),
                       seed=0)
    assert res.diverged and "non-finite" in res.error
