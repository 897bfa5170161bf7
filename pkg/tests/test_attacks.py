import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advens.attacks import (
    EVAL_RESTARTS,
    EVAL_STEPS,
    TRAIN_RESTARTS,
    TRAIN_STEPS,
    AttackConfig,
    LinearPredictor,
    batch_loss,
    pgd_attack,
    pgd_attack_batch,
    project_l2,
    random_ball_point,
    worst_case_linear,
)
from advens.autodiff import Tensor
from advens.errors import ContractError, NumericError
from advens.models import Architecture

from gradcases import random_model


def ce(predictor, x, y):
    return float(batch_loss(predictor, np.atleast_2d(x), np.atleast_1d(y))[0])


def test_project_inside_ball_unchanged():
    np.testing.assert_array_equal(project_l2(np.array([3.0, 4.0]), 10.0), [3, 4])


def test_project_rescales():
    np.testing.assert_allclose(project_l2(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=0, atol=1e-15)


def test_project_zero():
    np.testing.assert_array_equal(project_l2(np.zeros(3), 0.7), np.zeros(3))


def test_project_rows_independent():
    d = np.array([[3.0, 4.0], [0.3, 0.4]])
    np.testing.assert_allclose(project_l2(d, 1.0), [[0.6, 0.8], [0.3, 0.4]], atol=1e-15)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)), st.floats(0, 10))
def test_project_feasible_and_idempotent(d, eps):
    p = project_l2(d, eps)
    assert np.linalg.norm(p) <= eps * (1 + 1e-12) + 1e-300
    np.testing.assert_allclose(project_l2(p, eps), p, rtol=1e-12, atol=1e-300)


def test_defaults():
    assert (TRAIN_STEPS, TRAIN_RESTARTS, EVAL_STEPS, EVAL_RESTARTS) == (10, 1, 50, 3)
    cfg = AttackConfig.evaluation(0.5)
    assert cfg.effective_step_size == pytest.approx(2.5 * 0.5 / 50)
    assert AttackConfig.training(0.2).steps == 10


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ContractError):
        AttackConfig(steps=0)
    with pytest.raises(ContractError):
        AttackConfig(restarts=0)


def test_random_ball_points_inside():
    rng = np.random.default_rng(0)
    pts = random_ball_point(rng, 7, 0.3, n=2000)
    assert np.all(np.linalg.norm(pts, axis=1) <= 0.3 * (1 + 1e-12))
    # uniform in the ball: P(r <= eps/2) = 2^-d
    assert np.mean(np.linalg.norm(pts, axis=1) <= 0.15) < 0.05


def test_zero_radius_returns_zero():
    rng = np.random.default_rng(1)
    model = random_model(Architecture(3, (4,), 2), rng)
    delta = pgd_attack(model, rng.uniform(size=3), 1, AttackConfig.evaluation(0.0))
    np.testing.assert_array_equal(delta, np.zeros(3))


def test_worst_case_linear_geometry():
    w, x = np.array([1.0, 0.0]), np.array([2.0, 0.0])
    delta = worst_case_linear(w, 0.0, x, 0, 1.0)
    np.testing.assert_array_equal(delta, [-1.0, 0.0])
    f = LinearPredictor(w)
    assert f.margin(x, 0)[0] == 2.0
    assert f.margin(x + delta, 0)[0] == 1.0


def test_worst_case_linear_zero_radius():
    np.testing.assert_array_equal(worst_case_linear([1.0, 2.0], 0.5, [0.1, 0.2], 1, 0.0), [0.0, 0.0])


def test_worst_case_linear_rejects_zero_w():
    with pytest.raises(ContractError):
        worst_case_linear([0.0, 0.0], 0.0, [1.0, 1.0], 0, 1.0)


def test_worst_case_linear_beats_brute_force_directions():
    rng = np.random.default_rng(7)
    for _ in range(3):
        w, x, b = rng.normal(size=3), rng.normal(size=3), rng.normal()
        y = int(rng.integers(2))
        f = LinearPredictor(w, b)
        best = ce(f, x + worst_case_linear(w, b, x, y, 0.5), y)
        dirs = rng.normal(size=(10**6, 3))
        dirs *= 0.5 / np.linalg.norm(dirs, axis=1, keepdims=True)
        score = (x + dirs) @ w + b
        margin = score if y == 0 else -score
        sweep = np.logaddexp(0.0, -margin)
        assert sweep.max() <= best + 1e-6


def test_pgd_matches_linear_oracle():
    rng = np.random.default_rng(3)
    for i in range(20):
        w, x, b = rng.normal(size=5), rng.normal(size=5), rng.normal()
        y, eps = int(rng.integers(2)), float(rng.uniform(0.1, 1.0))
        f = LinearPredictor(w, b)
        base = ce(f, x, y)
        oracle = ce(f, x + worst_case_linear(w, b, x, y, eps), y)
        found = ce(f, x + pgd_attack(f, x, y, AttackConfig.evaluation(eps, seed=i)), y)
        assert found - base >= 0.99 * (oracle - base)


def test_pgd_feasible_and_never_below_start():
    rng = np.random.default_rng(4)
    model = random_model(Architecture(4, (6,), 3), rng)
    for i in range(50):
        x, y = rng.uniform(size=4), int(rng.integers(3))
        eps = float(rng.uniform(0.01, 2.0))
        start = random_ball_point(rng, 4, eps)
        delta = pgd_attack(model, x, y, AttackConfig(eps, steps=5, restarts=2, seed=i), start=start)
        assert np.linalg.norm(delta) <= eps * (1 + 1e-12)
        assert ce(model, x + delta, y) >= ce(model, x + start, y) - 1e-9


def test_pgd_deterministic():
    rng = np.random.default_rng(5)
    model = random_model(Architecture(4, (6,), 3), rng)
    x = rng.uniform(size=(8, 4))
    y = rng.integers(3, size=8)
    cfg = AttackConfig.evaluation(0.3, seed=17)
    a, la = pgd_attack_batch(model, x, y, cfg, seeds=list(range(8)))
    b, lb = pgd_attack_batch(model, x, y, cfg, seeds=list(range(8)))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)


def test_batch_rows_are_independent_attacks():
    rng = np.random.default_rng(6)
    model = random_model(Architecture(4, (6,), 3), rng)
    x = rng.uniform(size=(5, 4))
    y = rng.integers(3, size=5)
    cfg = AttackConfig(0.4, steps=8, restarts=2)
    seeds = [11, 12, 13, 14, 15]
    batch, _ = pgd_attack_batch(model, x, y, cfg, seeds=seeds)
    for i in range(5):
        single, _ = pgd_attack_batch(model, x[i:i + 1], y[i:i + 1], cfg, seeds=[seeds[i]])
        np.testing.assert_allclose(batch[i], single[0], rtol=0, atol=1e-13)


def test_returned_loss_is_loss_at_delta():
    rng = np.random.default_rng(8)
    model = random_model(Architecture(4, (6,), 3), rng)
    x = rng.uniform(size=(6, 4))
    y = rng.integers(3, size=6)
    delta, loss = pgd_attack_batch(model, x, y, AttackConfig(0.2, steps=4, restarts=1))
    np.testing.assert_allclose(loss, batch_loss(model, x + delta, y), rtol=0, atol=1e-14)


def test_nested_start_gives_monotone_loss():
    rng = np.random.default_rng(9)
    model = random_model(Architecture(4, (8,), 3), rng)
    x = rng.uniform(size=(30, 4))
    y = rng.integers(3, size=30)
    prev_delta, prev_loss = None, None
    for eps in (0.05, 0.1, 0.2, 0.4):
        delta, loss = pgd_attack_batch(model, x, y, AttackConfig(eps, steps=5, restarts=1), start=prev_delta)
        if prev_loss is not None:
            assert np.all(loss >= prev_loss - 1e-9)
        prev_delta, prev_loss = delta, loss


def test_clip_keeps_inputs_in_range():
    rng = np.random.default_rng(10)
    model = random_model(Architecture(4, (6,), 2), rng)
    x = rng.uniform(size=(10, 4))
    y = rng.integers(2, size=10)
    delta, _ = pgd_attack_batch(model, x, y, AttackConfig(0.8, steps=5, clip=(0.0, 1.0)))
    assert np.all(x + delta >= 0.0) and np.all(x + delta <= 1.0)
    assert np.all(np.linalg.norm(delta, axis=1) <= 0.8 * (1 + 1e-12))


def test_nonfinite_loss_raises():
    def broken(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return Tensor(np.full((x.shape[0], 2), np.nan))

    with pytest.raises(NumericError, match="step 0"):
        pgd_attack_batch(broken, np.zeros((1, 2)), np.array([0]), AttackConfig(0.1, steps=2, restarts=1))


def test_seed_count_checked():
    model = random_model(Architecture(2, (3,), 2), np.random.default_rng(0))
    with pytest.raises(ContractError):
        pgd_attack_batch(model, np.zeros((3, 2)), np.zeros(3, dtype=int), AttackConfig(0.1), seeds=[1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 3.0))
def test_feasibility_property(seed, eps):
    rng = np.random.default_rng(seed)
    model = random_model(Architecture(3, (4,), 2), rng)
    x = rng.uniform(size=3)
    delta = pgd_attack(model, x, int(rng.integers(2)), AttackConfig(eps, steps=3, restarts=1, seed=seed))
    assert np.linalg.norm(delta) <= eps * (1 + 1e-12)
