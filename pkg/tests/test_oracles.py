import numpy as np
import pytest

from ecc.oracles import (ProxInstance, brute_force_prox, finite_diff_grad, prox_objective,
                         random_prox_instance)


def instance_from_norms(a, alpha, y, s, rho1=1.0):
    w = np.sqrt(np.asarray(a, dtype=np.float64)).reshape(1, -1, 1, 1)
    return ProxInstance(w, np.ones_like(w), s, y, alpha, rho1)


def test_inactive_constraint_gives_identity(rng):
    inst = random_prox_instance(rng, 5, y=0.0, s=5.0)
    w, obj, keep = brute_force_prox(inst)
    assert obj == 0.0 and np.array_equal(w, inst.w_bar)


def test_hand_checked_pattern():
    w, obj, keep = brute_force_prox(instance_from_norms([5.0, 0.3, 0.01], 0.1, 0.0, 1.0))
    assert keep.tolist() == [True, True, False]
    # zeroing the smallest channel costs 0.005 and saves alpha * rho1/2 * (3-1)^2 - ...
    assert obj == pytest.approx(0.5 * 0.01 + 0.1 * 0.5 * 1.0, abs=1e-15)


def test_vanishing_penalty_gives_identity(rng):
    for _ in range(10):
        inst = random_prox_instance(rng, 6, alpha=1e-14, y=5.0, s=1.0)
        w, _, _ = brute_force_prox(inst)
        assert np.array_equal(w, inst.w_bar)


def test_brute_force_size_limit(rng):
    with pytest.raises(ValueError):
        brute_force_prox(random_prox_instance(rng, 13))


def test_objective_matches_definition():
    inst = instance_from_norms([4.0, 1.0], 0.5, 1.0, 1.0, rho1=2.0)
    w = inst.w_bar.copy()
    w[:, 1] = 0.0
    assert prox_objective(w, inst) == pytest.approx(0.5 * 1.0 + 0.5 * 0.0)
    assert prox_objective(inst.w_bar, inst) == pytest.approx(0.5 * (0.5 * 2.0 + 1.0))


def test_instance_serialisation(rng):
    inst = random_prox_instance(rng, 4)
    back = ProxInstance.from_dict(inst.to_dict())
    assert np.array_equal(back.w_bar, inst.w_bar) and back.s == inst.s


def test_finite_differences_exact_on_quadratics():
    assert finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-9)
    assert np.all(finite_diff_grad(lambda x: 4.0, np.ones(3)) == 0.0)


def test_finite_differences_reject_bad_input():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), h=0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: float("nan"), np.ones(2))
