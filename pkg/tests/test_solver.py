import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import small_conv_net
from ecc.data import BatchStream
from ecc.energy import BilinearEnergyModel, SimulatedDevice, collect, fit_energy_model, sample_sparsities
from ecc.network import LayerSpec, Network, apply_mask, full_mask, loss_and_grad
from ecc.oracles import ProxInstance, brute_force_prox, prox_objective, random_prox_instance
from ecc.solver import (AdamState, DualState, EnergyConstrainedCompressor, InfeasibleBudgetError,
                        IterationLimitError, SolverConfig, adam_step, calibrate_beta, compress,
                        dual_step, finetune, full_widths, lagrangian_l1, lagrangian_l2, prox_l1,
                        prox_layer, primal_w_step, read_trace, sparsity_step, trim_cap, write_trace)
from ecc.tensor import channel_norms_sq


def model(a0, a):
    return BilinearEnergyModel.from_coefficients(a0, a)


# -- Lagrangian terms --------------------------------------------------------


def test_l1_examples():
    assert lagrangian_l1([3.0, 4.0], [3.0, 4.0], [0.0, 0.0], 1.0) == 0.0
    assert lagrangian_l1([5.0], [3.0], [2.0], 1.0) == 6.0
    assert lagrangian_l1([2.0], [4.0], [1.0], 1.0) == -2.0


def test_l1_accepts_weight_lists():
    net = small_conv_net()
    phi = net.sparsity().astype(float)
    assert lagrangian_l1(net.weights, phi, np.ones(3), 1.0) == 0.0
    assert lagrangian_l1(net, phi - 1, np.zeros(3), 2.0) == 3.0


def test_l2_examples():
    m = model(1.0, [2.0, 3.0])  # E(2, 3, 4) = 49
    assert lagrangian_l2([2, 3, 4], 5.0, 1.0, m, 49.0) == 0.0
    assert lagrangian_l2([2, 3, 4], 2.0, 1.0, m, 40.0) == 58.5
    m30 = model(30.0, [0.0, 0.0])
    assert lagrangian_l2([2, 3, 4], 0.0, 1.0, m30, 40.0) == 0.0


# -- prox ----------------------------------------------------------------------


def norms_layer(a):
    return np.sqrt(np.asarray(a, dtype=np.float64)).reshape(1, -1, 1, 1)


def test_prox_hand_example():
    w = norms_layer([5.0, 0.3, 0.01])
    out, keep = prox_layer(w, np.ones_like(w), 1.0, 0.0, 0.1, 1.0)
    assert keep.tolist() == [True, True, False]
    assert np.array_equal(out[:, :2], w[:, :2]) and np.all(out[:, 2] == 0)
    inst = ProxInstance(w, np.ones_like(w), 1.0, 0.0, 0.1, 1.0)
    assert brute_force_prox(inst)[2].tolist() == keep.tolist()


def test_prox_with_dual_pressure():
    w = norms_layer([5.0, 0.3, 0.01])
    _, keep = prox_layer(w, np.ones_like(w), 1.0, 2.0, 0.1, 1.0)
    assert keep.tolist() == [True, False, False]
    inst = ProxInstance(w, np.ones_like(w), 1.0, 2.0, 0.1, 1.0)
    assert brute_force_prox(inst)[2].tolist() == [True, False, False]


def test_prox_identity_when_slack(rng):
    inst = random_prox_instance(rng, 6, y=0.0, s=6.0)
    out, _ = prox_layer(inst.w_bar, inst.B, inst.s, inst.y, inst.alpha, inst.rho1)
    assert np.array_equal(out, inst.w_bar)


def test_prox_ties_prefer_lower_index():
    w = norms_layer([1.0, 1.0, 1.0])
    # rank 3 faces a higher threshold than ranks 1 and 2
    _, keep = prox_layer(w, np.ones_like(w), 2.0, 0.0, 2.0, 1.0)
    assert keep.tolist() == [True, True, False]


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.sampled_from([1e-3, 1e-1, 1.0]), st.sampled_from([0.0, 0.5, 5.0]),
       st.integers(0, 2 ** 32 - 1), st.data())
def test_prox_matches_brute_force(c, alpha, y, seed, data):
    s = float(data.draw(st.integers(1, c)))
    inst = random_prox_instance(np.random.default_rng(seed), c, alpha=alpha, y=y, s=s)
    out, keep = prox_layer(inst.w_bar, inst.B, inst.s, inst.y, inst.alpha, inst.rho1)
    _, best, best_keep = brute_force_prox(inst)
    assert keep.tolist() == best_keep.tolist()
    assert abs(prox_objective(out, inst) - best) <= 1e-8


def test_prox_l1_checks_shapes():
    w = norms_layer([1.0, 2.0])
    with pytest.raises(ValueError):
        prox_l1([w], [2.0], [0.0, 0.0], 0.1, 1.0, [np.ones_like(w)])


# -- primal step ------------------------------------------------------------


def slack_config(budget=1e9):
    return SolverConfig(budget=budget, alpha=1e-2)


def test_primal_step_equals_adam_when_slack():
    net = small_conv_net(seed=4)
    rng = np.random.default_rng(4)
    X, y = rng.standard_normal((8,) + net.input_shape), rng.integers(0, 3, 8)
    cfg = slack_config()
    a1, a2 = AdamState.from_config(net, cfg), AdamState.from_config(net, cfg)
    prox_net, plain = net, net
    s = full_widths(net.sparsity(), net.n_out)
    for _ in range(3):
        prox_net = primal_w_step(prox_net, X, y, s, np.zeros(3), cfg, a1).network
        plain = adam_step(plain, loss_and_grad(plain, X, y)[1], a2, cfg.alpha)
    for p, q in zip(prox_net.weights + prox_net.biases, plain.weights + plain.biases):
        assert p.tobytes() == q.tobytes()


def test_zero_gradient_step_prunes_like_brute_force():
    # zero input and zero biases: every weight gradient is exactly zero, so W_bar = W
    net = small_conv_net(seed=6)
    net = Network(net.layers, net.weights, [np.zeros_like(b) for b in net.biases], net.input_shape)
    X = np.zeros((4,) + net.input_shape)
    cfg = SolverConfig(budget=1.0, alpha=0.1, rho1=1.0, adam_eps=1e-3)
    y = np.array([0.0, 5.0, 0.5])
    s = np.array([1.0, 2.0, 1.0, 3.0])
    step = primal_w_step(net, X, np.zeros(4, dtype=int), s, y, cfg, AdamState.from_config(net, cfg))
    for u, w in enumerate(net.weights):
        inst = ProxInstance(w, np.full(w.shape, cfg.adam_eps), s[u], y[u], cfg.alpha, cfg.rho1)
        expected, _, _ = brute_force_prox(inst)
        assert np.array_equal(step.network.weights[u], expected)


def test_primal_step_deterministic():
    net = small_conv_net(seed=8)
    rng = np.random.default_rng(8)
    X, y = rng.standard_normal((8,) + net.input_shape), rng.integers(0, 3, 8)
    cfg = SolverConfig(budget=1.0, alpha=0.05)
    s, duals = np.array([1.0, 2.0, 2.0, 3.0]), np.array([0.5, 0.5, 0.5])

    def two_steps():
        adam = AdamState.from_config(net, cfg)
        n = net
        for _ in range(2):
            n = primal_w_step(n, X, y, s, duals, cfg, adam).network
        return n

    a, b = two_steps(), two_steps()
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.weights, b.weights))


# -- width and dual updates ------------------------------------------------


def test_sparsity_step_rests_when_everything_slack():
    m = model(1.0, [2.0, 3.0])
    cfg = SolverConfig(budget=100.0)
    s = np.array([2.0, 3.0, 4.0])
    out = sparsity_step(s, [2.0, 3.0], np.zeros(2), 0.0, m, cfg, np.ones(2), beta=0.1)
    assert np.array_equal(out, s)


def test_sparsity_step_single_layer_example():
    # E(s) = s_1 * 6, slope 6; at s_1 = 10 the estimate is 60 against a budget of 51
    m = model(0.0, [1.0])
    cfg = SolverConfig(budget=51.0, rho2=1.0)
    out = sparsity_step(np.array([10.0, 6.0]), [10.0], np.zeros(1), 1.0, m, cfg, np.ones(1), 0.1)
    assert out.tolist() == [4.0, 6.0]
    cfg = SolverConfig(budget=9.0, rho2=1.0)
    out = sparsity_step(np.array([3.0, 6.0]), [3.0], np.zeros(1), 1.0, m, cfg, np.ones(1), 0.1)
    assert out.tolist() == [1.0, 6.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=3, max_size=3), st.lists(st.floats(1, 40), min_size=3, max_size=3),
       st.lists(st.floats(0, 10), min_size=3, max_size=3), st.floats(0, 1e3), st.floats(1e-4, 10))
def test_sparsity_step_bounds(coef, s, y, z, beta):
    m = model(0.1, coef)
    s = np.array(s + [10.0])
    lb = np.minimum(np.floor(s[:-1]), 2.0)
    cfg = SolverConfig(budget=50.0)
    phi = np.ceil(s[:-1])
    out = sparsity_step(s, phi, np.array(y), z, m, cfg, lb, beta)
    assert np.all(out[:-1] <= s[:-1]) and np.all(out[:-1] >= lb) and out[-1] == s[-1]


def test_dual_examples():
    cfg = SolverConfig(budget=1e9, rho1=1.0, rho2=1.0)
    out = dual_step([4.0], np.array([6.0, 1.0]), DualState(np.array([0.5]), 0.0), model(0.0, [0.0]), cfg)
    assert out.y.tolist() == [0.0]
    m = model(1.0, [2.0, 3.0])
    s = np.array([2.0, 3.0, 4.0])
    out = dual_step([2.0, 3.0], s, DualState(np.zeros(2), 0.0), m, SolverConfig(budget=40.0, rho2=1.0))
    assert out.z == 9.0
    out = dual_step([2.0, 3.0], s, DualState(np.zeros(2), 0.0), m, SolverConfig(budget=60.0, rho2=1.0))
    assert out.z == 0.0


def test_z_projection_guarantees_progress():
    # rho2 tiny so plain ascent alone would leave the gradient below epsilon
    m = model(0.0, [1e-3, 1e-3])
    cfg = SolverConfig(budget=0.05, rho2=1e-6, epsilon=1e-2)
    s = np.array([8.0, 8.0, 2.0])
    duals = dual_step([8.0, 8.0], s, DualState(np.zeros(2), 0.0), m, cfg, None, np.ones(2))
    from ecc.solver import s_gradient
    g = s_gradient(s, np.array([8.0, 8.0]), duals.y, duals.z, m, cfg)
    assert g.max() == pytest.approx(cfg.epsilon, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_duals_stay_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = model(rng.uniform(0, 1), rng.uniform(0, 1, 3))
    cfg = SolverConfig(budget=float(rng.uniform(1, 200)), rho1=float(rng.uniform(0.1, 10)),
                       rho2=float(rng.uniform(0.1, 10)))
    s = np.append(rng.uniform(1, 20, 3), 10.0)
    phi = rng.integers(1, 21, 3).astype(float)
    out = dual_step(phi, s, DualState(rng.uniform(-1, 5, 3).clip(0), float(rng.uniform(0, 5))), m, cfg,
                    [rng.uniform(0, 1, 20) for _ in range(3)], np.ones(3))
    assert np.all(out.y >= 0) and out.z >= 0


def test_trim_cap_keeps_floor_s_channels(rng):
    for _ in range(200):
        c = int(rng.integers(1, 10))
        inst = random_prox_instance(rng, c)
        a = channel_norms_sq(inst.w_bar, inst.B)
        s = float(rng.uniform(1, c + 0.99))
        cap = trim_cap(a, s, inst.alpha)
        _, keep = prox_layer(inst.w_bar, inst.B, s, cap, inst.alpha, inst.rho1)
        if np.count_nonzero(a) >= int(s):
            assert keep.sum() >= int(s)


# -- the loop -----------------------------------------------------------------


def tiny_problem(seed=0):
    layers = [LayerSpec("fc", 12, 6, name="h1"), LayerSpec("fc", 10, 12, name="h2"),
              LayerSpec("fc", 3, 10, activation="none", name="o")]
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((300, 6))
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0.5)
    net = Network.init(layers, (6,), seed=seed)
    adam = AdamState(net)
    stream = BatchStream(X, y, 32, seed=seed)
    for _ in range(200):
        xb, yb = next(stream)
        net = adam_step(net, loss_and_grad(net, xb, yb)[1], adam, 1e-2)
    dev = SimulatedDevice(1e-3, [2e-4, 1e-4, 3e-4], noise=0.0)
    samples = collect(dev, sample_sparsities([6, 12, 10], 3, 200, seed=seed))
    emodel, _, _ = fit_energy_model(samples, n_iter=3000)
    return net, emodel, X, y


@pytest.fixture(scope="module")
def problem():
    return tiny_problem()


def test_compress_small_net_to_sixty_percent(problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    cfg = SolverConfig(budget=0.6 * dense_e, max_iter=600, alpha=1e-2)
    res = compress(net, emodel, cfg, BatchStream(X, y, 32, seed=1))
    phi = res.network.sparsity()
    assert emodel.energy(res.s) <= cfg.budget
    assert np.all(phi <= res.s[:-1])
    S = np.array([row.s for row in res.trace])
    E = np.array([row.energy for row in res.trace])
    assert np.all(np.diff(S, axis=0) <= 0) and np.all(np.diff(E) <= 0)
    assert all(row.max_y >= 0 and row.z >= 0 for row in res.trace)


def test_compress_with_loose_budget_is_a_no_op(problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    res = compress(net, emodel, SolverConfig(budget=1.1 * dense_e), BatchStream(X, y, 32))
    assert res.iterations == 0
    assert all(np.array_equal(a, b) for a, b in zip(res.network.weights, net.weights))


def test_compress_rejects_infeasible_budget(problem):
    net, emodel, X, y = problem
    calls = []

    def stream():
        calls.append(1)
        yield X[:32], y[:32]

    with pytest.raises(InfeasibleBudgetError) as info:
        compress(net, emodel, SolverConfig(budget=emodel.intercept_ * 0.5), stream())
    assert not calls and info.value.min_energy > info.value.budget


def test_iteration_cap_reports_trace(problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    cfg = SolverConfig(budget=0.5 * dense_e, max_iter=3, beta=1e-12)
    with pytest.raises(IterationLimitError) as info:
        compress(net, emodel, cfg, BatchStream(X, y, 32))
    assert len(info.value.trace) == 4


def test_calibrated_beta_hits_target_fraction(problem):
    net, emodel, _, _ = problem
    from ecc.solver import _dry_run
    s0 = full_widths(net.sparsity(), net.n_out)
    cfg = SolverConfig(budget=0.6 * emodel.energy(s0), max_iter=500)
    lb = np.ones(3)
    beta = calibrate_beta(emodel, s0, lb, cfg)
    n = _dry_run(beta, emodel, s0, lb, cfg, 10 ** 6)
    assert n <= 400 and _dry_run(beta * 0.9, emodel, s0, lb, cfg, 10 ** 6) >= n


def test_lower_bounds_respected(problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    cfg = SolverConfig(budget=0.7 * dense_e, lower_bound_fraction=0.35, max_iter=600, alpha=1e-2)
    res = compress(net, emodel, cfg, BatchStream(X, y, 32, seed=2))
    assert np.all(res.s[:-1] >= np.ceil(0.35 * np.array([6, 12, 10])))


def test_finetune_zero_iterations_and_overfit():
    net = small_conv_net(seed=3)
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((16,) + net.input_shape), rng.integers(0, 3, 16)
    mask = full_mask(net)
    mask[1][1] = False
    net = apply_mask(net, mask)
    same = finetune(net, mask, BatchStream(X, y, 16), 0)
    assert all(np.array_equal(a, b) for a, b in zip(same.weights, net.weights))
    history = []
    tuned = finetune(net, mask, BatchStream(X, y, 16), 200, lr=1e-3, history=history)
    assert np.all(np.diff(history) <= 1e-12)
    assert np.all(tuned.weights[1][:, 1] == 0)


def test_finetune_refuses_inconsistent_mask():
    net = small_conv_net()
    mask = full_mask(net)
    mask[0][0] = False
    with pytest.raises(ValueError):
        finetune(net, mask, iter([]), 1)


def test_trace_round_trip(tmp_path, problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    res = compress(net, emodel, SolverConfig(budget=0.8 * dense_e, max_iter=600, alpha=1e-2),
                   BatchStream(X, y, 32))
    path = tmp_path / "trace.tsv"
    write_trace(path, res.trace, ["h1", "h2", "o"], {"seed": 0})
    back = read_trace(path)
    assert [r.s for r in back] == [r.s for r in res.trace]
    assert [r.phi for r in back] == [r.phi for r in res.trace]


def test_estimator_api(problem):
    net, emodel, X, y = problem
    dense_e = emodel.energy(full_widths(net.sparsity(), net.n_out))
    est = EnergyConstrainedCompressor(network=net, energy_model=emodel, budget=0.8 * dense_e,
                                      alpha=1e-2, max_iter=600, finetune_iters=20)
    assert clone(est).get_params()["budget"] == est.budget
    est.fit(X, y)
    assert est.energy() <= est.budget
    assert est.predict(X).shape == (300,)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(budget=1.0, alpha=0.0)
    with pytest.raises(ValueError):
        SolverConfig(budget=1.0, lower_bounds=[0, 1])
    with pytest.raises(ValueError):
        SolverConfig(budget=1.0, lower_bounds=[5]).resolve_lower_bounds([3])
