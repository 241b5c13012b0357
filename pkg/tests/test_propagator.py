import numpy as np
import pytest

import oracles
from lindbladfit.generators import LindbladField, ModelSpec, raw_from_rates
from lindbladfit.propagator import (
    A, B, B_ERR, C, IntegrationError, IntegratorConfig, dense_weights, evolve, evolve_with_gradient,
    finite_diff_gradient,
)
from lindbladfit.spinops import random_density_matrix

TIMES = np.linspace(0.1, 1.0, 10)
TIGHT = IntegratorConfig(rtol=1e-10, atol=1e-12)
PLUS = np.full((2, 2), 0.5, dtype=complex)
ONE = np.diag([0.0, 1.0]).astype(complex)


class ZeroField:
    n_params = 0

    def __call__(self, y):
        return np.zeros_like(y)


def dephasing_field(gamma):
    model = ModelSpec.create("superconducting", "phase", 1)
    return LindbladField(model, [0.0], raw_from_rates([gamma]))


def decay_field(gamma):
    model = ModelSpec.create("superconducting", "thermal", 1)
    return LindbladField(model, [0.0], [raw_from_rates([gamma])[0], -800.0])


def linear_loss(observables):
    """``sum_t Re tr(A_t rho(t))`` with Hermitian ``A_t``; cotangents are ``A_t``."""

    def loss_fn(states):
        return float(np.einsum("tab,tba->", observables, states).real), observables.copy()

    return loss_fn


def random_observables(d, n_times, rng):
    a = rng.normal(size=(n_times, d, d)) + 1j * rng.normal(size=(n_times, d, d))
    return a + a.conj().transpose(0, 2, 1)


def test_tableau_consistency():
    assert np.allclose(A.sum(axis=1), C, atol=1e-14)
    assert B.sum() == pytest.approx(1.0, abs=1e-14)
    assert abs(B_ERR.sum()) < 1e-14
    # fifth-order quadrature conditions sum_i b_i c_i^(k-1) = 1/k
    for k in range(1, 6):
        assert B @ C ** (k - 1) == pytest.approx(1 / k, abs=1e-12)
    assert np.allclose(dense_weights(1.0), B, atol=1e-12)
    assert np.allclose(dense_weights(0.0), 0.0)


def test_zero_field_is_identity():
    rho0 = random_density_matrix(2, np.random.default_rng(0))
    traj = evolve(ZeroField(), rho0, TIMES)
    for s in traj.states:
        assert np.allclose(s, rho0, atol=1e-15)


def test_dephasing_analytic_endpoint():
    traj = evolve(dephasing_field(0.5), PLUS, [1.0])
    expected = oracles.dephasing_coherence(0.5, 0.5, 1.0)
    assert expected == pytest.approx(0.18393972058572117, abs=1e-15)
    assert abs(traj.states[-1][0, 1] - expected) <= 1e-6


def test_amplitude_damping_analytic_endpoint():
    traj = evolve(decay_field(1.0), ONE, [1.0])
    assert abs(traj.states[-1][1, 1].real - np.exp(-1.0)) <= 1e-6


def test_dense_output_matches_analytic_solution_between_steps():
    times = np.linspace(0.013, 2.0, 57)
    traj = evolve(dephasing_field(0.8), PLUS, times)
    exact = oracles.dephasing_coherence(0.5, 0.8, times)
    assert np.max(np.abs(traj.states[:, 0, 1] - exact)) < 1e-6
    assert traj.n_steps == 0  # nothing recorded unless asked


def test_tighter_tolerance_reduces_error():
    errs = []
    for rtol, atol in [(1e-4, 1e-6), (5e-5, 5e-7), (1e-6, 1e-8)]:
        traj = evolve(dephasing_field(0.5), PLUS, [1.0], IntegratorConfig(rtol=rtol, atol=atol))
        errs.append(abs(traj.states[-1][0, 1] - 0.5 * np.exp(-1.0)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-6


@pytest.mark.parametrize("fam,noise,n", [("xyz", "thermal", 2), ("rydberg", "combined", 3),
                                         ("superconducting", "phase", 2), ("pxp", "thermal", 3)])
def test_matches_matrix_exponential_and_keeps_trace(fam, noise, n):
    rng = np.random.default_rng(n)
    model = ModelSpec.create(fam, noise, n)
    th, tl = rng.uniform(-1, 1, model.n_h), rng.uniform(-1, 1, model.n_l)
    rho0 = random_density_matrix(n, rng)
    cfg = IntegratorConfig()
    traj = evolve(LindbladField(model, th, tl), rho0, TIMES, cfg)
    if n == 2:
        sup = oracles.liouvillian(oracles.hamiltonian_n2(fam, th), oracles.jumps(noise, n), oracles.softplus(tl))
    else:
        h = LindbladField(model, th, tl)._h  # structure already checked against the oracle at N=2
        sup = oracles.liouvillian(h, oracles.jumps(noise, n), oracles.softplus(tl))
    for s, e in zip(traj.states, oracles.exact_states(sup, rho0, TIMES)):
        assert np.max(np.abs(s - e)) < 1e-6
    drift = np.abs(np.trace(traj.raw_states, axis1=1, axis2=2) - 1)
    assert drift.max() <= 10 * cfg.atol
    for s in traj.states:
        assert abs(np.trace(s) - 1) <= 1e-10
        assert np.max(np.abs(s - s.conj().T)) <= 1e-10
        assert np.linalg.eigvalsh(s)[0] >= -1e-7


def test_evolve_is_bitwise_deterministic():
    rng = np.random.default_rng(4)
    model = ModelSpec.create("xyz", "combined", 3)
    f = LindbladField(model, rng.uniform(-1, 1, model.n_h), rng.uniform(-1, 1, model.n_l))
    rho0 = random_density_matrix(3, rng)
    a, b = evolve(f, rho0, TIMES, record=True), evolve(f, rho0, TIMES, record=True)
    assert np.array_equal(a.states, b.states)
    assert [s.h for s in a.steps] == [s.h for s in b.steps]


def test_output_at_time_zero():
    rho0 = random_density_matrix(1, np.random.default_rng(2))
    traj = evolve(dephasing_field(0.3), rho0, [0.0, 0.5])
    assert np.allclose(traj.states[0], rho0, atol=1e-15)


def test_input_validation_and_failures():
    with pytest.raises(ValueError):
        evolve(ZeroField(), PLUS, [0.5, 0.2])
    with pytest.raises(ValueError):
        evolve(ZeroField(), PLUS, [-0.1, 0.2])
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=0)
    with pytest.raises(ValueError):
        IntegratorConfig(max_steps=0)
    with pytest.raises(IntegrationError, match="max_steps"):
        evolve(dephasing_field(0.5), PLUS, [100.0], IntegratorConfig(max_steps=3))
    with pytest.raises(IntegrationError, match="underflow"):
        evolve(dephasing_field(0.5), PLUS, [1.0], IntegratorConfig(dt0=1e-13))


def test_gradient_of_unused_parameters_is_zero():
    model = ModelSpec.create("xyz", "thermal", 2)
    f = LindbladField(model, np.zeros(model.n_h), np.full(model.n_l, -800.0))
    rho0 = random_density_matrix(2, np.random.default_rng(1))
    obs = random_observables(4, len(TIMES), np.random.default_rng(2))
    _, grad, _ = evolve_with_gradient(f, rho0, TIMES, linear_loss(obs))
    # at H = 0 and vanishing rates the field is zero; the rate gradient carries the sigmoid factor e^-800
    assert np.all(np.abs(grad[model.n_h:]) == 0)


def test_dephasing_population_loss_has_zero_rate_gradient():
    obs = np.zeros((1, 2, 2), dtype=complex)
    obs[0, 0, 0] = 1.0
    _, grad, _ = evolve_with_gradient(dephasing_field(0.5), PLUS, [0.7], linear_loss(obs))
    assert abs(grad[1]) < 1e-14


def _fd_check(model, th, tl, rho0, obs, cfg):
    def loss_of(p):
        f = LindbladField(model, p[:model.n_h], p[model.n_h:])
        return linear_loss(obs)(evolve(f, rho0, TIMES, cfg).states)[0]

    p0 = np.concatenate([th, tl])
    _, grad, _ = evolve_with_gradient(LindbladField(model, th, tl), rho0, TIMES, linear_loss(obs), cfg)
    fd = finite_diff_gradient(loss_of, p0, h=1e-5)
    return grad, fd


@pytest.mark.parametrize("dense", [True, False])
def test_gradient_matches_finite_differences(dense):
    rng = np.random.default_rng(7)
    model = ModelSpec.create("xyz", "thermal", 2)
    th, tl = rng.uniform(-1, 1, model.n_h), rng.uniform(-1, 1, model.n_l)
    rho0 = random_density_matrix(2, rng)
    obs = random_observables(4, len(TIMES), rng)
    LindbladField.superop_max_qubits, saved = (4 if dense else 0), LindbladField.superop_max_qubits
    try:
        grad, fd = _fd_check(model, th, tl, rho0, obs, TIGHT)
    finally:
        LindbladField.superop_max_qubits = saved
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-8)


def test_gradient_with_respect_to_initial_state():
    from lindbladfit.propagator import backward
    from lindbladfit.spinops import project_physical_vjp

    rng = np.random.default_rng(3)
    model = ModelSpec.create("rydberg", "thermal", 2)
    f = LindbladField(model, rng.uniform(-1, 1, model.n_h), rng.uniform(-1, 1, model.n_l))
    rho0 = random_density_matrix(2, rng)
    obs = random_observables(4, 3, rng)
    times = [0.2, 0.5, 0.9]
    traj = evolve(f, rho0, times, TIGHT, record=True)
    raw_cts = np.stack([project_physical_vjp(m, c) for m, c in zip(traj.raw_states, obs)])
    _, ybar = backward(f, traj, raw_cts)
    e = np.zeros((4, 4), dtype=complex)
    e[1, 2] = 1e-6
    up = linear_loss(obs)(evolve(f, rho0 + e, times, TIGHT).states)[0]
    dn = linear_loss(obs)(evolve(f, rho0 - e, times, TIGHT).states)[0]
    assert (up - dn) / 2e-6 == pytest.approx(ybar[1 * 4 + 2].real, rel=1e-5)


def test_finite_diff_gradient_examples():
    g = finite_diff_gradient(lambda p: float(p[0] ** 2), np.array([3.0]), h=1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)
    assert np.array_equal(finite_diff_gradient(lambda p: 0.0, np.ones(4)), np.zeros(4))
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda p: 0.0, np.ones(2), h=0.0)


def test_trajectory_csv(tmp_path):
    traj = evolve(dephasing_field(0.5), PLUS, [0.5, 1.0])
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "t,c0,c1,c2,c3"
    vals = [float(x) for x in rows[2].split(",")]
    # X coordinate of the coherence decays as e^{-2 gamma t}
    assert vals[0] == 1.0 and vals[1] == 0.5 and vals[2] == pytest.approx(0.5 * np.exp(-1.0), abs=1e-6)
