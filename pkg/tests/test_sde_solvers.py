import math

import numpy as np
import pytest

from diffsolve.errors import GridError
from diffsolve.models import PredictionModel
from diffsolve.ode_solvers import (
    SolverSpec,
    StepState,
    ddim_eta_step,
    dpm_pp_2m_step,
    sample,
    sde_equivalent_eta,
    step_coeffs,
)
from diffsolve.oracle import GaussianOracle
from diffsolve.schedule import make_time_grid, vp_cosine, vp_linear_beta
from diffsolve.sde_solvers import (
    NoiseStream,
    run_sde,
    sde_1_step,
    sde_2m_correction_coeff,
    sde_2m_step,
    sde_pp_1_step,
    sde_pp_2m_correction_coeff,
    sde_pp_2m_step,
)

SCHED = vp_linear_beta()
ORACLE = GaussianOracle.isotropic(1.0, 0.5, 4)
X = np.array([0.3, -1.0, 2.0, 0.5])


def const(kind, c, dim=4):
    return PredictionModel(kind, lambda x, t: np.broadcast_to(c, np.shape(x)).copy(), dim)


def lambda_linear(kind, a, b, dim=1):
    return PredictionModel(kind, lambda x, t: np.full(np.shape(x), a + b * SCHED.lambda_of(t)), dim)


def _h(t_s, t_t):
    return SCHED.lambda_of(t_t) - SCHED.lambda_of(t_s)


# -- first order ----------------------------------------------------------------------------


def test_sde_1_zero_noise_zero_model():
    a_s, _, _ = SCHED.alpha_sigma_lambda(0.7)
    a_t, _, _ = SCHED.alpha_sigma_lambda(0.2)
    out = sde_1_step(X, const("noise_prediction", 0.0), 0.7, 0.2, np.zeros(4), SCHED)
    assert np.allclose(out, a_t / a_s * X, rtol=1e-14)


@pytest.mark.parametrize("step", [sde_1_step, sde_pp_1_step])
def test_first_order_zero_step_is_identity(step):
    assert np.array_equal(step(X, ORACLE.data_model(SCHED), 0.4, 0.4, np.ones(4), SCHED), X)


@pytest.mark.parametrize(
    "step,kind,scale",
    [
        (sde_1_step, "noise_prediction", lambda h: math.sqrt(math.exp(2 * h) - 1)),
        (sde_pp_1_step, "data_prediction", lambda h: math.sqrt(1 - math.exp(-2 * h))),
    ],
)
def test_first_order_noise_scale_monte_carlo(step, kind, scale):
    t_s, t_t = 0.5, 0.4
    model = const(kind, 0.3, 1)
    z = NoiseStream(0).draw((100_000, 1))
    noise = step(np.zeros((100_000, 1)), model, t_s, t_t, z, SCHED) - step(np.zeros(1), model, t_s, t_t, None, SCHED)
    _, sigma_t, _ = SCHED.alpha_sigma_lambda(t_t)
    assert np.std(noise) == pytest.approx(sigma_t * scale(_h(t_s, t_t)), rel=0.01)


def test_sde_pp_1_equals_stochastic_ddim():
    rng = np.random.default_rng(4)
    dev = 0.0
    for _ in range(100):
        sched = [vp_linear_beta(), vp_cosine()][rng.integers(2)]
        t_s, t_t = sorted(rng.uniform(sched.t_min, sched.t_max, 2), reverse=True)
        oracle = GaussianOracle(rng.normal(size=4), rng.uniform(0.2, 2))
        x, z = rng.normal(size=4), rng.normal(size=4)
        eta = sde_equivalent_eta(sched, t_s, t_t)
        a = sde_pp_1_step(x, oracle.data_model(sched), t_s, t_t, z, sched)
        b = ddim_eta_step(x, oracle.data_model(sched), t_s, t_t, eta, z, sched)
        dev = max(dev, np.max(np.abs(a - b)))
    assert dev < 1e-12


def test_sde_pp_1_large_h_limit():
    # over the whole interval h is about 9.6: x_s is forgotten and x0 carries weight alpha_t
    zero = sde_pp_1_step(np.zeros(4), const("data_prediction", 0.0), 1.0, 0.001, None, SCHED)
    x_coef = sde_pp_1_step(np.ones(4), const("data_prediction", 0.0), 1.0, 0.001, None, SCHED) - zero
    x0_coef = sde_pp_1_step(np.zeros(4), const("data_prediction", 1.0), 1.0, 0.001, None, SCHED)
    a_t, s_t, _ = SCHED.alpha_sigma_lambda(0.001)
    _, s_s, _ = SCHED.alpha_sigma_lambda(1.0)
    h = _h(1.0, 0.001)
    assert np.allclose(x_coef, s_t / s_s * math.exp(-h), rtol=1e-10)
    assert np.all(np.abs(x_coef) < 1e-6)
    assert np.allclose(x0_coef, a_t, rtol=1e-8)


# -- affine skeletons -----------------------------------------------------------------------


@pytest.mark.parametrize("t_s,t_t", [(0.9, 0.8), (0.5, 0.1), (1.0, 0.001)])
def test_first_order_skeletons_are_affine_with_stated_coefficients(t_s, t_t):
    a_s, s_s, _ = SCHED.alpha_sigma_lambda(t_s)
    a_t, s_t, _ = SCHED.alpha_sigma_lambda(t_t)
    h, c = _h(t_s, t_t), 0.7
    cases = [
        (sde_1_step, "noise_prediction", a_t / a_s, -2 * s_t * (math.exp(h) - 1) * c),
        (sde_pp_1_step, "data_prediction", s_t / s_s * math.exp(-h), a_t * (1 - math.exp(-2 * h)) * c),
    ]
    for step, kind, lin, shift in cases:
        model = const(kind, c)
        at0 = step(np.zeros(4), model, t_s, t_t, None, SCHED)
        assert np.allclose(at0, shift, rtol=1e-12, atol=1e-15)
        for j in range(4):
            e = np.eye(4)[j]
            assert np.allclose(step(e, model, t_s, t_t, None, SCHED) - at0, lin * e, rtol=1e-12, atol=1e-15)


def _affine_sde_pp(grid, oracle, second_order):
    """Independent propagation of x = a * x_T + b * mu under the z = 0 skeleton."""
    a, b = 1.0, 0.0
    prev = None  # (lambda_r, x0 coefficients)
    s0 = oracle.s0
    for t_s, t_t in zip(grid.times[:-1], grid.times[1:]):
        al_s, si_s, la_s = SCHED.alpha_sigma_lambda(t_s)
        al_t, si_t, la_t = SCHED.alpha_sigma_lambda(t_t)
        h = la_t - la_s
        v = al_s**2 * s0**2 + si_s**2
        x0 = (s0**2 * al_s * a / v, (s0**2 * al_s * b + si_s**2) / v)
        w = al_t * (1 - math.exp(-2 * h))
        na = si_t / si_s * math.exp(-h) * a + w * x0[0]
        nb = si_t / si_s * math.exp(-h) * b + w * x0[1]
        if second_order and prev is not None:
            r1 = (prev[0] - la_s) / h
            na += 0.5 * w * (prev[1][0] - x0[0]) / r1
            nb += 0.5 * w * (prev[1][1] - x0[1]) / r1
        prev = (la_s, x0)
        a, b = na, nb
    return a, b


@pytest.mark.parametrize("method", ["sde_pp_1", "sde_pp_2m"])
@pytest.mark.parametrize("kind", ["uniform_t", "uniform_lambda"])
def test_pp_skeleton_matches_affine_recursion(method, kind):
    grid = make_time_grid(SCHED, 40, kind)
    oracle = GaussianOracle.isotropic(0.8, 0.6, 4)
    x_T = np.random.default_rng(0).normal(size=(5, 4))
    spec = SolverSpec(method, grid, SCHED)
    out = run_sde(oracle.data_model(SCHED), spec, x_T, NoiseStream(0), noise=np.zeros)
    a, b = _affine_sde_pp(grid, oracle, method == "sde_pp_2m")
    assert np.max(np.abs(out - (a * x_T + b * oracle.mu))) < 1e-10


# -- second order ---------------------------------------------------------------------------


def test_2m_with_matching_buffer_reduces_to_first_order():
    z = np.array([0.1, -0.2, 0.3, 1.0])
    eps_m, x0_m = ORACLE.noise_model(SCHED), ORACLE.data_model(SCHED)
    for exact in (False, True):
        a = sde_2m_step(X, eps_m, (0.8, eps_m(X, 0.6)), 0.6, 0.3, z, SCHED, exact)
        assert np.allclose(a, sde_1_step(X, eps_m, 0.6, 0.3, z, SCHED), rtol=0, atol=1e-14)
        b = sde_pp_2m_step(X, x0_m, (0.8, x0_m(X, 0.6)), 0.6, 0.3, z, SCHED, exact)
        assert np.allclose(b, sde_pp_1_step(X, x0_m, 0.6, 0.3, z, SCHED), rtol=0, atol=1e-14)


def test_2m_zero_step_is_identity():
    eps_m, x0_m = ORACLE.noise_model(SCHED), ORACLE.data_model(SCHED)
    assert np.array_equal(sde_2m_step(X, eps_m, (0.8, X), 0.5, 0.5, None, SCHED), X)
    assert np.array_equal(sde_pp_2m_step(X, x0_m, (0.8, X), 0.5, 0.5, None, SCHED), X)


def test_2m_r1_zero_is_grid_error():
    with pytest.raises(GridError):
        sde_2m_step(X, ORACLE.noise_model(SCHED), (0.5, X), 0.5, 0.3, None, SCHED)
    with pytest.raises(GridError):
        sde_pp_2m_step(X, ORACLE.data_model(SCHED), (0.5, X), 0.5, 0.3, None, SCHED)


@pytest.mark.parametrize(
    "fn,limit", [(sde_2m_correction_coeff, 1 / 6), (sde_pp_2m_correction_coeff, 1 / 3)]
)
def test_exact_and_approximate_coefficients_differ_by_h_squared(fn, limit):
    # series: 2(e^h - 1 - h)/h - (e^h - 1) = -h^2/6 + O(h^3) and
    # (e^{-2h} - 1 + 2h)/(2h) - (1 - e^{-2h})/2 = h^2/3 + O(h^3)
    _, _, lam_s = SCHED.alpha_sigma_lambda(0.5)
    ratios = []
    for h in (0.2, 0.1, 0.05):
        c = step_coeffs(SCHED, 0.5, SCHED.inverse_lambda(lam_s + h))
        scale = c.sigma_t if fn is sde_2m_correction_coeff else c.alpha_t
        ratios.append(abs(fn(c, True) - fn(c, False)) / (scale * h**2))
    assert max(ratios) / min(ratios) < 1.3
    assert abs(ratios[-1] - limit) < 0.02


def test_sde_pp_2m_noise_scale_monte_carlo():
    model = ORACLE.data_model(SCHED)
    x = np.zeros((100_000, 4))
    buf = (0.6, model(x, 0.6))
    z = NoiseStream(1).draw(x.shape)
    noise = sde_pp_2m_step(x, model, buf, 0.5, 0.4, z, SCHED) - sde_pp_2m_step(x, model, buf, 0.5, 0.4, None, SCHED)
    _, s_t, _ = SCHED.alpha_sigma_lambda(0.4)
    assert np.var(noise) == pytest.approx(s_t**2 * (1 - math.exp(-2 * _h(0.5, 0.4))), rel=0.01)


def test_r1_sign_matches_ode_multistep_in_small_h_limit():
    # for x0 = a + b*lambda both corrections, divided by their own first-order x0
    # weight, tend to b*h/2; a flipped r1 sign would give the opposite sign
    a, b = 0.3, 0.7
    model = lambda_linear("data_prediction", a, b)
    lam_s = SCHED.lambda_of(0.5)
    for h in (0.1, 0.01, 0.001):
        t_r, t_t = SCHED.inverse_lambda(lam_s - h), SCHED.inverse_lambda(lam_s + h)
        c = step_coeffs(SCHED, 0.5, t_t)
        x = np.array([0.2])
        buf = (t_r, model(x, t_r))
        sde_corr = sde_pp_2m_step(x, model, buf, 0.5, t_t, None, SCHED) - sde_pp_1_step(x, model, 0.5, t_t, None, SCHED)
        sde_norm = sde_corr[0] / (c.alpha_t * -math.expm1(-2 * h))
        state = StepState(0.5, x, (buf, (0.5, model(x, 0.5))))
        ode = dpm_pp_2m_step(state, model, t_t, SCHED, final=True).x
        first = StepState(0.5, x, ((0.5, model(x, 0.5)),))
        ode_corr = ode - dpm_pp_2m_step(first, model, t_t, SCHED, final=True).x
        ode_norm = ode_corr[0] / (c.alpha_t * -math.expm1(-h))
        assert ode_norm == pytest.approx(b * h / 2, rel=1e-9)
        assert sde_norm / ode_norm == pytest.approx(1.0, rel=1e-9)


def test_eps_form_2m_correction_sign():
    # eps form: with eps = a + b*lambda, correction / (first-order eps weight) -> b*h/2 too
    a, b = -0.2, 0.5
    model = lambda_linear("noise_prediction", a, b)
    lam_s = SCHED.lambda_of(0.5)
    h = 1e-3
    t_r, t_t = SCHED.inverse_lambda(lam_s - h), SCHED.inverse_lambda(lam_s + h)
    c = step_coeffs(SCHED, 0.5, t_t)
    x = np.array([0.2])
    corr = sde_2m_step(x, model, (t_r, model(x, t_r)), 0.5, t_t, None, SCHED) - sde_1_step(x, model, 0.5, t_t, None, SCHED)
    norm = corr[0] / (-2 * c.sigma_t * math.expm1(h))
    assert norm == pytest.approx(b * h / 2, rel=1e-5)


# -- streams and sampling -------------------------------------------------------------------


def test_noise_stream_reproducible():
    a, b, c = NoiseStream(9), NoiseStream(9), NoiseStream(10)
    seq_a = [a.draw(3) for _ in range(5)]
    seq_b = [b.draw(3) for _ in range(5)]
    assert all(np.array_equal(u, v) for u, v in zip(seq_a, seq_b))
    assert not np.array_equal(seq_a[0], c.draw(3))
    assert a.draws == 5


@pytest.mark.parametrize("method", ["sde_1", "sde_pp_1", "sde_2m", "sde_pp_2m"])
def test_sampling_reproducible_and_counts(method):
    grid = make_time_grid(SCHED, 25, "uniform_lambda")
    x = np.ones((3, 4))
    model = ORACLE.data_model(SCHED)
    r1 = sample(model, SolverSpec(method, grid, SCHED, seed=5), x)
    r2 = sample(model, SolverSpec(method, grid, SCHED, seed=5), x)
    r3 = sample(model, SolverSpec(method, grid, SCHED, seed=6), x)
    assert np.array_equal(r1.x, r2.x) and not np.array_equal(r1.x, r3.x)
    assert r1.nfe == 25


def test_run_sde_one_draw_per_step():
    grid = make_time_grid(SCHED, 12, "uniform_t")
    stream = NoiseStream(0)
    run_sde(ORACLE.data_model(SCHED), SolverSpec("sde_pp_2m", grid, SCHED), np.zeros(4), stream)
    assert stream.draws == 12


def test_multistep_first_step_is_first_order():
    grid = make_time_grid(SCHED, 1)
    model = ORACLE.data_model(SCHED)
    z = NoiseStream(3).draw(4)
    out = sample(model, SolverSpec("sde_pp_2m", grid, SCHED, seed=3), X).x
    assert np.allclose(out, sde_pp_1_step(X, model, 1.0, 0.001, z, SCHED), rtol=0, atol=1e-15)
    out = sample(model, SolverSpec("sde_2m", grid, SCHED, seed=3), X).x
    assert np.allclose(out, sde_1_step(X, model, 1.0, 0.001, z, SCHED), rtol=0, atol=1e-15)
