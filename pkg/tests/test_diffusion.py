import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from red_pet import diffusion as df
from red_pet.diffusion import DiffusionState
from red_pet.schedule import make_schedule, make_time_grid


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(0)
    x_full = rng.random((12, 10))
    x_low = np.maximum(x_full + 0.2 * rng.standard_normal(x_full.shape), 0)
    return x_full, x_low


def test_residual_examples():
    x = np.random.default_rng(1).random((3, 4))
    assert not df.residual(x, x).any()
    assert df.residual(np.array([0.6]), np.array([0.2]))[0] == pytest.approx(0.4)
    e = np.random.default_rng(2).standard_normal((3, 4))
    np.testing.assert_allclose(df.residual(x + e, x), e, atol=1e-15)
    with pytest.raises(ValueError):
        df.residual(np.zeros(3), np.zeros(4))


def test_forward_sample_endpoints_and_midpoint(pair):
    xf, xl = pair
    s = make_schedule(500)
    assert df.forward_sample(xf, xl, s, 0).x.tobytes() == xf.tobytes()
    assert df.forward_sample(xf, xl, s, 500).x.tobytes() == xl.tobytes()
    mid = df.forward_sample(np.array([0.2]), np.array([0.6]), s, 250)
    assert mid.x[0] == pytest.approx(0.4) and mid.t == 250
    with pytest.raises(ValueError):
        df.forward_sample(xf, xl, s, 501)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 500), st.sampled_from(["linear", "cosine"]), st.integers(0, 2**32 - 1))
def test_forward_sample_is_convex(t, kind, seed):
    rng = np.random.default_rng(seed)
    xf, xl = rng.random((2, 6, 5))
    x = df.forward_sample(xf, xl, make_schedule(500, kind), t).x
    assert np.all(x >= np.minimum(xf, xl) - 1e-15)
    assert np.all(x <= np.maximum(xf, xl) + 1e-15)


def test_reverse_step_examples():
    s = make_schedule(4)
    st0 = DiffusionState(np.array([0.4]), 2.0)
    np.testing.assert_array_equal(df.reverse_step(st0, np.zeros(1), 1.0, s).x, st0.x)
    # true residual 0.4 from x_F = 0.2: step alpha 0.5 -> 0.25
    out = df.reverse_step(st0, np.array([0.4]), 1.0, s)
    assert out.x[0] == pytest.approx(0.3) and out.t == 1.0
    with pytest.raises(ValueError):
        df.reverse_step(st0, np.zeros(1), 2.0, s)


def test_reverse_steps_telescope(pair):
    xf, xl = pair
    s = make_schedule(500)
    eps = np.random.default_rng(3).standard_normal(xf.shape)
    state = DiffusionState(xl, 500.0)
    for t in (400.0, 250.0, 100.0):
        state = df.reverse_step(state, eps, t, s)
    once = df.reverse_step(DiffusionState(xl, 500.0), eps, 100.0, s)
    np.testing.assert_allclose(state.x, once.x, atol=1e-12)


def test_compute_drift_examples():
    a = DiffusionState(np.array([0.3]), 5.0)
    assert not df.compute_drift(a, a).any()
    assert df.compute_drift(a, DiffusionState(np.array([0.28]), 5.0))[0] == pytest.approx(0.02)
    with pytest.raises(ValueError):
        df.compute_drift(a, DiffusionState(np.array([0.3]), 4.0))


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_injected_errors_telescope_into_drift(pair, dtype, tol):
    xf, xl = (a.astype(dtype) for a in pair)
    s = make_schedule(500)
    g = make_time_grid(30, 500)
    eps = xl - xf
    rng = np.random.default_rng(4)
    deltas = [(0.01 * rng.standard_normal(xf.shape)).astype(dtype) for _ in g.steps()]
    true = pred = DiffusionState(xl, 500.0)
    for (t, u), d in zip(g.steps(), deltas):
        true = df.reverse_step(true, eps, u, s)
        pred = df.reverse_step(pred, eps + d, u, s)
    gamma = df.compute_drift(true, pred)
    alphas = [s.alpha(t) for t in g.times]
    oracle = df.accumulated_drift(deltas, alphas).gamma
    # prediction eps + delta overshoots, so the true state lies above the prediction
    np.testing.assert_allclose(gamma, oracle, atol=tol)


def test_apply_correction_examples(pair):
    xf, xl = pair
    x_true = DiffusionState(xf, 10.0)
    x_hat = DiffusionState(xl, 10.0)
    gamma = df.compute_drift(x_true, x_hat)
    assert df.apply_correction(x_hat, gamma, make_schedule(500, beta_const=0.0)).x.tobytes() == xl.tobytes()
    fixed = df.apply_correction(x_hat, gamma, make_schedule(500, beta_const=1.0))
    np.testing.assert_allclose(fixed.x, xf, atol=1e-15)
    half = df.apply_correction(x_hat, gamma, make_schedule(500, beta_const=0.5))
    assert np.linalg.norm(xf - half.x) == pytest.approx(0.5 * np.linalg.norm(gamma))
    flipped = df.apply_correction(x_hat, gamma, make_schedule(500), sign=-1.0)
    np.testing.assert_allclose(flipped.x, xl - gamma)


def test_exact_correction_restores_true_state_float32(pair):
    xf, xl = (a.astype(np.float32) for a in pair)
    x_true, x_hat = DiffusionState(xf, 3.0), DiffusionState(xl, 3.0)
    out = df.apply_correction(x_hat, df.compute_drift(x_true, x_hat), make_schedule(10))
    np.testing.assert_allclose(out.x, xf, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 500), st.sampled_from(["linear", "cosine"]))
def test_oracle_reverse_is_exact_inverse(t_s, kind):
    rng = np.random.default_rng(t_s)
    xf = rng.random((8, 8))
    xl = xf + 0.3 * rng.standard_normal(xf.shape)
    s = make_schedule(500, kind, beta_const=0.0)
    out = df.reconstruct(xl, lambda x, t: xl - xf, None, s, make_time_grid(t_s, 500))
    assert np.abs(out - xf).max() <= 1e-10


def test_oracle_reverse_float32(pair):
    xf, xl = (a.astype(np.float32) for a in pair)
    s = make_schedule(500, beta_const=0.0)
    eps = xl - xf
    out = df.reconstruct(xl, lambda x, t: eps, lambda x, t: 1 / 0, s, make_time_grid(30, 500))
    assert out.dtype == np.float32 and np.abs(out - xf).max() <= 1e-4


def test_single_step_reconstruction(pair):
    xf, xl = pair
    s = make_schedule(500)
    eps_hat = np.full(xf.shape, 0.1)
    out = df.reconstruct(xl, lambda x, t: eps_hat, None, s, make_time_grid(1, 500))
    np.testing.assert_allclose(out, xl - eps_hat)
    corr = np.full(xf.shape, 0.01)
    out = df.reconstruct(xl, lambda x, t: eps_hat, lambda x, t: corr, s, make_time_grid(1, 500))
    np.testing.assert_allclose(out, xl - eps_hat + corr)


def test_reconstruct_calls_predictors_in_order(pair):
    xf, xl = pair
    s = make_schedule(500, beta_const=0.5)
    calls = []

    def ren(x, t):
        calls.append(("ren", t))
        return 0.1 * x

    def dcn(x, t):
        calls.append(("dcn", t))
        return 0.01 * x

    seen = []
    df.reconstruct(xl, ren, dcn, s, make_time_grid(3, 500), trajectory=lambda k, st: seen.append((k, st.t)))
    times = make_time_grid(3, 500).times
    assert calls == [c for t, u in zip(times[:-1], times[1:]) for c in (("ren", t), ("dcn", u))]
    assert seen == list(enumerate(times))


def test_reconstruct_is_pure(pair):
    xf, xl = pair
    s = make_schedule(500)
    args = (lambda x, t: np.sin(x) * t / 500, lambda x, t: 0.01 * np.cos(x), s, make_time_grid(30, 500))
    a = df.reconstruct(xl, *args)
    b = df.reconstruct(xl, *args)
    assert a.tobytes() == b.tobytes()


def test_reconstruct_shape_checks(pair):
    xf, xl = pair
    s = make_schedule(500)
    with pytest.raises(ValueError):
        df.reconstruct(xl, lambda x, t: np.zeros(3), None, s, make_time_grid(5, 500))
    with pytest.raises(ValueError):
        df.reconstruct(xl, lambda x, t: 0 * x, lambda x, t: np.zeros(3), s, make_time_grid(5, 500))
    with pytest.raises(ValueError):
        df.reconstruct(xl, lambda x, t: 0 * x, None, s, make_time_grid(5, 400))


def test_reconstruct_batched_matches_single(pair):
    xf, xl = pair
    s = make_schedule(500)
    batch = np.stack([xl, 2 * xl])
    ren = lambda x, t: 0.2 * x  # noqa: E731
    out = df.reconstruct(batch, ren, None, s, make_time_grid(10, 500))
    np.testing.assert_array_equal(out[1], df.reconstruct(2 * xl, ren, None, s, make_time_grid(10, 500)))


# --------------------------------------------------------------------------
# mixed noise
# --------------------------------------------------------------------------


def test_mixed_sigma_zero_supervised_is_forward_sample(pair):
    xf, xl = pair
    s = make_schedule(500)
    state, eps = df.mixed_forward_sample(xf, xl, s, 123.0, sigma=0.0)
    assert state.x.tobytes() == df.forward_sample(xf, xl, s, 123.0).x.tobytes()
    np.testing.assert_array_equal(eps, xl - xf)


@pytest.mark.parametrize("mode", ["supervised", "unsupervised"])
def test_mixed_at_time_zero_is_full_dose(pair, mode):
    xf, xl = pair
    state, _ = df.mixed_forward_sample(xf, xl, make_schedule(500), 0.0, sigma=0.3, seed=9, mode=mode)
    assert state.x.tobytes() == xf.tobytes()


def test_mixed_supervised_adds_alpha_weighted_noise(pair):
    xf, xl = pair
    s = make_schedule(500)
    state, eps = df.mixed_forward_sample(xf, xl, s, 200.0, sigma=0.05, seed=3)
    noise = eps - (xl - xf)
    np.testing.assert_allclose(state.x, df.forward_sample(xf, xl, s, 200.0).x + 0.4 * noise, atol=1e-12)
    assert noise.std() == pytest.approx(0.05, rel=0.2)


def test_mixed_unsupervised_mean_is_full_dose():
    xf = np.array([[0.3, 0.7]])
    s = make_schedule(500)
    sigma, n = 0.05, 10_000
    xs = np.stack([df.mixed_forward_sample(xf, None, s, 400.0, sigma, seed=k, mode="unsupervised")[0].x
                   for k in range(n)])
    se = s.alpha(400.0) * sigma / np.sqrt(n)
    assert np.all(np.abs(xs.mean(axis=0) - xf) <= 4 * se)


def test_mixed_validation(pair):
    xf, xl = pair
    with pytest.raises(ValueError):
        df.mixed_forward_sample(xf, xl, make_schedule(500), 1.0, sigma=-0.1)
    with pytest.raises(ValueError):
        df.mixed_forward_sample(xf, xl, make_schedule(500), 1.0, mode="weird")


# --------------------------------------------------------------------------
# DDIM
# --------------------------------------------------------------------------


def test_ddim_forward_at_unit_alpha_bar(pair):
    x0, n = pair
    np.testing.assert_array_equal(df.ddim_forward(x0, 1.0, n), x0)


def test_ddim_perfect_noise_inverts(pair):
    x0, _ = pair
    n = np.random.default_rng(5).standard_normal(x0.shape)
    for ab in (0.9, 0.3, 0.01):
        xt = df.ddim_forward(x0, ab, n)
        np.testing.assert_allclose(df.ddim_predict_x0(xt, n, ab), x0, atol=1e-9)


def test_ddim_step_identity(pair):
    x0, n = pair
    np.testing.assert_array_equal(df.ddim_step(x0, n, 0.5, 0.5), x0)


def test_ddim_chain_recovers_x0(pair):
    x0, _ = pair
    n = np.random.default_rng(6).standard_normal(x0.shape)
    ab = df.ddpm_alpha_bar(500)
    x = df.ddim_forward(x0, ab[400], n)
    for t, s in ((400, 250), (250, 60), (60, 1), (1, 0)):
        x = df.ddim_step(x, n, ab[t], ab[s])
    np.testing.assert_allclose(x, x0, atol=1e-5)
    xt = df.ddim_forward(x0, ab[300], n).astype(np.float32)
    out = df.ddim_sample(xt, lambda x, t: n, ab, 300, 20)
    np.testing.assert_allclose(out, x0, atol=1e-5)


def test_ddim_validation(pair):
    x0, n = pair
    with pytest.raises(ValueError):
        df.ddim_forward(x0, 0.0, n)
    with pytest.raises(ValueError):
        df.ddim_step(x0, n, 0.5, 1.2)


def test_ddpm_alpha_bar_shape():
    ab = df.ddpm_alpha_bar(500)
    assert ab.shape == (501,) and ab[0] == 1.0
    assert np.all(np.diff(ab) < 0) and ab[-1] > 0
