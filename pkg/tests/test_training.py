import numpy as np
import pytest

from red_pet import training as tr
from red_pet.diffusion import forward_sample
from red_pet.estimator import NetArch, net_forward, net_init
from red_pet.metrics import SSIMConfig, ssim
from red_pet.schedule import make_schedule
from red_pet.training import NonFiniteLossError, SlicePair, TrainConfig

SCHED = make_schedule(100)
ARCH = NetArch((1, 4, 4, 1), temb_dim=8)


def _pairs(n=4, shape=(12, 10), seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        xf = rng.random(shape).astype(np.float32)
        out.append(SlicePair(xf, (xf + noise * rng.standard_normal(shape)).astype(np.float32)))
    return out


def test_mse_loss_example():
    val, g = tr.mse_loss(np.array([1.0, 2.0]), np.zeros(2))
    assert val == 2.5
    np.testing.assert_array_equal(g, [1.0, 2.0])
    with pytest.raises(ValueError):
        tr.mse_loss(np.zeros(2), np.zeros(3))


def test_ssim_loss_constant_images():
    c1 = SSIMConfig().c1
    val, _ = tr.ssim_loss(np.zeros((8, 8)), np.ones((8, 8)))
    assert val == pytest.approx(1.0 - c1 / (1.0 + c1), abs=1e-12)
    assert tr.ssim_loss(np.ones((8, 8)), np.ones((8, 8)))[0] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("mode", ["global", "windowed"])
def test_ssim_is_symmetric(mode):
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 20, 20))
    cfg = SSIMConfig(mode=mode)
    assert ssim(a, b, cfg) == pytest.approx(ssim(b, a, cfg), abs=1e-14)


def test_ren_loss_zero_for_exact_prediction():
    rng = np.random.default_rng(2)
    eps, x_t = rng.random((2, 3, 12, 12))
    total, g, parts = tr.ren_loss(eps, eps, x_t, np.array([1.0, 50.0, 99.0]), SCHED)
    assert total == pytest.approx(0.0, abs=1e-12) and np.abs(g).max() < 1e-12
    assert parts["mse"] == 0.0


def test_ren_loss_weights():
    rng = np.random.default_rng(3)
    eps, x_t = rng.random((2, 12, 12))
    eps_hat = eps + 0.1
    only_mse = tr.ren_loss(eps_hat, eps, x_t, 30.0, SCHED, TrainConfig(w_ssim=0.0))
    assert only_mse[0] == pytest.approx(0.01)
    both = tr.ren_loss(eps_hat, eps, x_t, 30.0, SCHED, TrainConfig(w_ssim=2.0))
    assert both[0] == pytest.approx(0.01 + 2.0 * both[2]["ssim"])


def test_train_config_validation():
    for bad in [dict(n_steps=-1), dict(batch_size=0), dict(c1=0), dict(lam_low=0.6, lam_high=0.5),
                dict(drift_coeff="x"), dict(noise_mode="x"), dict(noise_sigma=-1)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_steps_returns_initialization():
    pairs = _pairs()
    params, trace = tr.train_ren(pairs, TrainConfig(n_steps=0, seed=5), SCHED, ARCH)
    assert trace == [] and params.flat.tobytes() == net_init(ARCH, 5).flat.tobytes()
    dcn, trace = tr.train_dcn(pairs, params, TrainConfig(n_steps=0, seed=5), SCHED, ARCH)
    assert trace == [] and not net_forward(dcn, pairs[0].x_low, 10.0, SCHED).any()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        tr.train_ren([], TrainConfig(n_steps=1), SCHED, ARCH)


def test_identical_pairs_drive_residual_to_zero():
    pairs = [SlicePair(p.x_full, p.x_full.copy()) for p in _pairs()]
    cfg = TrainConfig(n_steps=150, lr=3e-3, w_ssim=0.0, seed=1)
    params, trace = tr.train_ren(pairs, cfg, SCHED, ARCH)
    losses = np.array([r[1] for r in trace])
    assert losses[-20:].mean() < 0.1 * losses[:5].mean()


def test_training_is_deterministic():
    pairs = _pairs()
    cfg = TrainConfig(n_steps=5, seed=7)
    a, ta = tr.train_ren(pairs, cfg, SCHED, ARCH)
    b, tb = tr.train_ren(pairs, cfg, SCHED, ARCH)
    assert a.flat.tobytes() == b.flat.tobytes() and ta == tb
    c, _ = tr.train_ren(pairs, TrainConfig(n_steps=5, seed=8), SCHED, ARCH)
    assert a.flat.tobytes() != c.flat.tobytes()
    da, _ = tr.train_dcn(pairs, a, cfg, SCHED, ARCH)
    db, _ = tr.train_dcn(pairs, b, cfg, SCHED, ARCH)
    assert da.flat.tobytes() == db.flat.tobytes()


def test_nan_input_raises_non_finite():
    pairs = _pairs()
    pairs[0].x_low[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        tr.train_ren(pairs[:1], TrainConfig(n_steps=3), SCHED, ARCH)


def test_trace_rows():
    _, trace = tr.train_ren(_pairs(), TrainConfig(n_steps=3), SCHED, ARCH)
    assert [r[0] for r in trace] == [0, 1, 2]
    for step, total, mse, s in trace:
        assert total == pytest.approx(mse + s)


def test_fixed_time_training_runs():
    params, trace = tr.train_ren(_pairs(), TrainConfig(n_steps=2), SCHED, ARCH, fixed_t=SCHED.t_max)
    assert len(trace) == 2


# --------------------------------------------------------------------------
# drifted samples
# --------------------------------------------------------------------------


def test_drifted_sample_with_lambda_zero_is_forward_sample():
    pair = _pairs(1)[0]
    ren = lambda x, t: np.zeros_like(x)  # noqa: E731
    for t in (0.0, 37.5, 100.0):
        x_hat, x_t = tr.make_drifted_sample(pair, ren, t, 0.0, SCHED)
        ref = forward_sample(pair.x_full, pair.x_low, SCHED, t).x
        assert x_hat.tobytes() == ref.tobytes() and x_t.tobytes() == ref.tobytes()


def test_drifted_sample_with_exact_estimator_has_no_drift():
    pair = _pairs(1, noise=0.2)[0]
    eps = pair.x_low - pair.x_full
    for lam in (0.0, 0.3, 1.0):
        x_hat, x_t = tr.make_drifted_sample(pair, lambda x, t: eps, 60.0, lam, SCHED)
        np.testing.assert_allclose(x_hat, x_t, atol=1e-6)


def test_drifted_sample_formula():
    pair = _pairs(1, noise=0.2)[0]
    eps = pair.x_low - pair.x_full
    e_hat = np.full_like(eps, 0.05)
    t, lam = 40.0, 0.25
    a = SCHED.alpha(t)
    x_hat, x_t = tr.make_drifted_sample(pair, None, t, lam, SCHED, eps_T_hat=e_hat)
    np.testing.assert_allclose(x_hat, pair.x_full + a * (lam * e_hat + (1 - lam) * eps), atol=1e-6)
    x_hat2, _ = tr.make_drifted_sample(pair, None, t, lam, SCHED, "one_minus_alpha", e_hat)
    np.testing.assert_allclose(x_hat2, pair.x_full + (1 - a) * (lam * e_hat + (1 - lam) * eps), atol=1e-6)
    with pytest.raises(ValueError):
        tr.make_drifted_sample(pair, None, t, 1.5, SCHED, eps_T_hat=e_hat)


def test_dcn_with_exact_estimator_learns_nothing():
    pairs = _pairs(noise=0.2)
    table = {p.x_low.tobytes(): p.x_low - p.x_full for p in pairs}
    oracle = lambda x, t: table[x.tobytes()]  # noqa: E731
    pairs = [SlicePair(p.x_full.astype(np.float64), p.x_low.astype(np.float64)) for p in pairs]
    table = {p.x_low.tobytes(): p.x_low - p.x_full for p in pairs}
    _, trace = tr.train_dcn(pairs, oracle, TrainConfig(n_steps=1, dtype="float64"), SCHED, ARCH)
    # zero-initialized output against all-zero targets
    assert trace[0][1] < 1e-28


def test_noise_modes_run():
    pairs = _pairs()
    for mode in ("supervised", "unsupervised"):
        cfg = TrainConfig(n_steps=2, noise_mode=mode, noise_sigma=0.05)
        ren, _ = tr.train_ren(pairs, cfg, SCHED, ARCH)
        dcn, trace = tr.train_dcn(pairs, ren, cfg, SCHED, ARCH)
        assert len(trace) == 2


def test_train_red_alternates():
    ren, dcn, rt, dt = tr.train_red(_pairs(), TrainConfig(n_steps=2), SCHED, ARCH, epochs=2)
    assert len(rt) == 4 and len(dt) == 4


def test_train_ddim_runs():
    params, trace = tr.train_ddim(_pairs(), TrainConfig(n_steps=3), SCHED, ARCH)
    assert len(trace) == 3 and np.isfinite(trace[-1][1])
