import numpy as np
import pytest

from diffscale import tensorad as ad
from diffscale.errors import ConfigError, DimensionError, DomainError, UsageError
from diffscale.scorenet import (
    CONFIGURATIONS,
    Condition,
    ModelConfig,
    ScoreNetwork,
    TrainBatch,
    dsm_loss,
    fourier_features,
    guided_score,
    score_forward,
)
from diffscale.sde import VarianceSchedule, sigma

from oracles import tiny_conditions, tiny_network


def test_configurations_channel_sets():
    assert CONFIGURATIONS["lr-ws+sf"] == ("lowres_ws", "orography", "land_sea")
    assert len(CONFIGURATIONS["sf+lr-df"]) == 9
    assert len(CONFIGURATIONS["lr-ws+sf+lr-df"]) == 10
    with pytest.raises(ConfigError):
        ModelConfig("nope")


def test_fourier_features_at_zero():
    f = fourier_features(0.0)
    assert np.all(f[0, :8] == 1) and np.all(f[0, 8:] == 0)


def test_null_embedding_single_token():
    net = tiny_network()
    a = net.embed_condition(2.0, 5.0, True).data
    b = net.embed_condition(3.5, 40.0, True).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], net.params["null_emb"].data)


def test_embedding_continuity_in_lead():
    net = tiny_network()
    leads = np.linspace(1, 45, 23)
    base = net.embed_condition(np.full(23, 2.5), leads, np.zeros(23, bool)).data
    bumped = net.embed_condition(np.full(23, 2.5), leads + 1e-3, np.zeros(23, bool)).data
    far = net.embed_condition(np.full(23, 2.5), leads + 1e-1, np.zeros(23, bool)).data
    small = np.linalg.norm(bumped - base, axis=1)
    large = np.linalg.norm(far - base, axis=1)
    # local Lipschitz constant measured on the coarser step bounds the fine one
    c = (large / 1e-1).max()
    assert np.all(small < 2 * c * 1e-3)


@pytest.mark.parametrize("alpha,lead", [(0.5, 3.0), (2.0, 0.5), (2.0, 47.0)])
def test_embedding_domain(alpha, lead):
    net = tiny_network()
    with pytest.raises(DomainError):
        net.embed_condition(alpha, lead, False)
    with pytest.raises(DomainError):
        Condition(alpha, lead).validate()


@pytest.mark.parametrize("config_id", sorted(CONFIGURATIONS))
def test_score_shape_for_each_factor(config_id):
    rng = np.random.default_rng(0)
    net = tiny_network(config_id=config_id)
    for alpha in (1.0, 4 / 3, 2.0, 4.0):
        cond = tiny_conditions(rng, 1)[0]
        cond.alpha, cond.is_null = alpha, False
        out = score_forward(net, rng.normal(size=(12, 12)), 0.4, cond)
        assert out.shape == (12, 12) and np.all(np.isfinite(out))


def test_missing_channel_is_dimension_error():
    net = tiny_network(config_id="sf+lr-df")
    with pytest.raises(DimensionError):
        net.score(np.zeros((12, 12)), 0.5, Condition(2.0, 3.0, np.zeros((3, 3)), {}))


def test_score_is_negative_noise_over_sigma():
    rng = np.random.default_rng(1)
    net = tiny_network()
    conds = tiny_conditions(rng, 3)
    x = rng.normal(size=(3, 12, 12))
    t = np.array([0.1, 0.4, 0.8])
    eps = net.noise_prediction(x, t, conds).data[0]
    np.testing.assert_allclose(net.score(x, t, conds), -eps / sigma(net.schedule, t)[:, None, None], rtol=1e-12)


def test_zero_output_layer_gives_unit_gaussian_score():
    # with F = 0 the denoiser is c_skip x, the posterior mean under a N(0, 1) canvas
    rng = np.random.default_rng(2)
    net = tiny_network()
    net.params["out.w"].data[:] = 0
    net.params["out.b"].data[:] = 0
    x = rng.normal(size=(2, 12, 12))
    for t in (0.05, 0.3, 0.9):
        out = net.score(x, t, tiny_conditions(rng, 2))
        np.testing.assert_allclose(out, -x / (1 + sigma(net.schedule, t) ** 2), rtol=1e-12)


def test_noise_prediction_bounded_in_t():
    # eps_hat = x sigma / (1 + sigma^2) - c_in F, so |eps_hat| <= max|x| / 2 + max|F| for every t
    rng = np.random.default_rng(3)
    net = tiny_network()
    cond = tiny_conditions(rng, 1)[0]
    x = rng.normal(size=(12, 12))
    for t in np.linspace(0.01, 0.99, 11):
        sig = sigma(net.schedule, t)
        eps = np.abs(net.score(x, t, cond)) * sig
        c_in = 1 / np.sqrt(1 + sig**2)
        f = (x * sig / (1 + sig**2) - net.noise_prediction(x, t, cond).data[0, 0]) / c_in
        assert eps.max() <= 0.5 * np.abs(x).max() + np.abs(f).max() + 1e-9
        assert eps.max() < 10 * (0.5 * np.abs(x).max() + 1)


def test_guidance_algebra():
    rng = np.random.default_rng(4)
    net = tiny_network()
    cond = tiny_conditions(rng, 1)[0]
    cond.is_null = False
    x = rng.normal(size=(12, 12))
    np.testing.assert_array_equal(guided_score(net, x, 0.5, cond, 0.0), score_forward(net, x, 0.5, cond))
    np.testing.assert_array_equal(guided_score(net, x, 0.5, cond, -1.0), score_forward(net, x, 0.5, cond.as_null()))
    null = cond.as_null()
    np.testing.assert_allclose(guided_score(net, x, 0.5, null, 1.0), score_forward(net, x, 0.5, null), rtol=1e-12)
    mixed = guided_score(net, x, 0.5, cond, 0.7)
    want = 1.7 * score_forward(net, x, 0.5, cond) - 0.7 * score_forward(net, x, 0.5, null)
    np.testing.assert_allclose(mixed, want, rtol=1e-12)


def test_null_token_zeroes_condition_channels():
    rng = np.random.default_rng(5)
    net = tiny_network()
    cond = tiny_conditions(rng, 1)[0]
    assert np.all(net.condition_channels(cond.as_null()) == 0)
    other = Condition(1.5, 20.0, rng.random((3, 3)), cond.priors)
    x = rng.normal(size=(12, 12))
    np.testing.assert_array_equal(net.score(x, 0.5, cond.as_null()), net.score(x, 0.5, other.as_null()))


class _Oracle:
    """Stands in for the network: predicts a fixed noise field."""

    def __init__(self, net, value):
        self.net, self.value = net, value
        self.config, self.params, self.dtype = net.config, net.params, np.dtype(np.float64)

    def noise_prediction(self, x, t, conds):
        return ad.Tensor(self.value(x, t)[None])


def _batch(rng, n):
    return TrainBatch(rng.normal(size=(n, 12, 12)), tiny_conditions(rng, n))


def test_perfect_denoiser_has_zero_loss():
    rng = np.random.default_rng(6)
    net = tiny_network()
    sched = VarianceSchedule()
    batch = _batch(rng, 4)
    oracle = _Oracle(net, lambda x, t: (x - batch.targets) / sigma(sched, t)[:, None, None])
    res = dsm_loss(oracle, batch, sched, np.random.default_rng(0), p_uncond=0.0, backward=False)
    assert res.loss == pytest.approx(0.0, abs=1e-20)


def test_zero_denoiser_has_unit_loss():
    rng = np.random.default_rng(7)
    net = tiny_network()
    batch = _batch(rng, 80)  # 80 * 144 > 1e4 pixels
    oracle = _Oracle(net, lambda x, t: np.zeros_like(x))
    res = dsm_loss(oracle, batch, VarianceSchedule(), np.random.default_rng(1), backward=False)
    assert res.loss == pytest.approx(1.0, rel=0.05)


def test_dsm_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    net = tiny_network()
    batch = _batch(rng, 2)
    params = [net.params[k] for k in ("in.w", "down1.c1.w", "attn.q.w", "cemb1.w", "null_emb", "out.b")]

    def loss():
        return _loss_tensor(net, batch)

    assert ad.finite_diff_check(loss, params, max_coords=4) < 1e-4


def _loss_tensor(net, batch):
    r = np.random.default_rng(11)
    sched = net.schedule
    t = r.uniform(sched.t_min, 1, size=len(batch.conds))
    eps = r.standard_normal(batch.targets.shape)
    x_t = batch.targets + sigma(sched, t)[:, None, None] * eps
    pred = net.noise_prediction(x_t, t, batch.conds)
    return ad.mean(ad.square(ad.sub(pred, ad.Tensor(eps[None]))))


def test_dsm_loss_reports_null_count_and_validates():
    rng = np.random.default_rng(9)
    net = tiny_network()
    batch = _batch(rng, 6)
    assert dsm_loss(net, batch, net.schedule, rng, p_uncond=0.0).n_null == 0
    with pytest.raises(DomainError):
        dsm_loss(net, batch, net.schedule, rng, p_uncond=1.0)
    with pytest.raises(UsageError):
        TrainBatch(np.zeros((0, 12, 12)), [])


def test_smoke_training_reduces_loss_and_uses_conditions():
    """200 Adam steps on 64 synthetic items: loss falls and correct conditions beat shuffled ones."""
    rng = np.random.default_rng(10)
    cfg = ModelConfig("lr-ws+sf", channels=(8, 16, 16), emb_dim=16, canvas=12, base=3)
    net = ScoreNetwork(cfg, seed=0)
    items = 64
    low = rng.normal(size=(items, 3, 3))
    targets = np.stack([np.kron(l, np.ones((4, 4))) for l in low])
    statics = {"orography": np.zeros((12, 12)), "land_sea": np.zeros((12, 12))}
    conds = [Condition(4.0, 5.0, l, statics) for l in low]
    fixed = TrainBatch(targets[:16], conds[:16])
    opt = ad.Adam(net.params.values(), lr=2e-3)

    def fixed_loss(cs):
        return dsm_loss(net, TrainBatch(fixed.targets, cs), net.schedule,
                        np.random.default_rng(123), 0.0, backward=False).loss

    before = fixed_loss(fixed.conds)
    for step in range(200):
        idx = rng.choice(items, 8, replace=False)
        dsm_loss(net, TrainBatch(targets[idx], [conds[i] for i in idx]), net.schedule, rng, 0.1)
        opt.step()
    after = fixed_loss(fixed.conds)
    shuffled = fixed_loss(fixed.conds[1:] + fixed.conds[:1])
    assert after < before
    assert after < shuffled


def test_prediction_independent_of_batch_composition():
    rng = np.random.default_rng(12)
    net = tiny_network()
    conds = tiny_conditions(rng, 3)
    x = rng.normal(size=(3, 12, 12))
    t = np.array([0.3, 0.6, 0.9])
    full = net.score(x, t, conds)
    for i in range(3):
        np.testing.assert_allclose(net.score(x[i:i + 1], t[i:i + 1], conds[i:i + 1])[0], full[i], rtol=1e-10)
