import numpy as np
import pytest

import pcgen.diffusion as diffusion
from pcgen import ShapeFamilyConfig, synth_set
from pcgen.diffusion import (
    DiffusionTrainConfig,
    GlobalDenoiserParams,
    NoiseSchedule,
    PointDenoiserParams,
    global_diffusion_loss,
    point_diffusion_loss,
    predict_global,
    predict_point,
    q_sample,
    sample_timestep,
    train_diffusion,
)
from pcgen.errors import StepOutOfRange
from pcgen.nn import grad_check, softmax
from pcgen.vae import VaeParams, VaeTrainConfig, train_vae


def tiny_point_denoiser(seed=0, d_h=2, d_z=3, c=2, width=8):
    return PointDenoiserParams.create(d_h, d_z, c, width=width, seed=seed)


class TestSchedule:
    def test_alpha_bar_monotone(self):
        s = NoiseSchedule.create(200)
        assert s.alpha_bars[0] == 1.0
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.betas) > 0)

    def test_bad_ranges_rejected(self):
        with pytest.raises(StepOutOfRange):
            NoiseSchedule.create(10, beta_start=0.02, beta_end=1e-4)
        with pytest.raises(StepOutOfRange):
            NoiseSchedule.create(10, beta_start=0.0, beta_end=0.5)


class TestQSample:
    def test_zero_noise(self):
        s = NoiseSchedule.create(50)
        x0 = np.ones((4, 3))
        xt = q_sample(s, x0, 20, np.zeros((4, 3)))
        assert np.allclose(xt, np.sqrt(s.alpha_bars[20]) * x0)

    def test_small_first_step(self):
        s = NoiseSchedule.create(50, beta_start=1e-4)
        x0 = np.ones(5)
        eps = np.random.default_rng(0).standard_normal(5)
        xt = q_sample(s, x0, 1, eps)
        assert np.max(np.abs(xt - x0)) < 3 * np.sqrt(1e-4) + 1e-4

    def test_monte_carlo_variance(self):
        s = NoiseSchedule.create(100)
        rng = np.random.default_rng(1)
        for t in (10, 50, 100):
            draws = np.array(
                [q_sample(s, 0.0 * np.ones(()), t, rng.standard_normal(())) for _ in range(0)]
            )
            # vectorized: x0 = 0 so x_t = sqrt(1 - abar_t) * eps
            eps = rng.standard_normal(100_000)
            xt = np.sqrt(s.alpha_bars[t]) * 1.0 + np.sqrt(1 - s.alpha_bars[t]) * eps
            var = xt.var()
            assert abs(var - (1 - s.alpha_bars[t])) / (1 - s.alpha_bars[t]) < 0.02

    def test_step_bounds(self):
        s = NoiseSchedule.create(10)
        with pytest.raises(StepOutOfRange):
            q_sample(s, np.zeros(2), 0, np.zeros(2))
        with pytest.raises(StepOutOfRange):
            q_sample(s, np.zeros(2), 11, np.zeros(2))


class TestUniformSteps:
    def test_chi_square(self):
        s = NoiseSchedule.create(20)
        rng = np.random.default_rng(2)
        draws = np.array([sample_timestep(s, rng) for _ in range(100_000)])
        counts = np.bincount(draws, minlength=21)[1:]
        expected = 100_000 / 20
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # chi-square critical value at alpha = 0.01, 19 dof
        assert chi2 < 36.191
        assert draws.min() == 1 and draws.max() == 20


class TestPredictPoint:
    def test_permutation_equivariant(self):
        pd = tiny_point_denoiser()
        rng = np.random.default_rng(3)
        h = rng.normal(size=(9, 2))
        z0 = rng.normal(size=3)
        eps, logits = predict_point(pd, h, 5, z0)
        perm = rng.permutation(9)
        eps_p, logits_p = predict_point(pd, h[perm], 5, z0)
        assert np.array_equal(eps_p, eps[perm])
        assert np.array_equal(logits_p, logits[perm])

    def test_zeroed_seg_head_uniform_logits_same_noise(self):
        pd = tiny_point_denoiser(seed=1)
        rng = np.random.default_rng(4)
        h = rng.normal(size=(5, 2))
        z0 = rng.normal(size=3)
        eps_before, _ = predict_point(pd, h, 3, z0)
        for w in pd.seg_head.weights:
            w[:] = 0.0
        for b in pd.seg_head.biases:
            b[:] = 0.0
        eps_after, logits = predict_point(pd, h, 3, z0)
        assert np.array_equal(eps_before, eps_after)
        assert np.allclose(softmax(logits), 0.5)

    def test_shared_trunk_perturbations(self):
        pd = tiny_point_denoiser(seed=2)
        rng = np.random.default_rng(5)
        h = rng.normal(size=(6, 2))
        z0 = rng.normal(size=3)
        eps0, logits0 = predict_point(pd, h, 4, z0)

        pd.noise_head.weights[0][0, 0] += 0.5
        eps1, logits1 = predict_point(pd, h, 4, z0)
        assert not np.array_equal(eps1, eps0)
        assert np.array_equal(logits1, logits0)
        pd.noise_head.weights[0][0, 0] -= 0.5

        pd.seg_head.weights[0][0, 0] += 0.5
        eps2, logits2 = predict_point(pd, h, 4, z0)
        assert np.array_equal(eps2, eps0)
        assert not np.array_equal(logits2, logits0)
        pd.seg_head.weights[0][0, 0] -= 0.5

        pd.trunk.weights[0][0, 0] += 0.5
        eps3, logits3 = predict_point(pd, h, 4, z0)
        assert not np.array_equal(eps3, eps0)
        assert not np.array_equal(logits3, logits0)


class TestPointLoss:
    def test_lambda_zero_is_pure_noise_loss(self):
        pd = tiny_point_denoiser()
        s = NoiseSchedule.create(20)
        rng = np.random.default_rng(6)
        h0 = rng.normal(size=(7, 2))
        z0 = rng.normal(size=3)
        labels = np.array([0, 1, 0, 1, 0, 1, 0])
        loss, parts, _ = point_diffusion_loss(
            pd, s, h0, labels, z0, 0.0, np.random.default_rng(7)
        )
        assert loss == parts["noise"]

    def test_perfect_predictions_zero_loss(self, monkeypatch):
        pd = tiny_point_denoiser()
        s = NoiseSchedule.create(20)
        rng = np.random.default_rng(8)
        h0 = rng.normal(size=(5, 2))
        z0 = rng.normal(size=3)
        labels = np.array([0, 1, 1, 0, 1])

        real_forward = diffusion._point_forward

        def oracle_forward(pd_, h_t, t, z0_):
            _, _, caches = real_forward(pd_, h_t, t, z0_)
            # reconstruct the noise the loss drew: h_t = sqrt(ab) h0 + sqrt(1-ab) eps
            ab = s.alpha_bars[t]
            eps = (h_t - np.sqrt(ab) * h0) / np.sqrt(1 - ab)
            logits = np.where(
                np.eye(2)[labels] > 0, 40.0, -40.0
            )
            return eps, logits, caches

        monkeypatch.setattr(diffusion, "_point_forward", oracle_forward)
        loss, parts, _ = point_diffusion_loss(
            pd, s, h0, labels, z0, 1.0, np.random.default_rng(9)
        )
        assert loss < 1e-12

    def test_unlabeled_omits_ce(self):
        pd = tiny_point_denoiser()
        s = NoiseSchedule.create(20)
        rng = np.random.default_rng(10)
        h0 = rng.normal(size=(5, 2))
        z0 = rng.normal(size=3)
        loss, parts, _ = point_diffusion_loss(
            pd, s, h0, None, z0, 1.0, np.random.default_rng(11)
        )
        assert parts["seg_ce"] == 0.0 and loss == parts["noise"]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        pd = tiny_point_denoiser(seed=seed, width=6)
        s = NoiseSchedule.create(15)
        rng = np.random.default_rng(seed + 20)
        h0 = rng.normal(size=(4, 2))
        z0 = rng.normal(size=3)
        labels = np.array([0, 1, 0, 1])

        def loss_fn(params):
            loss, _, grads = point_diffusion_loss(
                pd, s, h0, labels, z0, 0.7, np.random.default_rng(seed + 40)
            )
            return loss, grads

        # h = 1e-4: the composite loss carries enough evaluation noise that
        # smaller steps are roundoff-dominated (verified by an h-sweep)
        report = grad_check(loss_fn, pd.params(), tolerance=1e-4, h=1e-4)
        assert report.ok, str(report)


class TestGlobalLoss:
    def test_zero_predictor_unit_loss(self):
        gd = GlobalDenoiserParams.create(d_z=4, width=8, seed=0)
        for w in gd.out_proj.weights:
            w[:] = 0.0
        for b in gd.out_proj.biases:
            b[:] = 0.0
        s = NoiseSchedule.create(30)
        rng = np.random.default_rng(12)
        losses = [
            global_diffusion_loss(gd, s, rng.normal(size=4), rng)[0]
            for _ in range(10_000)
        ]
        assert abs(np.mean(losses) - 1.0) < 0.1

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        gd = GlobalDenoiserParams.create(d_z=3, width=6, n_blocks=1, seed=seed)
        s = NoiseSchedule.create(15)
        z0 = np.random.default_rng(seed + 30).normal(size=3)

        def loss_fn(params):
            loss, grads = global_diffusion_loss(
                gd, s, z0, np.random.default_rng(seed + 50)
            )
            return loss, grads

        report = grad_check(loss_fn, gd.params(), tolerance=1e-4, h=1e-4)
        assert report.ok, str(report)


@pytest.fixture(scope="module")
def trained_vae():
    data = synth_set(ShapeFamilyConfig(points_per_part=(10, 10), seed=6), 6)
    vae = VaeParams.create(d=2, c=2, d_z=3, d_h=2, hidden=8, seed=0)
    train_vae(vae, data, VaeTrainConfig(epochs=5, seed=0))
    return vae, data


class TestTrainDiffusion:

    def test_single_epoch_finite(self, trained_vae):
        vae, data = trained_vae
        cfg = DiffusionTrainConfig(steps=10, epochs=1, width=8, global_width=8, seed=0)
        _, _, _, curve = train_diffusion(vae, data, cfg)
        assert len(curve) == 1
        assert np.isfinite(curve[0]["point_noise"])
        assert np.isfinite(curve[0]["seg_ce"])
        assert np.isfinite(curve[0]["global_noise"])

    def test_ce_decreases(self, trained_vae):
        vae, data = trained_vae
        cfg = DiffusionTrainConfig(steps=10, epochs=40, width=8, global_width=8, seed=1)
        _, _, _, curve = train_diffusion(vae, data, cfg)
        assert curve[-1]["seg_ce"] < curve[0]["seg_ce"]

    def test_fully_labeled_semi_equals_supervised(self, trained_vae):
        vae, data = trained_vae
        cfg_sup = DiffusionTrainConfig(steps=10, epochs=2, width=8, global_width=8, seed=2)
        cfg_semi = DiffusionTrainConfig(
            steps=10, epochs=2, width=8, global_width=8, seed=2,
            semi_supervised=True, labeled_fraction=1.0,
        )
        gd1, pd1, _, _ = train_diffusion(vae, data, cfg_sup)
        gd2, pd2, _, _ = train_diffusion(vae, data, cfg_semi)
        for (k1, p1), (k2, p2) in zip(
            sorted({**gd1.params(), **pd1.params()}.items()),
            sorted({**gd2.params(), **pd2.params()}.items()),
        ):
            assert k1 == k2 and p1.tobytes() == p2.tobytes()

    def test_unlabeled_fraction_trains(self, trained_vae):
        vae, data = trained_vae
        cfg = DiffusionTrainConfig(
            steps=10, epochs=2, width=8, global_width=8, seed=3,
            semi_supervised=True, labeled_fraction=0.5,
        )
        _, _, _, curve = train_diffusion(vae, data, cfg)
        assert np.isfinite(curve[-1]["point_noise"])
