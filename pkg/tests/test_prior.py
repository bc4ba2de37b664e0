import numpy as np
import pytest

from reld.diffusion import LatentState, build_schedule, ddim_reverse_step
from reld.prior import (
    BlockDCTCodec,
    GaussianPriorPredictor,
    IdentityCodec,
    MLPPredictor,
    TrainingDivergedError,
    ZeroPredictor,
    analytic_eps,
    generative_map,
    generative_map_vjp,
    make_denoising_dataset,
    train_predictor,
)


class TestIdentityCodec:
    def test_roundtrip_is_exact(self):
        rng = np.random.default_rng(0)
        codec = IdentityCodec((6, 7))
        x = rng.standard_normal((6, 7))
        assert np.array_equal(codec.decode(codec.encode(x)), x)

    def test_latent_size(self):
        assert IdentityCodec((4, 4, 3)).latent_size == 48

    def test_shape_validation(self):
        codec = IdentityCodec((4, 4))
        with pytest.raises(ValueError):
            codec.encode(np.zeros((4, 5)))
        with pytest.raises(ValueError):
            codec.decode(np.zeros(15))


class TestBlockDCTCodec:
    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(1)
        codec = BlockDCTCodec((16, 16), block_size=4, kept=6)
        x = rng.standard_normal((16, 16))
        proj = codec.decode(codec.encode(x))
        proj2 = codec.decode(codec.encode(proj))
        assert np.max(np.abs(proj2 - proj)) <= 1e-10

    def test_projection_is_self_adjoint(self):
        rng = np.random.default_rng(2)
        codec = BlockDCTCodec((8, 8), block_size=4, kept=5)
        x, y = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        px = codec.decode(codec.encode(x))
        py = codec.decode(codec.encode(y))
        assert abs(np.vdot(px, y) - np.vdot(x, py)) <= 1e-10

    def test_encode_decode_adjointness(self):
        rng = np.random.default_rng(3)
        codec = BlockDCTCodec((8, 8), block_size=4, kept=7)
        z = rng.standard_normal(codec.latent_size)
        x = rng.standard_normal((8, 8))
        assert abs(np.vdot(codec.decode(z), x) - np.vdot(z, codec.encode(x))) <= 1e-10

    def test_encode_of_decode_is_identity_on_latents(self):
        rng = np.random.default_rng(4)
        codec = BlockDCTCodec((8, 8), block_size=4, kept=3)
        z = rng.standard_normal(codec.latent_size)
        assert np.max(np.abs(codec.encode(codec.decode(z)) - z)) <= 1e-12

    def test_full_coefficients_make_it_lossless(self):
        rng = np.random.default_rng(5)
        codec = BlockDCTCodec((8, 8), block_size=4, kept=16)
        x = rng.standard_normal((8, 8))
        assert np.max(np.abs(codec.decode(codec.encode(x)) - x)) <= 1e-12

    def test_multichannel_latent_size(self):
        codec = BlockDCTCodec((16, 16, 3), block_size=8, kept=10)
        assert codec.latent_size == 3 * 4 * 10
        rng = np.random.default_rng(6)
        x = rng.standard_normal((16, 16, 3))
        assert codec.decode(codec.encode(x)).shape == (16, 16, 3)

    def test_invalid_construction(self):
        with pytest.raises(ValueError):
            BlockDCTCodec((10, 10), block_size=4, kept=2)
        with pytest.raises(ValueError):
            BlockDCTCodec((8, 8), block_size=4, kept=0)
        with pytest.raises(ValueError):
            BlockDCTCodec((8, 8), block_size=4, kept=17)


class TestAnalyticEps:
    def test_on_mean_input_gives_zero(self):
        m = np.array([1.0, -2.0, 0.5])
        ab = 0.7
        out = analytic_eps(np.sqrt(ab) * m, ab, m, tau=0.8)
        assert np.allclose(out, 0.0, atol=1e-14)

    def test_unit_gaussian_prior_shrinkage(self):
        # m=0, tau=1: denominator is 1, output sqrt(1-ab) * z
        z = np.array([1.0, 2.0])
        out = analytic_eps(z, 0.36, np.zeros(2), 1.0)
        assert np.allclose(out, 0.8 * z, atol=1e-14)

    def test_point_mass_prior_implies_clean_mean(self):
        rng = np.random.default_rng(7)
        m = rng.standard_normal(5)
        z = rng.standard_normal(5)
        ab = 0.45
        eps = analytic_eps(z, ab, m, tau=0.0)
        assert np.allclose(eps, (z - np.sqrt(ab) * m) / np.sqrt(1 - ab), atol=1e-13)
        _, z_hat = ddim_reverse_step(z, eps, ab, 1.0)
        assert np.max(np.abs(z_hat - m)) <= 1e-12

    def test_degenerate_denominator_rejected(self):
        with pytest.raises(ValueError):
            analytic_eps(np.zeros(2), 1.0, np.zeros(2), 0.0)
        with pytest.raises(ValueError):
            analytic_eps(np.zeros(2), 0.5, np.zeros(2), -1.0)


def small_mlp_setup(seed=11, p=3):
    sched = build_schedule(40)
    codec = BlockDCTCodec((8, 8), block_size=4, kept=5)
    s = codec.latent_size
    net = MLPPredictor.initialize(s, s, hidden=16, schedule=sched, seed=seed)
    return sched, codec, net, p


class TestGenerativeMap:
    def test_zero_predictor_identity_codec_is_scaled_slice(self):
        sched = build_schedule(20)
        codec = IdentityCodec((3, 4))
        rng = np.random.default_rng(8)
        v = LatentState(rng.standard_normal(5), rng.standard_normal(12))
        p = 6
        out = generative_map(v, p, ZeroPredictor(12), sched, codec)
        expected = (v.z / np.sqrt(sched.alpha_bar_at(p))).reshape(3, 4)
        assert np.allclose(out, expected, atol=1e-12)

    def test_point_mass_prior_gives_constant_output(self):
        sched = build_schedule(30)
        codec = IdentityCodec((2, 3))
        rng = np.random.default_rng(9)
        m = rng.standard_normal(6)
        predictor = GaussianPriorPredictor(m, 0.0, sched)
        for seed in (1, 2):
            v = LatentState(rng.standard_normal(4), 5 * rng.standard_normal(6))
            out = generative_map(v, 10, predictor, sched, codec)
            assert np.max(np.abs(out - m.reshape(2, 3))) <= 1e-10

    def test_block_codec_output_stays_in_range_subspace(self):
        sched, codec, net, p = small_mlp_setup()
        rng = np.random.default_rng(10)
        v = LatentState(rng.standard_normal(codec.latent_size), rng.standard_normal(codec.latent_size))
        out = generative_map(v, p, net, sched, codec)
        residual = out - codec.decode(codec.encode(out))
        assert np.max(np.abs(residual)) <= 1e-10


class TestGenerativeMapVjp:
    def test_zero_predictor_embeds_weight_in_diffusion_slot(self):
        sched = build_schedule(20)
        codec = IdentityCodec((3, 3))
        rng = np.random.default_rng(11)
        v = LatentState(rng.standard_normal(4), rng.standard_normal(9))
        w = rng.standard_normal((3, 3))
        p = 5
        g = generative_map_vjp(v, w, p, ZeroPredictor(9), sched, codec)
        assert np.allclose(g.a, 0.0, atol=1e-15)
        assert np.allclose(g.z, w.ravel() / np.sqrt(sched.alpha_bar_at(p)), atol=1e-12)

    def test_point_mass_prior_has_zero_gradient(self):
        sched = build_schedule(25)
        codec = IdentityCodec((2, 2))
        rng = np.random.default_rng(12)
        predictor = GaussianPriorPredictor(rng.standard_normal(4), 0.0, sched)
        v = LatentState(rng.standard_normal(3), rng.standard_normal(4))
        g = generative_map_vjp(v, rng.standard_normal((2, 2)), 4, predictor, sched, codec)
        assert np.max(np.abs(g.z)) <= 1e-12
        assert np.max(np.abs(g.a)) <= 1e-12

    def test_matches_finite_differences_on_all_coordinates(self):
        sched, codec, net, p = small_mlp_setup()
        rng = np.random.default_rng(13)
        s1 = codec.latent_size
        v = LatentState(rng.standard_normal(s1), rng.standard_normal(codec.latent_size))
        w = rng.standard_normal((8, 8))
        g = generative_map_vjp(v, w, p, net, sched, codec).concat()

        def f(vec):
            state = LatentState.from_concat(vec, s1)
            return float(np.vdot(generative_map(state, p, net, sched, codec), w))

        v0 = v.concat()
        h = 1e-5
        fd = np.empty(v0.size)
        for j in range(v0.size):
            e = np.zeros(v0.size)
            e[j] = h
            fd[j] = (f(v0 + e) - f(v0 - e)) / (2 * h)
        scale = np.max(np.abs(fd))
        assert np.max(np.abs(g - fd)) <= 1e-4 * scale

    def test_matches_finite_differences_without_skip(self):
        # conditioning slot smaller than the diffusion slot
        sched = build_schedule(30)
        codec = IdentityCodec((2, 3))
        net = MLPPredictor.initialize(2, 6, hidden=8, schedule=sched, seed=3)
        rng = np.random.default_rng(14)
        v = LatentState(rng.standard_normal(2), rng.standard_normal(6))
        w = rng.standard_normal((2, 3))
        g = generative_map_vjp(v, w, 2, net, sched, codec).concat()

        def f(vec):
            state = LatentState.from_concat(vec, 2)
            return float(np.vdot(generative_map(state, 2, net, sched, codec), w))

        v0 = v.concat()
        h = 1e-5
        fd = np.array([(f(v0 + h * e) - f(v0 - h * e)) / (2 * h) for e in np.eye(v0.size)])
        assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))

    def test_linearity_in_weight(self):
        sched, codec, net, p = small_mlp_setup(seed=21)
        rng = np.random.default_rng(15)
        s1 = codec.latent_size
        v = LatentState(rng.standard_normal(s1), rng.standard_normal(codec.latent_size))
        w1, w2 = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        alpha = 1.7
        g_combo = generative_map_vjp(v, alpha * w1 + w2, p, net, sched, codec).concat()
        g1 = generative_map_vjp(v, w1, p, net, sched, codec).concat()
        g2 = generative_map_vjp(v, w2, p, net, sched, codec).concat()
        assert np.max(np.abs(g_combo - (alpha * g1 + g2))) <= 1e-12 * max(1.0, np.max(np.abs(g_combo)))

    def test_affine_prior_vjp_independent_of_state(self):
        sched = build_schedule(30)
        codec = IdentityCodec((2, 2))
        predictor = GaussianPriorPredictor(np.ones(4), 0.7, sched)
        rng = np.random.default_rng(16)
        w = rng.standard_normal((2, 2))
        g1 = generative_map_vjp(LatentState(rng.standard_normal(2), rng.standard_normal(4)), w, 5, predictor, sched, codec)
        g2 = generative_map_vjp(LatentState(rng.standard_normal(2), rng.standard_normal(4)), w, 5, predictor, sched, codec)
        assert np.max(np.abs(g1.z - g2.z)) <= 1e-10
        assert np.max(np.abs(g1.a - g2.a)) <= 1e-10

    def test_predictor_without_gradient_rule_rejected(self):
        sched = build_schedule(10)
        codec = IdentityCodec((2, 2))
        v = LatentState(np.zeros(2), np.zeros(4))

        def bare_predictor(state, t):
            return np.zeros(4)

        with pytest.raises(TypeError, match="gradient"):
            generative_map_vjp(v, np.zeros((2, 2)), 2, bare_predictor, sched, codec)


class TestMLPPredictor:
    def test_serialization_roundtrip_is_exact(self, tmp_path):
        sched = build_schedule(12, 0.01, 0.2)
        net = MLPPredictor.initialize(5, 5, hidden=7, schedule=sched, seed=4)
        net.set_input_standardization(np.arange(11.0), np.full(11, 0.5))
        path = tmp_path / "net.npz"
        net.save(path)
        loaded = MLPPredictor.load(path)
        rng = np.random.default_rng(17)
        state = LatentState(rng.standard_normal(5), rng.standard_normal(5))
        assert np.array_equal(net(state, 3), loaded(state, 3))
        assert loaded.schedule_hash == sched.content_hash()
        assert np.array_equal(loaded.alpha_bar, sched.alpha_bar)

    def test_wrong_file_kind_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, kind=np.array("something-else"))
        with pytest.raises(IOError):
            MLPPredictor.load(path)

    def test_state_size_validation(self):
        sched = build_schedule(8)
        net = MLPPredictor.initialize(3, 4, hidden=5, schedule=sched, seed=0)
        with pytest.raises(ValueError):
            net(LatentState(np.zeros(3), np.zeros(5)), 1)


class TestTraining:
    def test_loss_decreases_on_point_mass_dataset(self):
        sched = build_schedule(10, 0.02, 0.3)
        z0 = np.array([1.0, -1.0, 0.5, 2.0])
        dataset = [(z0, np.zeros(2))]
        net = train_predictor(dataset, sched, steps=300, seed=1, hidden=16, batch_size=16, lr=5e-3)
        assert net.loss_trace[-10:].mean() < net.loss_trace[:10].mean()

    def test_fixed_seed_reproduces_parameters(self):
        sched = build_schedule(10, 0.02, 0.3)
        rng = np.random.default_rng(18)
        dataset = [(rng.standard_normal(4), rng.standard_normal(4)) for _ in range(8)]
        net1 = train_predictor(dataset, sched, steps=50, seed=9, hidden=8, batch_size=4)
        net2 = train_predictor(dataset, sched, steps=50, seed=9, hidden=8, batch_size=4)
        assert np.array_equal(net1.params_flat(), net2.params_flat())
        assert np.array_equal(net1.loss_trace, net2.loss_trace)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_predictor([], build_schedule(5), steps=1, seed=0)

    def test_divergence_raises_with_step_index(self):
        sched = build_schedule(10, 0.02, 0.3)
        dataset = [(np.full(4, 1e3), np.zeros(4))]
        # a step length this large drives the output layer past overflow, so
        # the squared error becomes inf within a couple of steps
        with np.errstate(over="ignore"), pytest.raises(TrainingDivergedError) as err:
            train_predictor(dataset, sched, steps=50, seed=2, hidden=8, batch_size=8, lr=1e200)
        assert err.value.step >= 0

    def test_make_denoising_dataset(self):
        codec = BlockDCTCodec((8, 8), block_size=4, kept=4)
        images = [np.full((8, 8), 0.3), np.full((8, 8), 0.7)]
        pairs = make_denoising_dataset(images, codec, sigma_max=0.1, seed=3)
        assert len(pairs) == 2
        for z0, cond in pairs:
            assert z0.shape == (codec.latent_size,)
            assert cond.shape == (codec.latent_size,)
        again = make_denoising_dataset(images, codec, sigma_max=0.1, seed=3)
        assert np.array_equal(pairs[0][1], again[0][1])
