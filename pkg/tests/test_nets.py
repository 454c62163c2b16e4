import numpy as np
import pytest

from atlasforge import autodiff as ad
from atlasforge import diffeo
from atlasforge.autodiff import ShapeError, Tensor, check_gradients
from atlasforge.nets import (
    ArchConfig,
    ParamStore,
    init_model,
    latent_encoder_forward,
    registration_unet_forward,
    template_decoder_forward,
    unconditional_template,
)


class TestParamStore:
    def test_add_get_order(self):
        s = ParamStore()
        s.add("b/x", np.ones(2))
        s.add("a/y", np.zeros(3))
        assert s.names() == ["b/x", "a/y"]
        assert s["a/y"].data.shape == (3,)
        assert "b/x" in s and "c" not in s
        assert s.size() == 5

    def test_duplicate_rejected(self):
        s = ParamStore()
        s.add("w", np.ones(1))
        with pytest.raises(ValueError, match="already exists"):
            s.add("w", np.ones(1))

    def test_nonfinite_rejected(self):
        s = ParamStore()
        with pytest.raises(ValueError, match="non-finite"):
            s.add("w", np.array([np.inf]))
        s.add("ok", np.ones(1))
        s["ok"].data[0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            s.check_finite()

    def test_missing_param_message(self):
        with pytest.raises(KeyError, match="template/pixels"):
            unconditional_template(ParamStore())


class TestArchConfig:
    def test_defaults_valid(self):
        arch = ArchConfig()
        assert arch.decoder_levels == 3

    def test_64_has_four_levels(self):
        assert ArchConfig(height=64, width=64).decoder_levels == 4

    @pytest.mark.parametrize(
        "kw",
        [
            dict(height=48, width=48),  # 48/4 = 12, not a power of two
            dict(height=32, width=64),
            dict(height=24, width=24),  # not divisible by 2^4
            dict(decoder_k=0),
        ],
    )
    def test_invalid_rejected(self, kw):
        with pytest.raises(ValueError):
            ArchConfig(**kw)


class TestNaming:
    def test_unconditional_names(self):
        m = init_model("unconditional", ArchConfig(), seed=0)
        names = set(m.params.names())
        assert "template/pixels" in names
        for i in range(4):
            assert f"unet/down{i}/conv1/w" in names
            assert f"unet/up{i}/conv1/w" in names
        assert {"unet/up3/conv2/w", "unet/up3/conv3/w", "unet/final/w"} <= names
        assert not any(n.startswith("decoder") for n in names)

    def test_conditional_names(self):
        m = init_model("conditional", ArchConfig(attr_len=10), seed=0)
        names = set(m.params.names())
        assert {"decoder/dense/w", "decoder/dense/b", "decoder/final/w"} <= names
        for i in range(3):
            for j in (1, 2):
                assert f"decoder/lvl{i}/conv{j}/w" in names
                assert f"decoder/lvl{i}/conv{j}/b" in names
        assert "template/pixels" not in names

    def test_latent_names(self):
        arch = ArchConfig(attr_len=1, latent_dim=1, decoder_k=2)
        m = init_model("latent", arch, seed=0)
        names = set(m.params.names())
        for i in range(4):
            assert f"encoder/down{i}/conv1/w" in names
        assert {"encoder/dense/w", "encoder/dense/b"} <= names


class TestShapes:
    @pytest.mark.parametrize("side", [32, 64])
    @pytest.mark.parametrize("attr_len", [1, 10, 13])
    def test_decoder_contract(self, side, attr_len, rng):
        arch = ArchConfig(height=side, width=side, attr_len=attr_len)
        m = init_model("conditional", arch, seed=1)
        a = rng.uniform(size=(3, attr_len)).astype(np.float32)
        out = template_decoder_forward(m.params, a, arch)
        assert out.data.shape == (3, side, side, 1)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    @pytest.mark.parametrize("side", [32, 64])
    def test_unet_contract(self, side, rng):
        arch = ArchConfig(height=side, width=side)
        m = init_model("unconditional", arch, seed=1)
        t = rng.uniform(size=(2, side, side, 1)).astype(np.float32)
        x = rng.uniform(size=(2, side, side, 1)).astype(np.float32)
        v = registration_unet_forward(m.params, Tensor(t), Tensor(x), arch)
        assert v.data.shape == (2, side, side, 2)

    @pytest.mark.parametrize("side", [32, 64])
    def test_encoder_contract(self, side, rng):
        arch = ArchConfig(height=side, width=side, attr_len=1, latent_dim=1, decoder_k=2)
        m = init_model("latent", arch, seed=1)
        x = rng.uniform(size=(4, side, side, 1)).astype(np.float32)
        z = latent_encoder_forward(m.params, Tensor(x), arch)
        assert z.data.shape == (4, 1)

    def test_decoder_deterministic(self, rng):
        arch = ArchConfig(attr_len=10)
        m = init_model("conditional", arch, seed=3)
        a = rng.uniform(size=(2, 10)).astype(np.float32)
        out1 = template_decoder_forward(m.params, a, arch)
        out2 = template_decoder_forward(m.params, a, arch)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_attr_len_mismatch(self):
        arch = ArchConfig(attr_len=10)
        m = init_model("conditional", arch, seed=0)
        with pytest.raises(ShapeError):
            template_decoder_forward(m.params, np.ones((2, 7), dtype=np.float32), arch)

    def test_unet_dim_mismatch(self):
        arch = ArchConfig()
        m = init_model("unconditional", arch, seed=0)
        t = Tensor(np.zeros((1, 32, 32, 1), dtype=np.float32))
        x = Tensor(np.zeros((1, 16, 16, 1), dtype=np.float32))
        with pytest.raises(ShapeError):
            registration_unet_forward(m.params, t, x, arch)

    def test_encoder_dim_mismatch(self):
        arch = ArchConfig(attr_len=1, latent_dim=1, decoder_k=2)
        m = init_model("latent", arch, seed=0)
        with pytest.raises(ShapeError):
            latent_encoder_forward(
                m.params, Tensor(np.zeros((1, 16, 16, 1), dtype=np.float32)), arch
            )


class TestModel:
    def test_unconditional_template_init_returned_exactly(self, rng):
        init = rng.uniform(size=(32, 32)).astype(np.float32)
        m = init_model("unconditional", ArchConfig(), seed=0, template_init=init)
        out = m.template(attrs=np.ones((1, 1), dtype=np.float32))
        np.testing.assert_array_equal(out.data[0, :, :, 0], init)
        batched = m.template(attrs=np.ones((5, 1), dtype=np.float32))
        assert batched.data.shape == (5, 32, 32, 1)

    def test_template_init_shape_checked(self):
        with pytest.raises(ValueError):
            init_model(
                "unconditional",
                ArchConfig(),
                template_init=np.zeros((16, 16)),
            )

    def test_latent_needs_images(self):
        arch = ArchConfig(attr_len=1, latent_dim=1, decoder_k=2)
        m = init_model("latent", arch, seed=0)
        with pytest.raises(ValueError, match="images"):
            m.template(attrs=np.ones((1, 1)))
        x = Tensor(np.zeros((2, 32, 32, 1), dtype=np.float32))
        out = m.template(images=x)
        assert out.data.shape == (2, 32, 32, 1)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            init_model("nonsense", ArchConfig())

    def test_mse_gradient_at_identity_is_residual(self, rng):
        # with phi = Id the quadratic data term has gradient (t - x)/sigma^2
        init = rng.uniform(size=(32, 32)).astype(np.float64)
        x = rng.uniform(size=(32, 32)).astype(np.float64)
        m = init_model(
            "unconditional", ArchConfig(), seed=0, dtype=np.float64, template_init=init
        )
        t = m.template(attrs=np.ones((1, 1), dtype=np.float64))
        resid = ad.sub(t, ad.constant(x.reshape(1, 32, 32, 1)))
        loss = ad.mul(ad.tsum(ad.square(resid)), ad.constant(np.float64(0.5)))
        ad.backward(loss)
        np.testing.assert_allclose(
            m.params["template/pixels"].grad, init - x, atol=1e-12
        )


class TestZeroVelocityChain:
    def test_zero_final_layer_identity_warp(self, rng):
        arch = ArchConfig()
        init = rng.uniform(size=(32, 32)).astype(np.float32)
        m = init_model("unconditional", arch, seed=2, template_init=init)
        m.params["unet/final/w"].data[:] = 0.0
        m.params["unet/final/b"].data[:] = 0.0
        x = Tensor(rng.uniform(size=(3, 32, 32, 1)).astype(np.float32))
        t = m.template(attrs=np.ones((3, 1), dtype=np.float32))
        v = m.velocity(t, x)
        np.testing.assert_array_equal(v.data, 0.0)
        warped = diffeo.warp(t, diffeo.integrate_ss(v, 7))
        np.testing.assert_array_equal(warped.data, t.data)

    def test_default_init_near_identity(self, rng):
        arch = ArchConfig()
        m = init_model("unconditional", arch, seed=2)
        t = m.template(attrs=np.ones((2, 1), dtype=np.float32))
        x = Tensor(rng.uniform(size=(2, 32, 32, 1)).astype(np.float32))
        assert np.abs(m.velocity(t, x).data).max() < 1e-3


def small_arch():
    return ArchConfig(
        height=16, width=16, attr_len=3, decoder_k=2, unet_features=4, unet_depth=2,
        latent_dim=3,
    )


class TestGradients:
    def test_decoder_grads(self):
        from conftest import kink_free_seed

        def build(seed):
            arch = small_arch()
            m = init_model("conditional", arch, seed=seed, dtype=np.float64)
            rng = np.random.default_rng(seed + 1000)
            a = ad.constant(rng.uniform(size=(2, 3)))
            target = ad.constant(rng.uniform(size=(2, 16, 16, 1)))

            def loss():
                out = template_decoder_forward(m.params, a, arch)
                return ad.tmean(ad.square(ad.sub(out, target)))

            return loss, dict(m.params.items())

        loss, params, _ = kink_free_seed(build)
        report = check_gradients(loss, params, max_entries=25)
        assert report.ok(1e-4), report.summary()

    def test_unet_through_warp_grads(self):
        from conftest import kink_free_seed

        def build(seed):
            arch = small_arch()
            m = init_model("unconditional", arch, seed=seed, dtype=np.float64)
            rng = np.random.default_rng(seed + 2000)
            # spread the velocities so sampling points sit between grid lines
            m.params["unet/final/w"].data[:] = rng.normal(0, 0.4, size=(16, 3, 3, 2))
            m.params["unet/final/b"].data[:] = rng.normal(0, 0.1, size=2)
            x = ad.constant(rng.uniform(size=(1, 16, 16, 1)))

            def loss():
                t = m.template(attrs=np.ones((1, 1), dtype=np.float64))
                v = m.velocity(t, x)
                warped = diffeo.warp(t, diffeo.integrate_ss(v, 3))
                return ad.tmean(ad.square(ad.sub(warped, x)))

            return loss, dict(m.params.items())

        loss, params, _ = kink_free_seed(build)
        report = check_gradients(loss, params, max_entries=20)
        assert report.ok(1e-4), report.summary()

    def test_encoder_decoder_composite_grads(self):
        from conftest import kink_free_seed

        def build(seed):
            arch = small_arch()
            m = init_model("latent", arch, seed=seed, dtype=np.float64)
            rng = np.random.default_rng(seed + 3000)
            x = ad.constant(rng.uniform(size=(2, 16, 16, 1)))

            def loss():
                out = m.template(images=x)
                return ad.tmean(ad.square(ad.sub(out, x)))

            return loss, dict(m.params.items())

        loss, params, _ = kink_free_seed(build)
        report = check_gradients(loss, params, max_entries=20)
        assert report.ok(1e-4), report.summary()
