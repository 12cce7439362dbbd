import pytest
import torch

from adacode.errors import InvalidInputError
from adacode.networks import (
    ConvProjection,
    Decoder,
    Encoder,
    FeatureExtractor,
    PatchDiscriminator,
    RestorationEncoder,
    conv_project,
    decode,
    discriminate,
    encode,
    encode_restoration,
    extract_features,
    upsample_input,
    zero_parameters,
)

TINY = dict(latent_dim=8, channels=(8, 16), factor=4)


def seeded(cls, *args, seed=0, **kwargs):
    torch.manual_seed(seed)
    return cls(*args, **kwargs).double()


class TestEncoder:
    def test_shape_f8(self):
        z = encode(torch.rand(1, 3, 64, 64), Encoder(latent_dim=32, factor=8))
        assert z.shape == (1, 32, 8, 8)

    def test_shape_f16(self):
        enc = Encoder(latent_dim=4, channels=(4, 4, 4, 4), factor=16)
        assert enc(torch.rand(1, 3, 512, 512)).shape == (1, 4, 32, 32)

    def test_rejects_indivisible(self):
        with pytest.raises(InvalidInputError):
            Encoder(factor=16)(torch.rand(1, 3, 72, 64))

    def test_rejects_bad_factor(self):
        with pytest.raises(InvalidInputError):
            Encoder(factor=6)

    def test_round_trip_dims(self):
        enc, dec = Encoder(**TINY), Decoder(**TINY)
        x = torch.rand(2, 3, 16, 24)
        assert dec(enc(x)).shape == x.shape

    def test_finite_difference(self, fd_errors):
        enc = seeded(Encoder, **TINY)
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        target = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        errors = fd_errors(lambda: ((enc(x) - target) ** 2).mean(), list(enc.parameters()), count=20)
        assert max(errors) < 1e-4

    def test_input_gradcheck(self):
        enc = seeded(Encoder, **TINY)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(enc, (x,), eps=1e-6, atol=1e-5)


class TestDecoder:
    def test_shape(self):
        assert decode(torch.randn(1, 32, 8, 8), Decoder(latent_dim=32, factor=8)).shape == (1, 3, 64, 64)

    def test_zero_parameters_constant(self):
        out = zero_parameters(Decoder(**TINY))(torch.randn(1, 8, 3, 3))
        assert torch.all(out == out.flatten()[0])

    def test_clip_only_on_request(self):
        dec = Decoder(**TINY)
        with torch.no_grad():
            dec.head[-1].bias.fill_(5.0)
        z = torch.randn(1, 8, 2, 2)
        assert decode(z, dec).max() > 1.0
        assert decode(z, dec, clip=True).max() <= 1.0

    def test_rejects_wrong_latent_dim(self):
        with pytest.raises(InvalidInputError):
            Decoder(**TINY)(torch.randn(1, 7, 2, 2))

    def test_finite_difference(self, fd_errors):
        dec = seeded(Decoder, **TINY)
        z = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        target = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        errors = fd_errors(lambda: (dec(z) - target).abs().mean(), list(dec.parameters()), count=20)
        assert max(errors) < 1e-4


class TestDiscriminator:
    def test_logit_grid(self):
        assert discriminate(torch.rand(1, 3, 64, 64), PatchDiscriminator(stride=8)).shape == (1, 1, 8, 8)

    def test_zero_parameters(self):
        d = zero_parameters(PatchDiscriminator(channels=(4, 8), stride=4))
        assert torch.count_nonzero(d(torch.rand(1, 3, 16, 16))) == 0

    def test_deterministic(self):
        d = PatchDiscriminator(channels=(4, 8), stride=4)
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(d(x), d(x))

    def test_rejects_indivisible(self):
        with pytest.raises(InvalidInputError):
            PatchDiscriminator(stride=8)(torch.rand(1, 3, 20, 16))

    def test_finite_difference(self, fd_errors):
        d = seeded(PatchDiscriminator, channels=(4, 8), stride=4)
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        errors = fd_errors(lambda: torch.relu(1 - d(x)).mean() + d(x).pow(2).mean(), list(d.parameters()), count=20)
        assert max(errors) < 1e-4


class TestFeatureExtractor:
    def test_latent_resolution(self):
        phi = FeatureExtractor(out_dim=16, channels=(8, 16), factor=4)
        assert extract_features(torch.rand(1, 3, 16, 16), phi).shape == (1, 16, 4, 4)

    def test_same_seed_same_features(self):
        x = torch.rand(1, 3, 16, 16)
        a = FeatureExtractor(16, (8, 16), factor=4, seed=3)(x)
        b = FeatureExtractor(16, (8, 16), factor=4, seed=3)(x)
        assert torch.equal(a, b)

    def test_seed_independent_of_global_rng(self):
        torch.manual_seed(1)
        a = FeatureExtractor(16, (8, 16), factor=4, seed=0)
        torch.manual_seed(2)
        b = FeatureExtractor(16, (8, 16), factor=4, seed=0)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_distinct_images_distinct_features(self):
        phi = FeatureExtractor(16, (8, 16), factor=4)
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(2, 1, 3, 16, 16, generator=g)
        assert not torch.allclose(phi(a), phi(b))

    def test_frozen(self):
        phi = FeatureExtractor(16, (8, 16), factor=4)
        phi.train()
        assert not phi.training
        assert all(not p.requires_grad for p in phi.parameters())


class TestConvProjection:
    def test_shape(self):
        assert conv_project(torch.randn(1, 8, 8, 8), ConvProjection(8, 16)).shape == (1, 16, 8, 8)

    def test_identity_init(self):
        proj = ConvProjection(4, 4)
        with torch.no_grad():
            proj.conv.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
            proj.conv.bias.zero_()
        z = torch.randn(2, 4, 3, 3)
        assert torch.equal(proj(z), z)

    def test_linear_without_bias(self):
        proj = ConvProjection(4, 6, bias=False).double()
        a, b = torch.randn(2, 1, 4, 3, 3, dtype=torch.float64)
        torch.testing.assert_close(proj(a + b), proj(a) + proj(b), rtol=0, atol=1e-12)

    def test_rejects_wrong_dim(self):
        with pytest.raises(InvalidInputError):
            ConvProjection(4, 6)(torch.randn(1, 5, 2, 2))


class TestRestorationEncoder:
    def test_shape_matches_plain(self):
        enc = RestorationEncoder(**TINY)
        assert encode_restoration(torch.rand(1, 3, 16, 16), enc).shape == (1, 8, 4, 4)

    def test_zero_shortcut_is_plain_path(self):
        torch.manual_seed(0)
        plain = Encoder(**TINY)
        torch.manual_seed(0)
        restoration = RestorationEncoder(**TINY)
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(plain(x), restoration(x))

    def test_gradient_through_both_paths(self):
        torch.manual_seed(0)
        enc = RestorationEncoder(**TINY).double()
        torch.nn.init.normal_(enc.shortcut[1].weight)
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        enc(x).pow(2).sum().backward()
        assert enc.stem.weight.grad.abs().sum() > 0
        assert enc.shortcut[1].weight.grad.abs().sum() > 0
        assert enc.head[-1].weight.grad.abs().sum() > 0

    def test_finite_difference(self, fd_errors):
        enc = seeded(RestorationEncoder, in_channels=4, **TINY)
        with torch.no_grad():
            enc.shortcut[1].weight.normal_()
        x = torch.rand(1, 4, 16, 16, dtype=torch.float64)
        errors = fd_errors(lambda: enc(x).pow(2).mean(), list(enc.parameters()), count=20)
        assert max(errors) < 1e-4


def test_upsample_input():
    lr = torch.rand(1, 3, 4, 4)
    up = upsample_input(lr, (16, 16))
    assert up.shape == (1, 3, 16, 16)
    assert up.min() >= 0 and up.max() <= 1
    assert upsample_input(lr, (4, 4)) is lr
