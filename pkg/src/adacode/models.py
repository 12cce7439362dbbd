"""Composite models for the three training stages."""

from __future__ import annotations

from typing import Sequence

from torch import Tensor, nn

from .adaptive import BasisSet, WeightPredictor, combine, quantize_all
from .codebook import VectorCodebook, quantize, straight_through
from .config import NetworkConfig
from .networks import (
    ConvProjection,
    Decoder,
    Encoder,
    FeatureExtractor,
    PatchDiscriminator,
    RestorationEncoder,
)


def build_encoder(net: NetworkConfig, in_channels: int = 3, restoration: bool = False) -> Encoder:
    cls = RestorationEncoder if restoration else Encoder
    return cls(in_channels=in_channels, latent_dim=net.latent_dim, channels=net.channels, factor=net.factor)


def build_decoder(net: NetworkConfig) -> Decoder:
    return Decoder(latent_dim=net.latent_dim, channels=net.channels, factor=net.factor)


def build_discriminator(net: NetworkConfig) -> PatchDiscriminator:
    return PatchDiscriminator(channels=net.disc_channels, stride=net.disc_stride)


def build_feature_extractor(net: NetworkConfig) -> FeatureExtractor:
    return FeatureExtractor(
        out_dim=net.feature_dim, channels=net.feature_channels, factor=net.factor, seed=net.feature_seed
    )


def build_weight_predictor(net: NetworkConfig, num_bases: int) -> WeightPredictor:
    return WeightPredictor(
        net.latent_dim,
        num_bases,
        dim=net.predictor_dim,
        depth=net.predictor_depth,
        heads=net.predictor_heads,
        window=net.predictor_window,
    )


class VQModel(nn.Module):
    """Single-codebook quantized autoencoder trained per super-class."""

    def __init__(self, net: NetworkConfig, num_codes: int, class_label: str):
        super().__init__()
        self.net_config = net
        self.encoder = build_encoder(net)
        self.codebook = VectorCodebook(num_codes, net.latent_dim, class_label)
        self.decoder = build_decoder(net)
        self.conv_proj = ConvProjection(net.latent_dim, net.feature_dim)
        self.discriminator = build_discriminator(net)
        self.features = build_feature_extractor(net)

    def forward(self, image: Tensor) -> dict[str, Tensor]:
        continuous = self.encoder(image)
        quantized, indices = quantize(continuous, self.codebook.entries)
        decoder_input = straight_through(continuous, quantized)
        return {
            "continuous": continuous,
            "quantized": quantized,
            "indices": indices,
            "decoder_input": decoder_input,
            "recon": self.decoder(decoder_input),
        }

    def reconstruct(self, image: Tensor) -> Tensor:
        return self(image)["recon"]


class AdaCodeModel(nn.Module):
    """Encoder, frozen basis codebooks, weight predictor and decoder.

    ``restoration=True`` swaps in the shortcut encoder used for restoration
    tasks; ``in_channels=4`` accepts a mask channel for inpainting.
    """

    def __init__(
        self,
        net: NetworkConfig,
        codebooks: Sequence[VectorCodebook],
        in_channels: int = 3,
        restoration: bool = False,
    ):
        super().__init__()
        self.net_config = net
        self.encoder = build_encoder(net, in_channels, restoration)
        self.basis = BasisSet(codebooks).freeze()
        self.weight_predictor = build_weight_predictor(net, len(codebooks))
        self.decoder = build_decoder(net)
        self.discriminator = build_discriminator(net)
        self.features = build_feature_extractor(net)

    def represent(self, image: Tensor, weights: Tensor | None = None) -> dict[str, Tensor]:
        """Encoder output, per-basis quantization, weight map and blended latent.

        ``weights`` overrides the predicted map (e.g. one-hot routing).
        """
        continuous = self.encoder(image)
        results = quantize_all(continuous, self.basis)
        quantized = [q for q, _ in results]
        if weights is None:
            weights = self.weight_predictor(continuous)
        blended = combine([straight_through(continuous, q) for q in quantized], weights)
        return {
            "continuous": continuous,
            "quantized": quantized,
            "indices": [i for _, i in results],
            "weights": weights,
            "blended": blended,
        }

    def forward(self, image: Tensor, weights: Tensor | None = None) -> dict[str, Tensor]:
        out = self.represent(image, weights)
        out["recon"] = self.decoder(out["blended"])
        return out

    def reconstruct(self, image: Tensor) -> Tensor:
        return self(image)["recon"]
