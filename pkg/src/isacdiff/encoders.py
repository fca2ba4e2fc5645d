"""Sensing and location encoders plus the cross-modal fusion block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    BatchNorm,
    ConfigurationError,
    Conv2d,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Tensor,
    relu,
)
from .numerics.tensor import as_tensor, reshape

COORD_SCALE = 100.0


@dataclass(frozen=True)
class EncoderConfig:
    receive_aps: int = 2
    antennas: int = 8
    conv_filters: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    token_dim: int = 16
    location_hidden: int = 64
    heads: int = 8
    ffn_hidden: int = 128
    mmt_dim: int = 128
    reference_ap: tuple[float, float] = (0.0, 50.0)


def sensing_planes(h_sens: np.ndarray) -> np.ndarray:
    """[..., L_r, M, M] complex -> [..., L_r, 2, M, M] real (re, im planes)."""
    return np.stack([h_sens.real, h_sens.imag], axis=-3)


def location_features(ue_xy: np.ndarray, reference=(0.0, 50.0)) -> np.ndarray:
    """(x, y, r, theta) per UE; x, y, r divided by 100 m, theta in radians.

    A UE exactly on the reference AP gets theta = 0.
    """
    ue_xy = np.atleast_2d(np.asarray(ue_xy, float))
    d = ue_xy - np.asarray(reference, float)
    r = np.hypot(d[:, 0], d[:, 1])
    theta = np.where(r > 0, np.arctan2(d[:, 1], d[:, 0]), 0.0)
    return np.column_stack([ue_xy / COORD_SCALE, r / COORD_SCALE, theta])


class SensingEncoder(Module):
    """Shared conv trunk applied to each receiving AP's (re, im) planes.

    Each AP yields one ``token_dim`` token, so the output token order
    follows the AP order of the input.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        channels = (2,) + tuple(cfg.conv_filters)
        pad = cfg.kernel // 2
        self.convs = [Conv2d(a, b, cfg.kernel, rng, padding=pad) for a, b in zip(channels[:-1], channels[1:])]
        self.norms = [BatchNorm(b) for b in channels[1:]]
        self.project = Linear(channels[-1] * cfg.antennas ** 2, cfg.token_dim, rng)

    def forward(self, planes) -> Tensor:
        planes = as_tensor(planes)
        lead = planes.shape[:-4]
        if planes.shape[-4:] != (self.cfg.receive_aps, 2, self.cfg.antennas, self.cfg.antennas):
            raise ConfigurationError(
                f"sensing input {planes.shape} does not match L_r={self.cfg.receive_aps}, "
                f"M={self.cfg.antennas}")
        n_tokens = int(np.prod(lead, dtype=int)) * self.cfg.receive_aps
        x = reshape(planes, (n_tokens, 2, self.cfg.antennas, self.cfg.antennas))
        for conv, norm in zip(self.convs, self.norms):
            x = relu(norm(conv(x)))
        x = self.project(reshape(x, (n_tokens, -1)))
        return reshape(x, lead + (self.cfg.receive_aps, self.cfg.token_dim))


class LocationEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.net = MLP([4, cfg.location_hidden, cfg.token_dim], rng)

    def forward(self, features) -> Tensor:
        return self.net(features)


class CrossModalFusion(Module):
    """Self-attention over sensing tokens, location-queried cross-attention, feedforward."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.token_dim, cfg.heads, rng)
        self.cross_attn = MultiHeadAttention(cfg.token_dim, cfg.heads, rng)
        self.ffn = MLP([cfg.token_dim, cfg.ffn_hidden, cfg.mmt_dim], rng)
        self.token_dim = cfg.token_dim

    def forward(self, tokens, location) -> Tensor:
        tokens, location = as_tensor(tokens), as_tensor(location)
        if tokens.shape[-1] != self.token_dim or location.shape[-1] != self.token_dim:
            raise ConfigurationError(
                f"fusion expects {self.token_dim}-dim tokens, got sensing {tokens.shape} "
                f"and location {location.shape}")
        tokens = tokens + self.self_attn(tokens, tokens)
        query = reshape(location, location.shape[:-1] + (1, self.token_dim))
        fused = query + self.cross_attn(query, tokens)
        fused = reshape(fused, location.shape)
        return self.ffn(fused)


class ConditionEncoder(Module):
    """Full conditioning path: sensing estimate + UE location -> R_MMT."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.sensing = SensingEncoder(cfg, rng)
        self.location = LocationEncoder(cfg, rng)
        self.fusion = CrossModalFusion(cfg, rng)

    def encode_sensing(self, planes) -> tuple[Tensor, Tensor]:
        tokens = self.sensing(planes)
        return tokens, tokens.mean(axis=-2)

    def forward(self, planes, loc_features) -> Tensor:
        tokens = self.sensing(planes)
        return self.fusion(tokens, self.location(loc_features))
