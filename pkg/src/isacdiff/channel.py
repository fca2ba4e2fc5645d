"""Cell-free ISAC world simulator.

One transmitting AP probes a point target; the remaining APs receive the
echo. All APs also receive uplink pilots from single-antenna UEs clustered
around the target. Every AP carries an M-element half-wavelength ULA laid
along the y-axis, so the bearing ``theta = atan2(dy, dx)`` enters the array
response only through ``sin(theta) = dy / r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ScenarioConfig


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioKnobs:
    """Per-realization draw of the ranged ScenarioConfig settings."""

    num_ues: int
    pilot_length: int
    distance: float
    snr_db: float

    def as_array(self) -> np.ndarray:
        return np.array([self.num_ues, self.pilot_length, self.distance, self.snr_db], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ScenarioKnobs":
        return cls(int(arr[0]), int(arr[1]), float(arr[2]), float(arr[3]))


@dataclass
class Geometry:
    tx_ap_position: np.ndarray        # [2]
    rx_ap_positions: np.ndarray       # [L_r, 2]
    ue_positions: np.ndarray          # [U, 2]
    target_position: np.ndarray       # [2]

    @property
    def ap_positions(self) -> np.ndarray:
        """All APs, transmitting AP first: [L, 2]."""
        return np.vstack([self.tx_ap_position[None, :], self.rx_ap_positions])

    @property
    def aod_to_target(self) -> float:
        return bearing(self.tx_ap_position, self.target_position)

    @property
    def aoa_from_target(self) -> np.ndarray:
        return np.array([bearing(p, self.target_position) for p in self.rx_ap_positions])


@dataclass
class ChannelRealization:
    h_comm: np.ndarray          # [L, U, M] complex
    h_sens: np.ndarray          # [L_r, M, M] complex
    sensing_gains: np.ndarray   # [L_r] complex
    large_scale: np.ndarray     # [L, U] linear power gain
    geometry: Geometry
    pilot_assignment: np.ndarray  # [U] int
    powers: np.ndarray          # [U] watts
    knobs: ScenarioKnobs

    @property
    def pilot_length(self) -> int:
        return self.knobs.pilot_length


@dataclass
class PilotObservation:
    y_pilot: np.ndarray   # [L, tau_p, M] complex
    noise: np.ndarray     # same shape


def bearing(origin, point) -> float:
    d = np.asarray(point, float) - np.asarray(origin, float)
    return float(np.arctan2(d[1], d[0]))


def steering_vector(theta: float, antennas: int) -> np.ndarray:
    """Half-wavelength ULA response ``exp(-j*pi*m*sin(theta))``, m = 0..M-1."""
    if antennas < 1:
        raise ConfigError("steering vector needs at least one antenna")
    return np.exp(-1j * np.pi * np.arange(antennas) * np.sin(theta))


def sensing_channel(alpha: complex, theta_r: float, theta_t: float, antennas: int) -> np.ndarray:
    """Point-reflector bistatic channel ``alpha * a(theta_r) a(theta_t)^H``."""
    return alpha * np.outer(steering_vector(theta_r, antennas),
                            steering_vector(theta_t, antennas).conj())


def pathloss_umi(distance, carrier_ghz: float, shadow_db=0.0, min_distance: float = 1.0):
    """UMi path loss in dB; ``distance`` is clamped below at ``min_distance``."""
    distance = np.maximum(np.asarray(distance, float), min_distance)
    if np.any(~(distance > 0)):
        raise ValueError(f"path loss needs positive distance, got {distance}")
    return 22.4 + 35.3 * np.log10(distance) + 21.3 * np.log10(carrier_ghz) + shadow_db


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, float) / 10.0)


def complex_normal(rng: np.random.Generator, shape, variance=1.0) -> np.ndarray:
    """Circular complex Gaussian samples with E|z|^2 = variance."""
    scale = np.sqrt(np.asarray(variance, float) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def rician_channel(ap_position, ue_position, antennas: int, k_factor: float,
                   beta: float, rng: np.random.Generator) -> np.ndarray:
    """``sqrt(beta) * (sqrt(K/(K+1)) a(theta_LOS) + sqrt(1/(K+1)) g)``."""
    theta = bearing(ap_position, ue_position)
    los = steering_vector(theta, antennas)
    nlos = complex_normal(rng, antennas)
    return np.sqrt(beta) * (np.sqrt(k_factor / (k_factor + 1.0)) * los
                            + np.sqrt(1.0 / (k_factor + 1.0)) * nlos)


def sensing_gain_variance(tx_position, rx_position, target_position, config: ScenarioConfig) -> float:
    """Variance of the echo gain: shadow-free UMi gain on both legs times RCS and link gain."""
    d_tx = float(np.linalg.norm(np.subtract(target_position, tx_position)))
    d_rx = float(np.linalg.norm(np.subtract(target_position, rx_position)))
    if d_tx <= 0 or d_rx <= 0:
        raise GeometryError("sensing target collocated with an AP")
    loss_db = (pathloss_umi(d_tx, config.carrier_ghz, 0.0, config.min_link_distance)
               + pathloss_umi(d_rx, config.carrier_ghz, 0.0, config.min_link_distance))
    return float(config.rcs_variance * db_to_linear(config.radar_gain_db - loss_db))


def sensing_gain(tx_position, rx_position, target_position, config: ScenarioConfig,
                 rng: np.random.Generator) -> complex:
    variance = sensing_gain_variance(tx_position, rx_position, target_position, config)
    return complex(complex_normal(rng, (), variance))


def assign_pilots(num_ues: int, pilot_length: int) -> np.ndarray:
    """Round-robin pilot reuse: UE u gets pilot ``u mod tau_p``."""
    if num_ues < 1 or pilot_length < 1:
        raise ConfigError("need at least one UE and one pilot")
    return np.arange(num_ues) % pilot_length


def calibrate_power(beta: np.ndarray, snr_db: float, noise_power: float, max_power: float):
    """Per-UE pilot power hitting ``snr_db`` on the mean-over-APs link gain.

    Returns ``(powers, clipped)`` where ``clipped`` flags UEs capped at
    ``max_power``.
    """
    beta = np.asarray(beta, float)
    if np.any(beta <= 0):
        raise ValueError("large-scale gains must be positive")
    wanted = noise_power * db_to_linear(snr_db) / beta.mean(axis=0)
    return np.minimum(wanted, max_power), wanted > max_power


def place_geometry(config: ScenarioConfig, num_ues: int, distance: float,
                   rng: np.random.Generator) -> Geometry:
    width, height = config.area
    target = np.array([rng.uniform(0.1 * width, 0.9 * width),
                       rng.uniform(0.1 * height, 0.9 * height)])
    rx = np.column_stack([np.full(config.num_receive_aps, width),
                          rng.uniform(0.0, height, config.num_receive_aps)])
    ues = np.empty((num_ues, 2))
    filled = 0
    while filled < num_ues:
        r = distance * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2 * np.pi)
        p = target + r * np.array([np.cos(phi), np.sin(phi)])
        if 0.0 <= p[0] <= width and 0.0 <= p[1] <= height:
            ues[filled] = p
            filled += 1
    return Geometry(np.array(config.tx_ap_position, float), rx, ues, target)


def draw_realization(config: ScenarioConfig, knobs: ScenarioKnobs,
                     rng: np.random.Generator) -> ChannelRealization:
    M = config.antennas
    geo = place_geometry(config, knobs.num_ues, knobs.distance, rng)
    aps = geo.ap_positions
    dist = np.linalg.norm(aps[:, None, :] - geo.ue_positions[None, :, :], axis=-1)
    shadow = rng.normal(0.0, config.shadow_std_db, dist.shape)
    beta = db_to_linear(-pathloss_umi(dist, config.carrier_ghz, shadow, config.min_link_distance))
    h = np.empty((len(aps), knobs.num_ues, M), complex)
    for l, ap in enumerate(aps):
        for u, ue in enumerate(geo.ue_positions):
            h[l, u] = rician_channel(ap, ue, M, config.rician_k, beta[l, u], rng)
    alphas = np.array([sensing_gain(geo.tx_ap_position, rx, geo.target_position, config, rng)
                       for rx in geo.rx_ap_positions])
    theta_t = geo.aod_to_target
    h_sens = np.stack([sensing_channel(a, th, theta_t, M)
                       for a, th in zip(alphas, geo.aoa_from_target)])
    powers, _ = calibrate_power(beta, knobs.snr_db, config.noise_power, config.max_power)
    return ChannelRealization(h, h_sens, alphas, beta, geo,
                              assign_pilots(knobs.num_ues, knobs.pilot_length), powers, knobs)


def received_pilots(real: ChannelRealization, noise_power: float,
                    rng: np.random.Generator) -> PilotObservation:
    """Despread uplink pilots: per AP and pilot, the sum over UEs sharing it plus noise."""
    L, U, M = real.h_comm.shape
    tau = real.pilot_length
    y = np.zeros((L, tau, M), complex)
    for u in range(U):
        y[:, real.pilot_assignment[u], :] += np.sqrt(tau * real.powers[u]) * real.h_comm[:, u, :]
    noise = complex_normal(rng, (L, tau, M), noise_power)
    return PilotObservation(y + noise, noise)


def radar_probe(antennas: int, snapshots: int) -> np.ndarray:
    """Deterministic unit-norm DFT snapshots, cycled; full row rank once N >= M."""
    m = np.arange(antennas)[:, None]
    n = np.arange(snapshots)[None, :] % antennas
    return np.exp(2j * np.pi * m * n / antennas) / np.sqrt(antennas)


def received_radar(real: ChannelRealization, x: np.ndarray, noise_power: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Echo ``H_sens[l_r] @ x + n`` at every receiving AP: [L_r, M, N]."""
    column_power = np.mean(np.sum(np.abs(x) ** 2, axis=0))
    if abs(column_power - 1.0) > 1e-6:
        raise ValueError(f"radar snapshots must have unit average power, got {column_power}")
    clean = np.einsum("rij,jn->rin", real.h_sens, x)
    return clean + complex_normal(rng, clean.shape, noise_power)
