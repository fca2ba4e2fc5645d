"""Classical channel estimators and the NMSE metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricUndefinedError(ValueError):
    pass


class IllConditionedProbeError(ValueError):
    pass


@dataclass
class EstimateBundle:
    h_ls: np.ndarray         # [L, U, M]
    h_mmse: np.ndarray       # [L, U, M]
    h_sens_est: np.ndarray   # [L_r, M, M]
    noise_power: float


def ls_estimate(y_pilot: np.ndarray, assignment, powers, pilot_length: int) -> np.ndarray:
    """Invert the pilot gain: ``y[l, s_u] / sqrt(tau_p * p_u)`` for every AP l and UE u."""
    powers = np.asarray(powers, float)
    if np.any(powers <= 0):
        raise ZeroDivisionError(f"LS estimate needs positive pilot power, got {powers}")
    gain = np.sqrt(pilot_length * powers)
    return y_pilot[:, np.asarray(assignment), :] / gain[None, :, None]


def mmse_coefficients(assignment, powers, beta, noise_power: float, pilot_length: int) -> np.ndarray:
    """Scalar LMMSE weights [L, U] applied to the despread pilot of each link."""
    assignment = np.asarray(assignment)
    powers = np.asarray(powers, float)
    beta = np.asarray(beta, float)
    received = beta * powers[None, :]                  # p_i * beta_li
    shared = np.zeros((beta.shape[0], assignment.max() + 1))
    np.add.at(shared.T, assignment, received.T)
    denom = pilot_length * shared[:, assignment] + noise_power
    return np.sqrt(pilot_length * powers)[None, :] * beta / denom


def mmse_estimate(y_pilot: np.ndarray, assignment, powers, beta, noise_power: float,
                  pilot_length: int) -> np.ndarray:
    coef = mmse_coefficients(assignment, powers, beta, noise_power, pilot_length)
    return coef[:, :, None] * y_pilot[:, np.asarray(assignment), :]


def sensing_ls(y: np.ndarray, x: np.ndarray, max_condition: float = 1e8) -> np.ndarray:
    """Least-squares recovery ``Y X^H (X X^H)^-1`` of a channel matrix from snapshots."""
    gram = x @ x.conj().T
    if x.shape[1] < x.shape[0] or np.linalg.cond(gram) >= max_condition:
        raise IllConditionedProbeError(
            f"probe of shape {x.shape} does not excite every antenna")
    # solve(gram^T, (Y X^H)^T)^T == Y X^H gram^-1
    return np.linalg.solve(gram.T, (y @ x.conj().T).T).T


def nmse_per_link(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """||h_hat - h||^2 / ||h||^2 over the last axis."""
    power = np.sum(np.abs(truth) ** 2, axis=-1)
    if np.any(power == 0):
        raise MetricUndefinedError("NMSE undefined for an all-zero true channel vector")
    return np.sum(np.abs(estimate - truth) ** 2, axis=-1) / power


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(nmse_per_link(estimate, truth)))


def to_db(value):
    return 10.0 * np.log10(value)
