"""THz propagation and directional antenna physics.

All quantities are linear SI (W, Hz, m). dB/dBm only appear in the
conversion helpers, which the config layer uses at its boundary.
Functions accept scalars or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Distances below this are treated as co-located vehicles.
MIN_DISTANCE = 0.1


class ChannelDomainError(ValueError):
    pass


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


@dataclass(frozen=True)
class ChannelParams:
    carrier_frequency: float = 1.05e12
    light_speed: float = 3e8
    absorption_coefficient: float = 0.07512
    noise_floor: float = float(dbm_to_watts(-77.0))
    bandwidth: float = 5e9

    def __post_init__(self):
        if not self.carrier_frequency > 0:
            raise ChannelDomainError("carrier_frequency must be positive")
        if not self.light_speed > 0:
            raise ChannelDomainError("light_speed must be positive")
        if not self.absorption_coefficient >= 0:
            raise ChannelDomainError("absorption_coefficient must be >= 0")
        if not self.bandwidth > 0:
            raise ChannelDomainError("bandwidth must be positive")
        if not self.noise_floor > 0:
            raise ChannelDomainError("noise_floor must be positive")


def solid_angle(horizontal_beamwidth: float, vertical_beamwidth: float) -> float:
    """Beam solid angle 4*arcsin(tan(theta/2) * tan(phi/2)) in steradians."""
    s = math.tan(horizontal_beamwidth / 2.0) * math.tan(vertical_beamwidth / 2.0)
    if not 0.0 < s <= 1.0:
        raise ChannelDomainError(f"beamwidths give arcsin argument {s!r} outside (0, 1]")
    return 4.0 * math.asin(s)


@dataclass(frozen=True)
class AntennaPattern:
    horizontal_beamwidth: float = math.radians(10.0)
    vertical_beamwidth: float = math.radians(10.0)
    sidelobe_power_ratio: float = 0.1
    # Test fixtures only: admits the eps == 1 boundary.
    allow_unit_sidelobe: bool = False

    def __post_init__(self):
        for name in ("horizontal_beamwidth", "vertical_beamwidth"):
            v = getattr(self, name)
            if not 0.0 < v < math.pi:
                raise ChannelDomainError(f"{name} must lie in (0, pi), got {v!r}")
        eps = self.sidelobe_power_ratio
        upper_ok = eps <= 1.0 if self.allow_unit_sidelobe else eps < 1.0
        if not (eps >= 0.0 and upper_ok):
            raise ChannelDomainError(f"sidelobe_power_ratio out of range: {eps!r}")
        omega = solid_angle(self.horizontal_beamwidth, self.vertical_beamwidth)
        if not 0.0 < omega < 4.0 * math.pi:
            raise ChannelDomainError(f"solid angle {omega!r} out of (0, 4pi)")

    @property
    def solid_angle(self) -> float:
        return solid_angle(self.horizontal_beamwidth, self.vertical_beamwidth)


def mainlobe_gain(pattern: AntennaPattern) -> float:
    omega = pattern.solid_angle
    return 4.0 * math.pi / ((pattern.sidelobe_power_ratio + 1.0) * omega)


def sidelobe_gain(pattern: AntennaPattern) -> float:
    omega = pattern.solid_angle
    if omega >= 4.0 * math.pi:
        raise ChannelDomainError("isotropic pattern has no side lobe")
    eps = pattern.sidelobe_power_ratio
    return 4.0 * math.pi * eps / ((eps + 1.0) * (4.0 * math.pi - omega))


def transmittance(params: ChannelParams, distance):
    """Beer-Lambert transmittance exp(-phi(f) d)."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ChannelDomainError("distance must be non-negative")
    out = np.exp(-params.absorption_coefficient * d)
    return float(out) if out.ndim == 0 else out


def absorption_loss(params: ChannelParams, distance):
    """Molecular absorption loss exp(phi(f) d) >= 1."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ChannelDomainError("distance must be non-negative")
    out = np.exp(params.absorption_coefficient * d)
    return float(out) if out.ndim == 0 else out


def _check_link_distance(d):
    if np.any(d < MIN_DISTANCE):
        raise ChannelDomainError(
            f"link distance below {MIN_DISTANCE} m is degenerate (co-located vehicles)"
        )


def spreading_loss(params: ChannelParams, distance):
    """Free-space spreading loss (4 pi f d / c)^2."""
    d = np.asarray(distance, dtype=float)
    _check_link_distance(d)
    out = (4.0 * np.pi * params.carrier_frequency * d / params.light_speed) ** 2
    return float(out) if out.ndim == 0 else out


def path_gain(params: ChannelParams, distance):
    """Inverse total path loss 1 / (L_A * L_F); also the graph edge weight."""
    return 1.0 / (absorption_loss(params, distance) * spreading_loss(params, distance))


def received_power(tx_power, tx_gain, rx_gain, params: ChannelParams, distance):
    return tx_power * tx_gain * rx_gain * path_gain(params, distance)


def radar_spreading_loss(params: ChannelParams, distance, rcs):
    """Round-trip spreading (4 pi)^3 f^2 d^4 / (sigma c^2) of a monostatic echo."""
    d = np.asarray(distance, dtype=float)
    _check_link_distance(d)
    f, c = params.carrier_frequency, params.light_speed
    out = (4.0 * np.pi) ** 3 * f**2 * d**4 / (rcs * c**2)
    return float(out) if out.ndim == 0 else out


def molecular_absorption_noise(params: ChannelParams, tx_powers=(), tx_gains=(),
                               rx_gains=(), distances=()):
    """Noise at a receiver: thermal floor plus power re-radiated by absorbing molecules.

    Each interferer contributes P * Gt * Gr * (1 - tau(d)) / L_F(d).
    """
    p = np.asarray(tx_powers, dtype=float)
    if p.size == 0:
        return params.noise_floor
    gt = np.asarray(tx_gains, dtype=float)
    gr = np.asarray(rx_gains, dtype=float)
    d = np.asarray(distances, dtype=float)
    absorbed = 1.0 - transmittance(params, d)
    extra = p * gt * gr * absorbed / spreading_loss(params, d)
    return params.noise_floor + float(np.sum(extra))
