"""Wireless channel model: deployment geometry, log-distance path loss,
Rayleigh fading, receiver noise, and the closed-form truncation statistics
of truncated channel inversion.

Conventions used throughout the package:

* ``lam`` (per-device average channel gain) is a linear-scale power ratio.
* Fading coefficients are complex, h ~ CN(0, lam): real and imaginary
  parts are independent N(0, lam/2), so E|h|^2 = lam and |h|^2 is
  exponential with mean lam.
* Receiver noise is kept in the real domain: a "d-dimensional noise draw"
  is a real vector with i.i.d. N(0, n0) entries, so its expected squared
  norm is d*n0.  This is the embedding under which the receiver-noise
  term d*N0/alpha^2 of the variance proxy is exact.
"""

from dataclasses import dataclass

import numpy as np

from . import rng

REFERENCE_DISTANCE_M = 1.0


@dataclass(frozen=True)
class NetworkConfig:
    """Static link-level parameters shared by every module.

    lam: per-device average channel gains (linear scale).
    e_s: per-sample transmit energy budget (J).
    n0: receiver noise variance per real dimension (J).
    d: signal dimension (number of real gradient entries per upload).
    g_max: clipping bound on the local gradient norm.
    """

    lam: np.ndarray
    e_s: float
    n0: float
    d: int
    g_max: float

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "lam", lam)
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("lam must be a non-empty 1-D array")
        if np.any(lam <= 0):
            raise ValueError("average channel gains must be positive")
        if self.e_s <= 0 or self.n0 < 0 or self.d < 1 or self.g_max <= 0:
            raise ValueError("invalid network parameters")

    @property
    def n_devices(self) -> int:
        return self.lam.size


@dataclass(frozen=True)
class Deployment:
    """Device positions around a parameter server, all within r_max."""

    positions: np.ndarray  # (N, 2), meters
    ps_position: np.ndarray  # (2,), meters
    r_max: float

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        ps = np.asarray(self.ps_position, dtype=float)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "ps_position", ps)
        if pos.shape[0] < 1 or pos.shape[1] != 2 or ps.shape != (2,):
            raise ValueError("positions must be (N, 2) and ps_position (2,)")
        if np.any(self.distances() > self.r_max + 1e-9):
            raise ValueError("device outside deployment radius")

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.positions - self.ps_position, axis=1)


@dataclass(frozen=True)
class LargeScaleGains:
    """Per-device average channel gains, fixed for the whole run."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        if np.any(lam <= 0):
            raise ValueError("average channel gains must be positive")

    @property
    def n_devices(self) -> int:
        return self.lam.size


@dataclass(frozen=True)
class FadingDraw:
    """One round of complex fading coefficients, one entry per device."""

    h: np.ndarray
    round_index: int


@dataclass(frozen=True)
class NoiseModel:
    """Receiver noise: i.i.d. N(0, n0) per real dimension."""

    n0: float
    d: int

    def __post_init__(self):
        if self.n0 < 0 or self.d < 1:
            raise ValueError("need n0 >= 0 and d >= 1")

    def draw(self, generator: np.random.Generator) -> np.ndarray:
        return np.sqrt(self.n0) * generator.standard_normal(self.d)


def sample_deployment(n_devices: int, r_max: float, seed: int) -> Deployment:
    """Drop n_devices uniformly in a disc of radius r_max around the PS.

    Positions closer than the path-loss reference distance (1 m) are
    resampled so the log-distance model stays in its domain.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    if r_max <= REFERENCE_DISTANCE_M:
        raise ValueError("r_max must exceed the reference distance")
    gen = rng.stream(seed, purpose=rng.DEPLOY)
    positions = np.empty((n_devices, 2))
    filled = 0
    while filled < n_devices:
        radii = r_max * np.sqrt(gen.random(n_devices - filled))
        angles = 2 * np.pi * gen.random(n_devices - filled)
        cand = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        keep = cand[np.linalg.norm(cand, axis=1) >= REFERENCE_DISTANCE_M]
        positions[filled:filled + keep.shape[0]] = keep
        filled += keep.shape[0]
    return Deployment(positions=positions, ps_position=np.zeros(2), r_max=r_max)


def pathloss_gains(deployment: Deployment, exponent: float, pl0_db: float) -> LargeScaleGains:
    """Log-distance path loss: lam = 10^(-(pl0_db + 10*exponent*log10(dist))/10)."""
    dist = deployment.distances()
    if np.any(dist < REFERENCE_DISTANCE_M):
        raise ValueError("device closer than the 1 m reference distance")
    loss_db = pl0_db + 10.0 * exponent * np.log10(dist)
    return LargeScaleGains(lam=10.0 ** (-loss_db / 10.0))


def sample_fading(gains: LargeScaleGains, seed: int, round_index: int) -> FadingDraw:
    """Draw one round of i.i.d. Rayleigh fading, one keyed stream per device.

    Bit-identical for identical (seed, round, device); independent across
    rounds and devices.
    """
    h = np.empty(gains.n_devices, dtype=complex)
    for m in range(gains.n_devices):
        gen = rng.stream(seed, device=m, round_index=round_index, purpose=rng.FADING)
        re, im = gen.standard_normal(2)
        h[m] = np.sqrt(gains.lam[m] / 2.0) * (re + 1j * im)
    return FadingDraw(h=h, round_index=round_index)


def fading_matrix(lam: np.ndarray, n_draws: int, generator: np.random.Generator) -> np.ndarray:
    """Vectorized fading table (n_draws, N) for Monte-Carlo estimates."""
    lam = np.asarray(lam, dtype=float)
    re = generator.standard_normal((n_draws, lam.size))
    im = generator.standard_normal((n_draws, lam.size))
    return np.sqrt(lam / 2.0) * (re + 1j * im)


def truncation_threshold(gamma, g_max, d, e_s):
    """Fading magnitude below which a device stays silent."""
    return g_max * np.asarray(gamma, dtype=float) / np.sqrt(d * e_s)


def truncation_probability(gamma, lam, g_max, d, e_s):
    """Probability that a device transmits: exp(-gamma^2 g_max^2 / (d lam e_s)).

    Exact under Rayleigh fading, since |h|^2 is exponential with mean lam
    and the device transmits iff |h| >= g_max*gamma/sqrt(d e_s).
    """
    gamma = np.asarray(gamma, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(gamma < 0):
        raise ValueError("gamma must be nonnegative")
    if np.any(lam <= 0) or e_s <= 0 or d < 1 or g_max <= 0:
        raise ValueError("lam, e_s, d, g_max must be positive")
    out = np.exp(-(gamma ** 2) * g_max ** 2 / (d * lam * e_s))
    return float(out) if out.ndim == 0 else out


def alpha_m(gamma, lam, g_max, d, e_s):
    """Expected received scale gamma * E[transmit indicator].

    Quasi-concave in gamma: increases up to gamma_max(lam) and decreases
    beyond it.
    """
    gamma = np.asarray(gamma, dtype=float)
    out = gamma * truncation_probability(gamma, lam, g_max, d, e_s)
    return float(out) if out.ndim == 0 else out


def gamma_max(lam, g_max, d, e_s):
    """Maximizer of alpha_m over gamma: sqrt(d lam e_s / (2 g_max^2))."""
    lam = np.asarray(lam, dtype=float)
    out = np.sqrt(d * lam * e_s / (2.0 * g_max ** 2))
    return float(out) if out.ndim == 0 else out


def alpha_max(lam, g_max, d, e_s):
    """Peak value of alpha_m: sqrt(d lam e_s / (2 e g_max^2))."""
    lam = np.asarray(lam, dtype=float)
    out = np.sqrt(d * lam * e_s / (2.0 * np.e * g_max ** 2))
    return float(out) if out.ndim == 0 else out


def noise_variance_per_dim(noise_psd_dbm_hz: float) -> float:
    """Noise variance per real dimension from the PSD in dBm/Hz.

    A symbol occupies 1/bandwidth seconds, so the in-band noise energy
    per symbol equals the one-sided PSD expressed in joules; that energy
    is used as the per-real-dimension variance of the embedded noise
    (see module docstring).
    """
    return 10.0 ** ((noise_psd_dbm_hz - 30.0) / 10.0)


def energy_per_sample(ptx_dbm: float, bandwidth_hz: float) -> float:
    """Per-sample energy budget of a transmitter at power ptx over bandwidth B."""
    return 10.0 ** ((ptx_dbm - 30.0) / 10.0) / bandwidth_hz
