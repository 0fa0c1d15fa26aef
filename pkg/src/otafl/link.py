"""One round of over-the-air gradient upload.

Devices pre-scale their clipped gradient by gamma_m, invert the channel,
and stay silent when fading is below the truncation threshold; the MAC
superposes the surviving signals plus receiver noise; the PS divides by
the post-scaler alpha.  Because active devices invert their channel
exactly, the whole round reduces to real arithmetic:

    g_hat = (sum_m chi_m * gamma_m * g_m + z) / alpha,   z ~ N(0, n0 I_d)

The expected estimate is the convex combination sum_m p_m g_m with
participation weights p_m = alpha_m / alpha.
"""

from dataclasses import dataclass

import numpy as np

from . import channel, rng
from .channel import NetworkConfig

_CONSISTENCY_TOL = 1e-12


@dataclass(frozen=True)
class PowerControlDesign:
    """Pre-scalers plus the participation statistics they induce."""

    gamma: np.ndarray  # per-device pre-scaler, > 0
    alpha_m: np.ndarray  # per-device expected scale gamma_m * E[chi_m]
    alpha: float  # post-scaler, sum of alpha_m
    p: np.ndarray  # participation weights alpha_m / alpha

    def __post_init__(self):
        for name in ("gamma", "alpha_m", "p"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.alpha <= 0:
            raise ValueError("post-scaler must be positive")
        if np.any(self.p < 0) or np.any(self.p > 1) or abs(self.p.sum() - 1.0) > _CONSISTENCY_TOL:
            raise ValueError("participation weights must lie on the simplex")

    @property
    def n_devices(self) -> int:
        return self.gamma.size


@dataclass(frozen=True)
class GradientEstimate:
    """PS-side aggregate with its exact signal/noise decomposition."""

    g_hat: np.ndarray
    active_mask: np.ndarray
    signal_part: np.ndarray
    noise_part: np.ndarray


def make_design(gamma, config: NetworkConfig) -> PowerControlDesign:
    """Build the design induced by pre-scalers gamma on this network."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != config.lam.shape:
        raise ValueError("gamma must have one entry per device")
    if np.any(gamma <= 0):
        raise ValueError("pre-scalers must be positive")
    a_m = channel.alpha_m(gamma, config.lam, config.g_max, config.d, config.e_s)
    alpha = float(np.sum(a_m))
    return PowerControlDesign(gamma=gamma, alpha_m=a_m, alpha=alpha, p=a_m / alpha)


def transmit_indicator(h: complex, gamma: float, config: NetworkConfig) -> int:
    """1 iff |h| clears the truncation threshold (inclusive)."""
    return int(abs(h) >= channel.truncation_threshold(gamma, config.g_max, config.d, config.e_s))


def active_mask(h: np.ndarray, gamma: np.ndarray, config: NetworkConfig) -> np.ndarray:
    thresh = config.g_max * np.asarray(gamma, dtype=float) / np.sqrt(config.d * config.e_s)
    return (np.abs(h) >= thresh).astype(int)


def ota_round(local_grads: np.ndarray, design: PowerControlDesign, fading: channel.FadingDraw,
              noise_draw: np.ndarray, config: NetworkConfig) -> GradientEstimate:
    """Aggregate one round of uploads into the PS gradient estimate.

    local_grads is (N, d) with every row norm-bounded by g_max (devices
    clip before transmission); a violation is a contract error here, not
    something to fix silently.
    """
    grads = np.asarray(local_grads, dtype=float)
    if grads.shape != (design.n_devices, config.d):
        raise ValueError(f"local_grads must be shaped {(design.n_devices, config.d)}")
    norms = np.linalg.norm(grads, axis=1)
    if np.any(norms > config.g_max * (1 + 1e-12)):
        worst = int(np.argmax(norms))
        raise ValueError(
            f"device {worst} gradient norm {norms[worst]:.6g} exceeds g_max={config.g_max}")
    chi = active_mask(fading.h, design.gamma, config)
    weights = chi * design.gamma
    signal = (weights @ grads) / design.alpha
    noise = np.asarray(noise_draw, dtype=float) / design.alpha
    return GradientEstimate(g_hat=signal + noise, active_mask=chi,
                            signal_part=signal, noise_part=noise)


def empirical_moments(design: PowerControlDesign, config: NetworkConfig, local_grads: np.ndarray,
                      n_trials: int, seed: int = 0, chunk: int = 20000):
    """Monte-Carlo mean and variance of g_hat over fading and noise.

    Variance is E||g_hat - E g_hat||^2, estimated with the plug-in mean;
    a single trial returns variance 0 by convention.
    """
    if n_trials < 1:
        raise ValueError("need at least one trial")
    grads = np.asarray(local_grads, dtype=float)
    gen = rng.stream(seed, purpose=rng.NOISE)
    thresh = config.g_max * design.gamma / np.sqrt(config.d * config.e_s)
    sum_g = np.zeros(config.d)
    sum_sq = 0.0
    done = 0
    while done < n_trials:
        n = min(chunk, n_trials - done)
        h = channel.fading_matrix(config.lam, n, gen)
        chi = (np.abs(h) >= thresh).astype(float)
        est = (chi * design.gamma) @ grads / design.alpha
        est += np.sqrt(config.n0) * gen.standard_normal((n, config.d)) / design.alpha
        sum_g += est.sum(axis=0)
        sum_sq += float(np.einsum("ij,ij->", est, est))
        done += n
    mean = sum_g / n_trials
    var = max(sum_sq / n_trials - float(mean @ mean), 0.0)
    if n_trials == 1:
        var = 0.0
    return mean, var
