"""Comparison power-control schemes.

Three families: instantaneous-CSI policies that re-optimize every round
(vanilla channel inversion and the per-round MSE-optimal scheme),
statistical-CSI designs fixed before training (common-pre-scaler
truncated inversion), and radius-based schedulers.  The per-round MSE
scheme and the common-pre-scaler scheme are behavioral reconstructions
of their published one-line descriptions, not ports of the original
algorithms, and are labeled as surrogates in experiment metadata.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import channel, learner, link
from .channel import NetworkConfig
from .link import PowerControlDesign

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyDecision:
    """One round of transmit scales (complex, applied to the gradient),
    the PS post-scaler, and the participation mask."""

    transmit_scale: np.ndarray
    post_scaler: float
    participation_mask: np.ndarray


def policy_round(local_grads: np.ndarray, decision: PolicyDecision, h: np.ndarray,
                 noise_draw: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Apply a per-round policy decision to the MAC superposition.

    Transmit scales are phase-aligned to the channel, so the effective
    per-device weight h*scale is real; the real part keeps the exact
    cancellation semantics.
    """
    # worst-case-gradient energy budget, checked every round
    assert np.all(np.abs(decision.transmit_scale) <=
                  max_transmit_magnitude(config) * (1 + 1e-9))
    weights = np.real(h * decision.transmit_scale) * decision.participation_mask
    aggregate = weights @ np.asarray(local_grads, dtype=float) + np.asarray(noise_draw, dtype=float)
    return aggregate / decision.post_scaler


def max_transmit_magnitude(config: NetworkConfig) -> float:
    """Largest |scale| meeting the energy budget for a worst-case gradient."""
    return np.sqrt(config.d * config.e_s) / config.g_max


def vanilla_ota(h: np.ndarray, config: NetworkConfig) -> PolicyDecision:
    """Zero-instantaneous-bias channel inversion with a common scale.

    The common factor is the largest value keeping every device's
    inverted transmission within the energy budget, so it is set by the
    weakest channel of the round; the estimate is exactly the uniform
    gradient average plus noise/(N*eta_t).
    """
    h = np.asarray(h, dtype=complex)
    n = h.size
    habs = np.abs(h)
    if np.any(habs == 0):
        return PolicyDecision(transmit_scale=np.zeros(n, dtype=complex), post_scaler=1.0,
                              participation_mask=np.zeros(n, dtype=int))
    eta_t = float(habs.min()) * max_transmit_magnitude(config)
    return PolicyDecision(transmit_scale=eta_t / h, post_scaler=n * eta_t,
                          participation_mask=np.ones(n, dtype=int))


def _common_gamma_mse(gamma: float, lam: np.ndarray, sigma: np.ndarray,
                      config: NetworkConfig) -> float:
    """Aggregation-MSE proxy of a common pre-scaler (variance terms only)."""
    a_m = channel.alpha_m(np.full(lam.shape, gamma), lam, config.g_max, config.d, config.e_s)
    alpha = float(a_m.sum())
    if alpha <= 0:
        return np.inf
    p = a_m / alpha
    transmission = float(np.sum(p * gamma / alpha - p ** 2))
    return (config.g_max ** 2 * transmission + float(np.sum(p ** 2 * sigma ** 2))
            + config.d * config.n0 / alpha ** 2)


def _golden_section(fun, lo: float, hi: float, tol: float) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def lcpc(lam: np.ndarray, config: NetworkConfig, sigma=0.0) -> PowerControlDesign:
    """Common pre-scaler chosen from statistical CSI by minimizing the
    aggregation MSE proxy (no bias control), then truncated inversion.

    A coarse scan over the bracket (0, max_m gamma_max] locates the basin
    and golden-section refines it to 1e-9 of the bracket width.
    """
    lam = np.asarray(lam, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), lam.shape)
    hi = float(np.max(channel.gamma_max(lam, config.g_max, config.d, config.e_s)))
    grid = np.linspace(hi / 400.0, hi, 400)
    scores = [_common_gamma_mse(g, lam, sigma, config) for g in grid]
    best = int(np.argmin(scores))
    lo_b = grid[max(best - 1, 0)]
    hi_b = grid[min(best + 1, grid.size - 1)]
    gamma = _golden_section(lambda g: _common_gamma_mse(g, lam, sigma, config),
                            lo_b, hi_b, tol=1e-9 * hi)
    return link.make_design(np.full(lam.shape, gamma), config)


def _opc_mse(u: float, habs: np.ndarray, config: NetworkConfig) -> float:
    """Instantaneous-MSE of the per-round scheme at inverse post-scaler u."""
    n = habs.size
    reach = np.minimum(habs * max_transmit_magnitude(config) * u, 1.0 / n)
    bias_sq = float(np.sum((1.0 / n - reach) ** 2))
    return config.g_max ** 2 * bias_sq + config.d * config.n0 * u ** 2


def opc_ota(h: np.ndarray, config: NetworkConfig) -> PolicyDecision:
    """Per-round MSE-minimal power control from global instantaneous CSI.

    Strong devices invert down to the common target 1/N; devices that
    cannot reach it transmit at full energy.  The optimal post-scaler is
    found exactly by scanning the sorted active-set breakpoints together
    with each segment's interior stationary point (the MSE is piecewise
    quadratic in 1/alpha).
    """
    h = np.asarray(h, dtype=complex)
    n = h.size
    habs = np.abs(h)
    b_max = max_transmit_magnitude(config)
    strength = habs * b_max  # received amplitude at full energy
    order = np.argsort(strength)
    candidates = []
    for m in range(n):
        if strength[order[m]] > 0:
            candidates.append(1.0 / (n * strength[order[m]]))
    for k in range(1, n + 1):
        weak = order[:k]
        s = strength[weak]
        denom = config.g_max ** 2 * float(np.sum(s ** 2)) + config.d * config.n0
        if denom > 0:
            candidates.append(config.g_max ** 2 * float(np.sum(s)) / (n * denom))
    candidates = sorted(c for c in candidates if np.isfinite(c) and c > 0)
    if not candidates:
        return PolicyDecision(transmit_scale=np.zeros(n, dtype=complex), post_scaler=1.0,
                              participation_mask=np.zeros(n, dtype=int))
    scores = [_opc_mse(u, habs, config) for u in candidates]
    u_star = candidates[int(np.argmin(scores))]
    alpha = 1.0 / u_star
    magnitude = np.where(habs > 0, np.minimum(b_max, alpha / (n * np.maximum(habs, 1e-300))), 0.0)
    scale = np.where(habs > 0, magnitude * np.conj(h) / np.maximum(habs, 1e-300), 0.0)
    return PolicyDecision(transmit_scale=scale, post_scaler=alpha,
                          participation_mask=(habs > 0).astype(int))


def bb_fl(policy: str, round_index: int, deployment: channel.Deployment,
          config: NetworkConfig, r_in: float, coin: float = None):
    """Radius-based scheduling: 'interior' keeps devices within r_in,
    'alternative' flips a fair coin each round between the interior set
    and everyone.  Scheduled devices use their variance-optimal
    pre-scaler; the post-scaler sums their expected scales.

    Returns (active_mask, gamma, post_scaler); coin is the round's uniform
    draw in [0, 1), required for the alternative policy.
    """
    if policy not in ("interior", "alternative"):
        raise ValueError(f"unknown scheduling policy: {policy}")
    dist = deployment.distances()
    interior = dist <= r_in
    if not interior.any():
        logger.warning("empty interior set at r_in=%.1f m; falling back to full set", r_in)
        interior = np.ones_like(interior)
    if policy == "interior":
        active = interior
    else:
        if coin is None:
            raise ValueError("alternative scheduling needs the round's coin draw")
        active = interior if coin < 0.5 else np.ones_like(interior)
    gamma = channel.gamma_max(config.lam, config.g_max, config.d, config.e_s)
    a_max = channel.alpha_max(config.lam, config.g_max, config.d, config.e_s)
    post = float(np.sum(a_max[active]))
    return active.astype(int), np.asarray(gamma, dtype=float), post


def ideal_fedavg(spec: learner.ObjectiveSpec, datasets: list, w: np.ndarray,
                 eta: float, g_max: float) -> np.ndarray:
    """Noiseless uniform aggregation update: the performance ceiling."""
    return learner.sgd_step(w, learner.global_gradient(spec, w, datasets, g_max), eta)
