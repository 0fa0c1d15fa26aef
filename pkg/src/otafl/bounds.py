"""Finite-time stationarity bound for the biased OTA-SGD updates.

The bound has three pieces: an initialization term decaying as 1/(eta*T),
a variance proxy zeta (transmission variance from intermittent
participation, mini-batch variance, receiver noise), and a bias term that
vanishes exactly at uniform participation.  The SCA designer minimizes
2*eta*L*zeta + bias over the pre-scalers.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import learner
from .channel import NetworkConfig
from .link import PowerControlDesign


@dataclass(frozen=True)
class BoundReport:
    """Decomposed bound; zeta and total recompose exactly from the parts.

    transmission_variance holds the bare sum over devices of
    p_m*gamma_m/alpha - p_m^2 (the g_max^2 factor is applied in zeta).
    """

    transmission_variance: float
    minibatch_variance: float
    receiver_noise: float
    zeta: float
    bias_term: float = 0.0
    init_term: float = 0.0
    eta: float = 0.0
    smooth_l: float = 0.0

    @property
    def total_bound(self) -> float:
        return self.init_term + 2.0 * self.eta * self.smooth_l * self.zeta + self.bias_term

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total_bound"] = self.total_bound
        return out


def zeta_report(design: PowerControlDesign, sigma, config: NetworkConfig) -> BoundReport:
    """Evaluate the three variance components for a design.

    sigma is the per-device mini-batch standard-deviation bound (0 for
    full-batch training).
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), design.p.shape)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    if design.alpha <= 0:
        raise ValueError("post-scaler must be positive")
    transmission = float(np.sum(design.p * design.gamma / design.alpha - design.p ** 2))
    minibatch = float(np.sum(design.p ** 2 * sigma ** 2))
    noise = config.d * config.n0 / design.alpha ** 2
    zeta = config.g_max ** 2 * transmission + minibatch + noise
    return BoundReport(transmission_variance=transmission, minibatch_variance=minibatch,
                       receiver_noise=noise, zeta=zeta)


def bias_term(p, kappa: float, n: int) -> float:
    """Model-bias component 2*N*kappa^2 * sum (p_m - 1/N)^2."""
    p = np.asarray(p, dtype=float)
    if p.shape != (n,) or np.any(p < -learner.SIMPLEX_TOL) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must lie on the probability simplex")
    return float(2.0 * n * kappa ** 2 * np.sum((p - 1.0 / n) ** 2))


def init_term(spec: learner.ObjectiveSpec, w0: np.ndarray, datasets: list,
              eta: float, t_rounds: int) -> float:
    """Initialization component 4*max_m f_m(w0) / (eta*T).

    The per-device infimum is taken as 0: the regularized cross-entropy
    loss is nonnegative, and any valid lower bound suffices here.
    """
    if eta <= 0 or t_rounds < 1:
        raise ValueError("need eta > 0 and t_rounds >= 1")
    worst = max(learner.loss_value(spec, w0, ds.x, ds.y) for ds in datasets)
    return 4.0 * worst / (eta * t_rounds)


def full_report(design: PowerControlDesign, sigma, config: NetworkConfig, kappa: float,
                eta: float, smooth_l: float, init: float = 0.0) -> BoundReport:
    """Assemble the complete bound for a design; init may be precomputed."""
    parts = zeta_report(design, sigma, config)
    return BoundReport(transmission_variance=parts.transmission_variance,
                       minibatch_variance=parts.minibatch_variance,
                       receiver_noise=parts.receiver_noise,
                       zeta=parts.zeta,
                       bias_term=bias_term(design.p, kappa, design.n_devices),
                       init_term=init, eta=eta, smooth_l=smooth_l)


def stationarity_metric(gradient_trace) -> float:
    """Finite-time average squared norm of the global gradient."""
    trace = [np.asarray(g, dtype=float) for g in gradient_trace]
    if not trace:
        raise ValueError("gradient trace must be non-empty")
    return float(np.mean([g @ g for g in trace]))
