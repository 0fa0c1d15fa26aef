"""Pre-scaler design by successive convex approximation.

The design problem minimizes 2*eta*L*zeta + bias over the coupled
variables (gamma, p, alpha) subject to

  (i)   gamma_m * exp(-gamma_m^2 g^2 / (d lam_m e_s)) = alpha * p_m
  (ii)  0 < gamma_m <= gamma_max_m
  (iii) alpha * p_m <= alpha_max_m
  (iv)  p on the probability simplex.

Each SCA iteration convexifies (i) and the -p^2 objective piece around
anchors via log-linear surrogates, yielding an inner approximation that
is solved with a primal log-barrier Newton method (the problem has only
3N+1 variables, so dense factorizations are cheap).  The subproblem
solution is mapped back to an exactly coupled design by root-finding (i)
on the increasing branch, which becomes the next anchor.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds, channel, link
from .channel import NetworkConfig
from .link import PowerControlDesign

P_FLOOR = 1e-9
CERT_TOL = 1e-6
BOX_SLACK = 1e-9  # relative


@dataclass(frozen=True)
class DesignProblem:
    """Inputs of the pre-scaler design: network statistics plus the bound
    coefficients (eta, L, kappa, sigma) fixed at design time."""

    lam: np.ndarray
    g_max: float
    d: int
    e_s: float
    n0: float
    eta: float
    smooth_l: float
    kappa: float = 0.0
    sigma: np.ndarray = None

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "lam", lam)
        sigma = np.zeros_like(lam) if self.sigma is None else \
            np.broadcast_to(np.asarray(self.sigma, dtype=float), lam.shape).copy()
        object.__setattr__(self, "sigma", sigma)
        if np.any(lam <= 0) or min(self.g_max, self.d, self.e_s, self.eta, self.smooth_l) <= 0:
            raise ValueError("lam, g_max, d, e_s, eta, smooth_l must be positive")
        if self.n0 < 0 or self.kappa < 0 or np.any(sigma < 0):
            raise ValueError("n0, kappa, sigma must be nonnegative")

    @property
    def n(self) -> int:
        return self.lam.size

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(lam=self.lam, e_s=self.e_s, n0=self.n0, d=self.d, g_max=self.g_max)

    def normalized(self):
        """Rescale so pre-scalers are O(1): gamma' = gamma/s with s the
        largest gamma_max.  The objective value is invariant under this
        substitution, so traces and certificates carry over unchanged."""
        s = float(np.max(channel.gamma_max(self.lam, self.g_max, self.d, self.e_s)))
        scaled = replace(self, e_s=self.e_s / s ** 2, n0=self.n0 / s ** 2)
        return scaled, s


@dataclass
class ScaState:
    """Anchors and trace of one SCA run; anchors are exactly coupled."""

    anchor_gamma: np.ndarray
    anchor_p: np.ndarray
    anchor_alpha: float
    iterate: dict = field(default_factory=dict)
    objective_trace: list = field(default_factory=list)
    iteration: int = 0
    converged: bool = False


@dataclass(frozen=True)
class FeasibilityCertificate:
    """Residuals of the returned design against the original constraints."""

    coupling_residual: np.ndarray
    simplex_residual: float
    box_violations: list

    @property
    def accepted(self) -> bool:
        return (float(np.max(self.coupling_residual)) <= CERT_TOL
                and self.simplex_residual <= CERT_TOL and not self.box_violations)


@dataclass(frozen=True)
class SubproblemSolution:
    gamma: np.ndarray
    p: np.ndarray
    z: np.ndarray
    alpha: float
    objective: float
    gap: float
    steps: int
    converged: bool


def closed_form_limits(problem: DesignProblem):
    """Per-device (gamma_max, alpha_max); alpha_max = alpha_m(gamma_max)."""
    g_lim = channel.gamma_max(problem.lam, problem.g_max, problem.d, problem.e_s)
    a_lim = channel.alpha_max(problem.lam, problem.g_max, problem.d, problem.e_s)
    return np.asarray(g_lim, dtype=float), np.asarray(a_lim, dtype=float)


def recover_gamma(p: np.ndarray, alpha: float, problem: DesignProblem) -> np.ndarray:
    """Solve alpha_m(gamma) = alpha*p_m on the increasing branch [0, gamma_max].

    Vectorized bisection; tolerance 1e-12 relative to gamma_max per device.
    """
    g_lim, a_lim = closed_form_limits(problem)
    target = alpha * np.asarray(p, dtype=float)
    if np.any(target > a_lim * (1 + 1e-9)):
        worst = int(np.argmax(target / a_lim))
        raise ValueError(
            f"alpha*p exceeds alpha_max for device {worst}: "
            f"{target[worst]:.6g} > {a_lim[worst]:.6g}")
    target = np.minimum(target, a_lim)
    lo = np.zeros_like(target)
    hi = g_lim.copy()
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        val = channel.alpha_m(mid, problem.lam, problem.g_max, problem.d, problem.e_s)
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def evaluate_p1(design: PowerControlDesign, problem: DesignProblem) -> float:
    """Design-problem objective 2*eta*L*zeta + bias, composed from bounds."""
    report = bounds.zeta_report(design, problem.sigma, problem.network)
    bias = bounds.bias_term(design.p, problem.kappa, problem.n)
    return 2.0 * problem.eta * problem.smooth_l * report.zeta + bias


def default_init(problem: DesignProblem) -> ScaState:
    """Zero-bias starting point: uniform p, alpha at 0.9 of the level every
    device can sustain, gamma recovered from the coupling constraint."""
    _, a_lim = closed_form_limits(problem)
    p = np.full(problem.n, 1.0 / problem.n)
    alpha = 0.9 * problem.n * float(np.min(a_lim))
    gamma = recover_gamma(p, alpha, problem)
    return ScaState(anchor_gamma=gamma, anchor_p=p, anchor_alpha=alpha)


class ConvexSubproblem:
    """The convexified subproblem around one anchor triple.

    Variables are packed as x = [gamma (N), p (N), z (N), alpha].  The
    objective is scaled so that it coincides with the true design objective
    (2*eta*L*zeta + bias) at the anchor.  Constraints, in order (N of each):

      b: linearized log(gamma*p) <= log z + log alpha   (epigraph of p*gamma/alpha)
      c: linearized log(alpha*p) <= log gamma - c_m gamma^2   (relaxed coupling)
      g: gamma <= gamma_max
      p: p >= P_FLOOR
      a: p/alpha_max <= (2 a_bar - alpha)/a_bar^2       (linearized alpha cap)
    """

    def __init__(self, anchor_gamma, anchor_p, anchor_alpha, problem: DesignProblem):
        self.problem = problem
        self.ag = np.asarray(anchor_gamma, dtype=float)
        self.ap = np.asarray(anchor_p, dtype=float)
        self.aa = float(anchor_alpha)
        if np.any(self.ag <= 0) or np.any(self.ap <= 0) or self.aa <= 0:
            raise ValueError("anchors must be strictly positive (surrogates use their logs)")
        self.n = problem.n
        self.g_lim, self.a_lim = closed_form_limits(problem)
        if np.any(self.ag > self.g_lim * (1 + BOX_SLACK)):
            raise ValueError("anchor gamma outside (0, gamma_max]")
        self.curv = problem.g_max ** 2 / (problem.d * problem.lam * problem.e_s)
        self.k_z = 2.0 * problem.eta * problem.smooth_l * problem.g_max ** 2
        self.k_noise = 2.0 * problem.eta * problem.smooth_l * problem.d * problem.n0
        self.k_sig = 2.0 * problem.eta * problem.smooth_l * problem.sigma ** 2
        self.k_bias = 2.0 * problem.n * problem.kappa ** 2
        self.n_vars = 3 * self.n + 1
        self.n_ineq = 5 * self.n
        # slices into the packed variable vector
        self.s_g = slice(0, self.n)
        self.s_p = slice(self.n, 2 * self.n)
        self.s_z = slice(2 * self.n, 3 * self.n)
        self.i_a = 3 * self.n
        # anchor constants reused by every constraint evaluation
        self._lgb = np.log(self.ag * self.ap)
        self._lca = math.log(self.aa) + np.log(self.ap)
        self._inv_ag = 1.0 / self.ag
        self._inv_ap = 1.0 / self.ap
        self._inv_aa = 1.0 / self.aa
        self._inv_alim = 1.0 / self.a_lim

    def pack(self, gamma, p, z, alpha) -> np.ndarray:
        return np.concatenate([gamma, p, z, [alpha]])

    def unpack(self, x):
        return x[self.s_g], x[self.s_p], x[self.s_z], float(x[self.i_a])

    _BLOCKS = ("epigraph", "coupling", "gamma_box", "p_floor", "alpha_cap")

    def violated_constraints(self, x) -> list:
        """(block, device, value) for every violated inequality at x."""
        f = self.constraint_values(x)
        return [(self._BLOCKS[i // self.n], i % self.n, float(f[i]))
                for i in np.flatnonzero(f >= 0)]

    def start_point(self, shrink: float = 1e-3) -> np.ndarray:
        """Strictly feasible start next to the anchor: alpha pulled inward,
        z inflated above the epigraph surface."""
        for factor in (1.0, 4.0, 16.0):
            d0 = shrink * factor
            x = self.pack(self.ag, self.ap,
                          (self.ag * self.ap / self.aa) * (1 + 3 * d0),
                          self.aa * (1 - d0))
            if self.is_interior(x):
                return x
        raise ValueError("no strictly feasible start near the anchors; violated: "
                         f"{self.violated_constraints(x)}")

    def objective(self, x) -> float:
        gamma, p, z, alpha = self.unpack(x)
        lin_tx = -float((self.ap * (2 * p - self.ap)).sum())  # linearized -sum p^2
        return (self.k_z * (float(z.sum()) + lin_tx)
                + self.k_noise / alpha ** 2
                + float((self.k_sig * p * p).sum())
                + self.k_bias * float(((p - 1.0 / self.n) ** 2).sum()))

    def objective_grad(self, x) -> np.ndarray:
        gamma, p, z, alpha = self.unpack(x)
        g = np.zeros(self.n_vars)
        g[self.s_z] = self.k_z
        g[self.s_p] = -2 * self.k_z * self.ap + 2 * self.k_sig * p \
            + 2 * self.k_bias * (p - 1.0 / self.n)
        g[self.i_a] = -2 * self.k_noise / alpha ** 3
        return g

    def _objective_hess_diag(self, x) -> np.ndarray:
        _, _, _, alpha = self.unpack(x)
        h = np.zeros(self.n_vars)
        h[self.s_p] = 2 * self.k_sig + 2 * self.k_bias
        h[self.i_a] = 6 * self.k_noise / alpha ** 4
        return h

    def constraint_values(self, x) -> np.ndarray:
        gamma, p, z, alpha = self.unpack(x)
        p_term = p * self._inv_ap - 2
        f_b = self._lgb + gamma * self._inv_ag + p_term - np.log(z) - math.log(alpha)
        f_c = (self._lca + alpha * self._inv_aa + p_term
               - np.log(gamma) + self.curv * gamma ** 2)
        f_g = gamma - self.g_lim
        f_p = P_FLOOR - p
        f_a = p * self._inv_alim + (alpha * self._inv_aa - 2.0) * self._inv_aa
        return np.concatenate([f_b, f_c, f_g, f_p, f_a])

    def is_interior(self, x) -> bool:
        gamma, p, z, alpha = self.unpack(x)
        if gamma.min() <= 0 or p.min() <= P_FLOOR or z.min() <= 0 or alpha <= 0:
            return False
        return self.constraint_values(x).max() < 0

    def _constraint_jacobian(self, x) -> np.ndarray:
        gamma, p, z, alpha = self.unpack(x)
        n = self.n
        jac = np.zeros((self.n_ineq, self.n_vars))
        rows = np.arange(n)
        # b-block
        jac[rows, rows] = 1.0 / self.ag
        jac[rows, n + rows] = 1.0 / self.ap
        jac[rows, 2 * n + rows] = -1.0 / z
        jac[rows, self.i_a] = -1.0 / alpha
        # c-block
        jac[n + rows, rows] = -1.0 / gamma + 2 * self.curv * gamma
        jac[n + rows, n + rows] = 1.0 / self.ap
        jac[n + rows, self.i_a] = 1.0 / self.aa
        # gamma box
        jac[2 * n + rows, rows] = 1.0
        # p floor
        jac[3 * n + rows, n + rows] = -1.0
        # alpha cap
        jac[4 * n + rows, n + rows] = 1.0 / self.a_lim
        jac[4 * n + rows, self.i_a] = 1.0 / self.aa ** 2
        return jac

    def _constraint_hess_diag(self, x, inv_f: np.ndarray) -> np.ndarray:
        """Sum over constraints of (curvature diagonal) / (-f_i)."""
        gamma, p, z, alpha = self.unpack(x)
        n = self.n
        h = np.zeros(self.n_vars)
        w_b = inv_f[:n]  # 1/(-f_b)
        w_c = inv_f[n:2 * n]
        h[self.s_z] += w_b / z ** 2
        h[self.i_a] += float(np.sum(w_b)) / alpha ** 2
        h[self.s_g] += w_c * (1.0 / gamma ** 2 + 2 * self.curv)
        return h

    def barrier_value(self, x, t: float) -> float:
        """t*objective plus the log barrier; +inf outside the domain."""
        gamma, p, z, alpha = self.unpack(x)
        if gamma.min() <= 0 or p.min() <= P_FLOOR or z.min() <= 0 or alpha <= 0:
            return np.inf
        f = self.constraint_values(x)
        if f.max() >= 0:
            return np.inf
        return t * self.objective(x) - float(np.log(-f).sum())

    def barrier_grad_hess(self, x, t: float):
        f = self.constraint_values(x)
        inv_f = 1.0 / (-f)
        jac = self._constraint_jacobian(x)
        grad = t * self.objective_grad(x) + jac.T @ inv_f
        hess = (jac * (inv_f ** 2)[:, None]).T @ jac
        diag = t * self._objective_hess_diag(x) + self._constraint_hess_diag(x, inv_f)
        hess[np.diag_indices_from(hess)] += diag
        return grad, hess


def build_subproblem(state: ScaState, problem: DesignProblem) -> ConvexSubproblem:
    """Convexify the design problem around the state's anchors."""
    return ConvexSubproblem(state.anchor_gamma, state.anchor_p, state.anchor_alpha, problem)


def solve_subproblem(program: ConvexSubproblem, tolerance: float = 1e-8,
                     max_steps: int = 200, armijo: float = 0.3,
                     backtrack: float = 0.8) -> SubproblemSolution:
    """Primal log-barrier interior-point solve of one convex subproblem.

    The barrier weight starts at mu = 1 and shrinks tenfold per stage until
    the duality-gap surrogate n_ineq * mu falls below the relative
    tolerance; Newton steps use dense KKT solves with the single simplex
    equality and Armijo backtracking.
    """
    x = program.start_point()
    n_vars = program.n_vars
    eq = np.zeros(n_vars)
    eq[program.s_p] = 1.0
    t = 1.0
    steps = 0
    converged = False
    while steps < max_steps:
        # centering for the current barrier weight
        for _ in range(60):
            if steps >= max_steps:
                break
            grad, hess = program.barrier_grad_hess(x, t)
            kkt = np.zeros((n_vars + 1, n_vars + 1))
            kkt[:n_vars, :n_vars] = hess
            kkt[:n_vars, n_vars] = eq
            kkt[n_vars, :n_vars] = eq
            rhs = np.zeros(n_vars + 1)
            rhs[:n_vars] = -grad
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dx = sol[:n_vars]
            decrement = float(-grad @ dx)
            steps += 1
            if decrement / 2.0 <= 1e-10:
                break
            base = program.barrier_value(x, t)
            slope = float(grad @ dx)
            s = 1.0
            for _ in range(100):
                cand = x + s * dx
                if program.barrier_value(cand, t) <= base + armijo * s * slope:
                    break
                s *= backtrack
            else:
                break
            x = cand
        gap = program.n_ineq / t
        if gap <= tolerance * max(1.0, abs(program.objective(x))):
            converged = True
            break
        t *= 10.0
    gamma, p, z, alpha = program.unpack(x)
    return SubproblemSolution(gamma=gamma, p=p, z=z, alpha=alpha,
                              objective=program.objective(x),
                              gap=program.n_ineq / t, steps=steps, converged=converged)


def check_feasibility(gamma, p, alpha, problem: DesignProblem) -> FeasibilityCertificate:
    """Residuals of a (gamma, p, alpha) triple against constraints (i)-(iv)."""
    gamma = np.asarray(gamma, dtype=float)
    p = np.asarray(p, dtype=float)
    g_lim, a_lim = closed_form_limits(problem)
    a_m = channel.alpha_m(gamma, problem.lam, problem.g_max, problem.d, problem.e_s)
    coupling = np.abs(a_m - alpha * p) / alpha
    simplex = abs(float(p.sum()) - 1.0)
    box = []
    for m in range(problem.n):
        if not 0 < gamma[m] <= g_lim[m] * (1 + BOX_SLACK):
            box.append(("gamma", m, float(gamma[m] - g_lim[m])))
        if alpha * p[m] > a_lim[m] * (1 + BOX_SLACK):
            box.append(("alpha_p", m, float(alpha * p[m] - a_lim[m])))
        if not -BOX_SLACK <= p[m] <= 1 + BOX_SLACK:
            box.append(("p", m, float(p[m])))
    return FeasibilityCertificate(coupling_residual=coupling, simplex_residual=simplex,
                                  box_violations=box)


def sca_loop(problem: DesignProblem, init: ScaState = None, max_iters: int = 100,
             rel_tol: float = 1e-6, solver_tol: float = 1e-8):
    """Run SCA to a stationary design.

    Returns (design, state, certificate).  The trace records the true
    design-problem objective at exactly coupled feasible points and is
    non-increasing up to the solver tolerance; iteration stops on relative
    objective stall or max_iters.
    """
    norm_problem, scale = problem.normalized()
    if init is None:
        state = default_init(norm_problem)
    else:
        state = ScaState(anchor_gamma=np.asarray(init.anchor_gamma, dtype=float) / scale,
                         anchor_p=np.asarray(init.anchor_p, dtype=float),
                         anchor_alpha=float(init.anchor_alpha) / scale)

    net_norm = norm_problem.network
    design_norm = link.make_design(state.anchor_gamma, net_norm)
    state.objective_trace = [evaluate_p1(design_norm, norm_problem)]
    last_solution = None
    for k in range(1, max_iters + 1):
        sub = build_subproblem(state, norm_problem)
        sol = solve_subproblem(sub, tolerance=solver_tol)
        gamma_rec = recover_gamma(sol.p, sol.alpha, norm_problem)
        candidate = link.make_design(gamma_rec, net_norm)
        obj = evaluate_p1(candidate, norm_problem)
        previous = state.objective_trace[-1]
        if obj > previous + 1e-8 * max(1.0, abs(previous)):
            break  # numerical stall: keep the last accepted anchors
        state.anchor_gamma = gamma_rec
        state.anchor_p = sol.p
        state.anchor_alpha = sol.alpha
        state.iteration = k
        state.objective_trace.append(obj)
        last_solution = sol
        if abs(previous - obj) <= rel_tol * max(abs(previous), 1e-300):
            state.converged = True
            break

    # report anchors and iterate in the caller's units (z is dimensionless)
    state.anchor_gamma = state.anchor_gamma * scale
    state.anchor_alpha = state.anchor_alpha * scale
    if last_solution is not None:
        state.iterate = {"gamma": state.anchor_gamma, "p": last_solution.p,
                         "z": last_solution.z, "alpha": state.anchor_alpha}
    design = link.make_design(state.anchor_gamma, problem.network)
    certificate = check_feasibility(state.anchor_gamma, state.anchor_p,
                                    state.anchor_alpha, problem)
    return design, state, certificate
