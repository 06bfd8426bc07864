"""Exact-likelihood discrete-diffusion sandbox.

Small reverse chains over a handful of states, enumerated exhaustively, so
that the reward-reparameterization identity and the two-term gradient
decomposition of the pairwise objective can be checked numerically rather
than taken on faith.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import substream

MAX_TRAJECTORIES = 10**6


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DiscreteDiffusionSpec:
    """Reverse chains p(x_{t-1} | x_t, c): theta holds logits per
    (context, step, from-state) row, ref holds fixed stochastic rows.
    The terminal distribution p(x_T) is uniform."""

    n_states: int = 4
    steps: int = 2  # reverse steps; trajectories have steps+1 states
    theta: np.ndarray = None
    ref: np.ndarray = None
    reward: np.ndarray = None  # (contexts, n_states), reward of x_0 per context
    beta: float = 1.0

    def __post_init__(self):
        shape = (self.n_contexts, self.steps, self.n_states, self.n_states)
        if self.theta.shape != shape or self.ref.shape != shape:
            raise ConfigError(f"theta/ref must have shape {shape}")
        if self.reward.shape != (self.n_contexts, self.n_states):
            raise ConfigError("reward must have shape (contexts, n_states)")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if np.any(self.ref <= 0):
            raise ConfigError("reference rows must be strictly positive")
        if np.max(np.abs(self.ref.sum(axis=-1) - 1.0)) > 1e-12:
            raise ConfigError("reference rows must sum to 1")

    @property
    def n_contexts(self) -> int:
        return self.reward.shape[0] if self.reward is not None else 2


def random_spec(seed: int, n_states: int = 4, steps: int = 2, n_contexts: int = 2,
                beta: float = 1.0) -> DiscreteDiffusionSpec:
    rng = substream(seed, "theory-spec")
    shape = (n_contexts, steps, n_states, n_states)
    # strictly positive stochastic rows: smoothed Dirichlet draws
    ref = 0.9 * rng.dirichlet(np.full(n_states, 2.0), size=shape[:-1]) + 0.1 / n_states
    ref = ref / ref.sum(axis=-1, keepdims=True)
    theta = rng.normal(0.0, 1.0, size=shape)
    reward = rng.uniform(-1.0, 1.0, size=(n_contexts, n_states))
    return DiscreteDiffusionSpec(n_states, steps, theta, ref, reward, beta)


def chain_from_theta(theta: np.ndarray) -> np.ndarray:
    return _softmax_rows(theta)


def theta_from_chain(chain: np.ndarray) -> np.ndarray:
    return np.log(chain)


def enumerate_trajectories(spec: DiscreteDiffusionSpec) -> np.ndarray:
    """All state sequences (x_0, ..., x_T), lexicographic, as an int array."""
    count = spec.n_states ** (spec.steps + 1)
    if count > MAX_TRAJECTORIES:
        raise ConfigError(f"{count} trajectories exceed the enumeration budget")
    return np.array(list(itertools.product(range(spec.n_states), repeat=spec.steps + 1)))


def trajectory_prob(chain: np.ndarray, trajectory, c: int) -> float:
    """p(x_T) * prod_t p(x_{t-1} | x_t, c) for one trajectory under a
    row-stochastic chain (use chain_from_theta for logits)."""
    n = chain.shape[-1]
    p = 1.0 / n
    for t in range(chain.shape[1], 0, -1):
        p *= chain[c, t - 1, trajectory[t], trajectory[t - 1]]
    return float(p)


def _all_probs(chain: np.ndarray, trajs: np.ndarray, c: int) -> np.ndarray:
    n = chain.shape[-1]
    p = np.full(len(trajs), 1.0 / n)
    for t in range(chain.shape[1], 0, -1):
        p = p * chain[c, t - 1, trajs[:, t], trajs[:, t - 1]]
    return p


def lemma1_check(spec: DiscreteDiffusionSpec) -> float:
    """Residual of the reward-reparameterization identity.

    Tilting the reference chain by exp(R/beta)/Z gives the optimal policy;
    the identity recovers R(c, x0) from the policy/reference log-ratio plus
    beta log Z(c).  Returns the max |residual| over (context, x0).
    """
    trajs = enumerate_trajectories(spec)
    worst = 0.0
    for c in range(spec.n_contexts):
        p_ref = _all_probs(spec.ref, trajs, c)
        tilt = np.exp(spec.reward[c, trajs[:, 0]] / spec.beta)
        Z = float(np.sum(p_ref * tilt))
        p_star = p_ref * tilt / Z
        log_ratio = np.log(p_star) - np.log(p_ref)
        for x0 in range(spec.n_states):
            mask = trajs[:, 0] == x0
            cond = p_star[mask] / p_star[mask].sum()
            expectation = float(np.sum(cond * log_ratio[mask]))
            resid = abs(spec.reward[c, x0] - spec.beta * expectation - spec.beta * np.log(Z))
            worst = max(worst, resid)
    return worst


def _pair_tables(spec: DiscreteDiffusionSpec, theta: np.ndarray, trajs: np.ndarray, c: int):
    """Per-context tables over ordered trajectory pairs (a, b):
    probs P, win indicator (reward of x0_a >= reward of x0_b), and the
    log-sigmoid argument D with winner/loser labels applied."""
    chain = chain_from_theta(theta)
    P = _all_probs(chain, trajs, c)
    log_ratio = np.log(P) - np.log(_all_probs(spec.ref, trajs, c))
    r0 = spec.reward[c, trajs[:, 0]]
    wins = r0[:, None] >= r0[None, :]
    sign = np.where(wins, 1.0, -1.0)
    D = sign * spec.beta * (log_ratio[:, None] - log_ratio[None, :])
    return P, sign, D


def objective_J(theta: np.ndarray, spec: DiscreteDiffusionSpec) -> float:
    """Pairwise objective: expectation over contexts and ordered trajectory
    pairs of log sigmoid(beta (log-ratio of winner - log-ratio of loser)),
    with winners labeled by the theta-independent reward comparison."""
    trajs = enumerate_trajectories(spec)
    total = 0.0
    for c in range(spec.n_contexts):
        P, _, D = _pair_tables(spec, theta, trajs, c)
        F = -np.logaddexp(0.0, -D)
        total += float(P @ F @ P)
    return total / spec.n_contexts


def _score_matrix(theta: np.ndarray, trajs: np.ndarray, c: int) -> np.ndarray:
    """G[traj, flat(theta_c)] = d log p_theta(traj | c) / d theta[c]."""
    pi = chain_from_theta(theta)
    steps, n = theta.shape[1], theta.shape[-1]
    G = np.zeros((len(trajs), steps, n, n))
    rows = np.arange(len(trajs))
    for t in range(1, steps + 1):
        frm = trajs[:, t]
        to = trajs[:, t - 1]
        G[rows, t - 1, frm, :] -= pi[c, t - 1, frm, :]
        G[rows, t - 1, frm, to] += 1.0
    return G.reshape(len(trajs), -1)


def analytic_gradient_terms(spec: DiscreteDiffusionSpec):
    """The two-term decomposition (T1, T2) of grad objective_J at spec.theta,
    each with the same shape as theta, computed by exact enumeration."""
    trajs = enumerate_trajectories(spec)
    T1 = np.zeros_like(spec.theta)
    T2 = np.zeros_like(spec.theta)
    nC = spec.n_contexts
    for c in range(nC):
        P, sign, D = _pair_tables(spec, spec.theta, trajs, c)
        F = -np.logaddexp(0.0, -D)
        G = _score_matrix(spec.theta, trajs, c)
        # T1: sum_ab P_a P_b (G_a + G_b) F_ab
        u = P * (F @ P) + P * (F.T @ P)
        T1[c] += (G.T @ u).reshape(spec.theta.shape[1:]) / nC
        # T2: sum_ab P_a P_b sigmoid(-D_ab) beta sign_ab (G_a - G_b)
        M = np.outer(P, P) * _sigmoid(-D) * spec.beta * sign
        T2[c] += (G.T @ (M.sum(axis=1) - M.sum(axis=0))).reshape(spec.theta.shape[1:]) / nC
    return T1, T2


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def fd_gradient(spec: DiscreteDiffusionSpec, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of objective_J w.r.t. every logit."""
    grad = np.zeros_like(spec.theta)
    theta = spec.theta.copy()
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = objective_J(theta, spec)
        flat[i] = orig - h
        down = objective_J(theta, spec)
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return grad


def theorem1_check(spec: DiscreteDiffusionSpec, h: float = 1e-5) -> float:
    """Max relative error of (T1 + T2) against the finite-difference gradient,
    with denominator max(1, |grad|) per component."""
    T1, T2 = analytic_gradient_terms(spec)
    fd = fd_gradient(spec, h)
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(T1 + T2 - fd) / denom))


@dataclass
class TheoryReport:
    trials: int
    seed: int
    lemma1_residual: float
    theorem1_rel_error: float
    tol_lemma: float
    tol_theorem: float
    lemma1_pass: bool = field(init=False)
    theorem1_pass: bool = field(init=False)

    def __post_init__(self):
        self.lemma1_residual = float(self.lemma1_residual)
        self.theorem1_rel_error = float(self.theorem1_rel_error)
        self.lemma1_pass = bool(self.lemma1_residual <= self.tol_lemma)
        self.theorem1_pass = bool(self.theorem1_rel_error <= self.tol_theorem)

    @property
    def passed(self) -> bool:
        return self.lemma1_pass and self.theorem1_pass

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "lemma1_residual": self.lemma1_residual,
            "theorem1_rel_error": self.theorem1_rel_error,
            "tol_lemma": self.tol_lemma,
            "tol_theorem": self.tol_theorem,
            "lemma1_pass": self.lemma1_pass,
            "theorem1_pass": self.theorem1_pass,
            "passed": self.passed,
        }


def run_verification(seed: int = 0, trials: int = 20, tol_lemma: float = 1e-10,
                     tol_theorem: float = 1e-4) -> TheoryReport:
    """Worst residual/error over `trials` seeded random specs."""
    worst_lemma = 0.0
    worst_theorem = 0.0
    for k in range(trials):
        spec = random_spec(seed + k)
        worst_lemma = max(worst_lemma, lemma1_check(spec))
        worst_theorem = max(worst_theorem, theorem1_check(spec))
    return TheoryReport(trials, seed, worst_lemma, worst_theorem, tol_lemma, tol_theorem)
