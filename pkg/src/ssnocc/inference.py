"""MCMC engine: elliptical slice updates for the whitened spatial field,
adaptive random-walk Metropolis for the remaining parameters, multi-chain
driver and posterior summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics
from .model import ModelState, OccupancyModel, inverse_logit

MIN_BRACKET_ANGLE = 1e-10


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    n_iterations: int = 15000
    n_burnin: int = 5000
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44

    def __post_init__(self):
        if self.n_chains < 1 or self.thin < 1:
            raise ValueError("n_chains and thin must be >= 1")
        if not (0 <= self.n_burnin < self.n_iterations):
            raise ValueError("need 0 <= n_burnin < n_iterations")
        if not (0 < self.target_accept < 1):
            raise ValueError("target_accept must be in (0, 1)")

    @property
    def n_retained(self) -> int:
        post = self.n_iterations - self.n_burnin
        return (post + self.thin - 1) // self.thin


@dataclass
class AdaptState:
    """Per-coordinate log step sizes with windowed Robbins-Monro tuning."""

    log_step: dict
    accepts: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)
    window: int = 50
    target: float = 0.44
    n_windows: dict = field(default_factory=dict)
    frozen: bool = False

    def record(self, name: str, accepted: bool):
        self.proposals[name] = self.proposals.get(name, 0) + 1
        if accepted:
            self.accepts[name] = self.accepts.get(name, 0) + 1
        if not self.frozen and self.proposals[name] >= self.window:
            rate = self.accepts.get(name, 0) / self.proposals[name]
            k = self.n_windows.get(name, 0) + 1
            self.log_step[name] += (rate - self.target) / math.sqrt(k)
            self.n_windows[name] = k
            self.proposals[name] = 0
            self.accepts[name] = 0

    def step(self, name: str) -> float:
        return math.exp(self.log_step[name])


def ess_update_u(model: OccupancyModel, state: ModelState, rng: np.random.Generator,
                 incidents: list = None) -> ModelState:
    """One elliptical slice sampling update of the whitened field u.

    Valid because u is standard normal a priori; the move leaves the
    posterior invariant and always returns a state. A collapsed bracket
    keeps the current u and records an incident.
    """
    if not model.spatial:
        return state
    L = model.correlation_cholesky(state.theta)
    Xb = model.X.values @ state.beta

    def loglik(u):
        return model.log_likelihood_eta(Xb + state.sigma * (L @ u), state.p)

    u0 = state.u
    nu = rng.standard_normal(len(u0))
    log_y = loglik(u0) + math.log(rng.uniform())
    angle = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = angle - 2.0 * math.pi, angle
    while True:
        u = u0 * math.cos(angle) + nu * math.sin(angle)
        if loglik(u) > log_y:
            return state.with_u(u)
        if angle < 0:
            lo = angle
        else:
            hi = angle
        if hi - lo < MIN_BRACKET_ANGLE:
            if incidents is not None:
                incidents.append("ess bracket collapsed")
            return state
        angle = rng.uniform(lo, hi)


def _logit(x):
    return math.log(x) - math.log1p(-x)


def rwm_update_hyper(model: OccupancyModel, state: ModelState, rng: np.random.Generator,
                     adapt: AdaptState) -> ModelState:
    """One sweep of single-coordinate Gaussian random-walk Metropolis.

    Moves run on transformed scales (beta as-is, logit p, log sigma,
    log theta) with the matching Jacobian corrections.
    """
    lp = model.log_posterior(state)

    # beta coordinates, untransformed
    for k in range(len(state.beta)):
        name = f"beta{k}"
        beta_new = state.beta.copy()
        beta_new[k] += adapt.step(name) * rng.standard_normal()
        cand = replace(state, beta=beta_new)
        lp_new = model.log_posterior(cand)
        accepted = math.log(rng.uniform()) < lp_new - lp
        if accepted:
            state, lp = cand, lp_new
        adapt.record(name, accepted)

    # detection probability on the logit scale; Jacobian p(1-p)
    x = _logit(state.p) + adapt.step("p") * rng.standard_normal()
    p_new = 1.0 / (1.0 + math.exp(-x))
    if 0.0 < p_new < 1.0:
        cand = replace(state, p=p_new)
        lp_new = model.log_posterior(cand)
        ratio = (lp_new + math.log(p_new) + math.log1p(-p_new)) - (
            lp + math.log(state.p) + math.log1p(-state.p)
        )
        accepted = math.log(rng.uniform()) < ratio
        if accepted:
            state, lp = cand, lp_new
    else:
        accepted = False
    adapt.record("p", accepted)

    if model.spatial:
        # sigma and theta on the log scale; Jacobian is the parameter itself
        for name, getter in (("sigma", lambda s: s.sigma), ("theta", lambda s: s.theta)):
            val = getter(state)
            val_new = math.exp(math.log(val) + adapt.step(name) * rng.standard_normal())
            cand = replace(state, **{name: val_new})
            lp_new = model.log_posterior(cand)
            ratio = (lp_new + math.log(val_new)) - (lp + math.log(val))
            accepted = lp_new > -math.inf and math.log(rng.uniform()) < ratio
            if accepted:
                state, lp = cand, lp_new
            adapt.record(name, accepted)
    return state


def centered_update_scales(model: OccupancyModel, state: ModelState,
                           rng: np.random.Generator, adapt: AdaptState) -> ModelState:
    """Interweaving moves for sigma and theta that hold tau fixed.

    The whitened updates above mix poorly when the field is strongly
    informed (the funnel: small sigma pins u and vice versa). These are the
    complementary centered-parameterization proposals: change the scale
    parameter and solve for the u that leaves tau = sigma * L(theta) u
    unchanged, so the likelihood cancels and only the u prior, the scale
    prior and the transport Jacobian enter the Metropolis ratio.
    """
    if not model.spatial or state.sigma <= 0:
        return state
    pri = model.priors
    n = len(state.u)
    uu = float(state.u @ state.u)

    # sigma move: u' = u * sigma / sigma', log-scale random walk
    s_new = math.exp(math.log(state.sigma) + adapt.step("sigma_c") * rng.standard_normal())
    accepted = False
    if 0.0 < s_new < pri.sigma_max:
        r = state.sigma / s_new
        log_ratio = -0.5 * uu * (r * r - 1.0) + n * math.log(r) + math.log(s_new / state.sigma)
        accepted = math.log(rng.uniform()) < log_ratio
        if accepted:
            state = replace(state, sigma=s_new, u=state.u * r)
    adapt.record("sigma_c", accepted)

    # theta move: u' = L(theta')^-1 L(theta) u, log-scale random walk
    t_new = math.exp(math.log(state.theta) + adapt.step("theta_c") * rng.standard_normal())
    accepted = False
    if pri.theta_min < t_new < pri.theta_max:
        L_old = model.correlation_cholesky(state.theta)
        L_new = model.correlation_cholesky(t_new)
        from scipy.linalg import solve_triangular

        u_new = solve_triangular(L_new, L_old @ state.u, lower=True)
        log_ratio = (
            -0.5 * (float(u_new @ u_new) - float(state.u @ state.u))
            + float(np.sum(np.log(np.diag(L_old))) - np.sum(np.log(np.diag(L_new))))
            + math.log(t_new / state.theta)
        )
        accepted = math.log(rng.uniform()) < log_ratio
        if accepted:
            state = replace(state, theta=t_new, u=u_new)
    adapt.record("theta_c", accepted)
    return state


def initial_state(model: OccupancyModel, rng: np.random.Generator) -> ModelState:
    """Overdispersed but stable start: beta near 0, p at the naive
    detection frequency, theta at the median pairwise distance."""
    n_beta = model.X.values.shape[1]
    beta = 0.1 * rng.standard_normal(n_beta)
    p = float(np.clip(model.d.sum() / model.J.sum(), 0.1, 0.9))
    if model.spatial:
        off = model.dist.h[np.triu_indices(model.n_sites, k=1)]
        theta = float(np.median(off)) if off.size else 1.0
        theta = float(np.clip(theta, model.priors.theta_min * 1.0001,
                              model.priors.theta_max * 0.9999))
        sigma = min(1.0, 0.5 * model.priors.sigma_max)
    else:
        theta, sigma = 1.0, 0.0
    u = np.zeros(model.n_sites)
    return ModelState(beta=beta, p=p, sigma=sigma, theta=theta, u=u)


@dataclass
class ChainDraws:
    names: list
    values: np.ndarray  # retained x n_params
    incidents: list


@dataclass
class PosteriorSummary:
    parameters: dict  # name -> dict(mean, sd, q2.5, q97.5, rhat, ess)
    n_retained_per_chain: int
    incidents: list
    jitter_incidents: list
    prior_bounds: dict
    seed: int


def parameter_names(model: OccupancyModel) -> list:
    names = [f"beta{k}" for k in range(model.X.values.shape[1])]
    names.append("p")
    if model.spatial:
        names += ["sigma", "theta", "sigma2", "theta_over_sigma2"]
    names += [f"psi[{sid}]" for sid in model.site_ids]
    if model.spatial:
        names += [f"u[{sid}]" for sid in model.site_ids]
    names.append("lp")
    return names


def _row(model: OccupancyModel, state: ModelState, lp: float) -> list:
    psi = inverse_logit(model.linear_predictor(state))
    row = list(state.beta) + [state.p]
    if model.spatial:
        s2 = state.sigma**2
        row += [state.sigma, state.theta, s2, state.theta / s2]
    row += list(psi)
    if model.spatial:
        row += list(state.u)
    row.append(lp)
    return row


def run_chain(model: OccupancyModel, config: SamplerConfig, chain_id: int) -> ChainDraws:
    rng = np.random.default_rng(config.seed ^ chain_id)
    state = initial_state(model, rng)
    adapt = AdaptState(
        log_step={name: math.log(0.5) for name in
                  [f"beta{k}" for k in range(model.X.values.shape[1])]
                  + ["p", "sigma", "theta", "sigma_c", "theta_c"]},
        window=config.adapt_window,
        target=config.target_accept,
    )
    adapt.frozen = config.n_burnin == 0
    incidents = []
    names = parameter_names(model)
    retained = np.empty((config.n_retained, len(names)))
    r = 0
    for it in range(config.n_iterations):
        state = ess_update_u(model, state, rng, incidents)
        state = rwm_update_hyper(model, state, rng, adapt)
        state = centered_update_scales(model, state, rng, adapt)
        if it + 1 == config.n_burnin:
            adapt.frozen = True
        if it >= config.n_burnin and (it - config.n_burnin) % config.thin == 0:
            retained[r] = _row(model, state, model.log_posterior(state))
            r += 1
    return ChainDraws(names, retained[:r], incidents)


_MONITORED_PREFIXES = ("beta", "p", "sigma", "theta")


def monitored(names: list) -> list:
    keep = []
    for n in names:
        if n == "p" or (n.startswith(("beta", "sigma", "theta")) and "[" not in n):
            keep.append(n)
    return keep


def summarize(chains: list, model: OccupancyModel, config: SamplerConfig) -> PosteriorSummary:
    names = chains[0].names
    stacked = np.stack([c.values for c in chains])  # chains x draws x params
    params = {}
    monitored_set = set(monitored(names))
    for j, name in enumerate(names):
        if name == "lp" or name.startswith("u["):
            continue
        draws = stacked[:, :, j]
        flat = draws.ravel()
        entry = {
            "mean": float(flat.mean()),
            "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
            "q2.5": float(np.quantile(flat, 0.025)),
            "q97.5": float(np.quantile(flat, 0.975)),
        }
        if name in monitored_set:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore", diagnostics.ConstantChainWarning)
                entry["rhat"] = diagnostics.rhat(draws) if len(chains) > 1 else float("nan")
                entry["ess"] = diagnostics.ess(draws)
        params[name] = entry
    incidents = [i for c in chains for i in c.incidents]
    pri = model.priors
    prior_bounds = {
        "beta_sd": pri.beta_sd,
        "sigma_max": pri.sigma_max,
        "theta_min": pri.theta_min,
        "theta_max": pri.theta_max,
    }
    return PosteriorSummary(
        parameters=params,
        n_retained_per_chain=config.n_retained,
        incidents=incidents,
        jitter_incidents=list(model.jitter_incidents),
        prior_bounds=prior_bounds,
        seed=config.seed,
    )


def run_chains(model: OccupancyModel, config: SamplerConfig, workers: int = 1):
    """Run all chains (chain c seeded with seed XOR c) and summarize.

    Chains are independent; results are deterministic for a fixed seed
    regardless of worker count because merging preserves chain order.
    """
    chains = [run_chain(model, config, c) for c in range(config.n_chains)]
    summary = summarize(chains, model, config)
    return chains, summary


def convergence_ok(summary: PosteriorSummary, rhat_max: float = 1.1,
                   ess_min: float = 100.0) -> bool:
    for name, entry in summary.parameters.items():
        if "rhat" not in entry:
            continue
        if not math.isnan(entry["rhat"]) and entry["rhat"] >= rhat_max:
            return False
        if entry["ess"] <= ess_min:
            return False
    return True
