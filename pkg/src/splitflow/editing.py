"""Inversion-free editing loops: the single-flow baseline and the split/aggregate variant.

Both loops walk the noise grid ``sigma_i = i / T`` from ``i = eta_max`` down to 1
and move a clean-space latent ``x_fe`` with the velocity difference between the
target-conditioned and source-conditioned field. The split variant additionally
runs one sub-flow per sub-target condition until ``eta_dec``, where the
sub-flows are projected onto the target trajectory and their velocity deltas
are merged with consensus-based softmax weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, DimensionError, DomainError, NumericError
from .fields import Condition, evaluate_cfg
from .latent import DEFAULT_TOL, as_latent, cosine_similarity_map, noise_interpolate, project_onto

AGGREGATIONS = {
    # name: (project sub-latents onto the target trajectory, weighting of sub-deltas)
    "avg": (False, "uniform"),
    "ltp": (True, "uniform"),
    "vfa": (False, "vfa"),
    "ltp+vfa": (True, "vfa"),
}


@dataclass(frozen=True)
class EditSchedule:
    T: int = 50
    eta_max: int = 33
    eta_dec: int = 28

    def __post_init__(self):
        if not (1 <= self.eta_dec < self.eta_max <= self.T):
            raise ConfigError(f"schedule needs 1 <= eta_dec < eta_max <= T, got T={self.T}, "
                              f"eta_max={self.eta_max}, eta_dec={self.eta_dec}")

    def sigma(self, i: int) -> float:
        return i / self.T

    @property
    def sigma_start(self) -> float:
        return self.sigma(self.eta_max)

    def expected_delta_evals(self, n_sub: int) -> int:
        """Velocity-delta evaluations of a split run, excluding the VFA evaluations at ``eta_dec``."""
        return n_sub * (self.eta_max - self.eta_dec) + self.eta_max


@dataclass
class EditConfig:
    cfg_src: float = 3.5
    cfg_tgt: float = 13.5
    cfg_sub: Optional[float] = None  # None -> cfg_tgt
    fidelity_enhanced: bool = False
    share_eps_across_flows: bool = True
    seed: int = 0
    max_sub_prompts: Optional[int] = 3  # None -> uncapped
    ltp_reference: str = "pre"  # target latent used for projection: before or after its own step at eta_dec
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if min(self.cfg_src, self.cfg_tgt, self.sub_scale) < 0:
            raise ConfigError("guidance scales must be >= 0")
        if self.max_sub_prompts is not None and self.max_sub_prompts < 1:
            raise ConfigError("max_sub_prompts must be >= 1")
        if self.ltp_reference not in ("pre", "post"):
            raise ConfigError(f"ltp_reference must be 'pre' or 'post', got {self.ltp_reference!r}")

    @property
    def sub_scale(self) -> float:
        return self.cfg_tgt if self.cfg_sub is None else self.cfg_sub


@dataclass
class EditState:
    x_fe: np.ndarray
    x_fe_sub: list
    i: int
    delta_evals: int = 0


@dataclass
class StepRecord:
    i: int
    sigma: float
    phase: str
    delta_norms: list  # target flow first, then sub-flows
    delta_evals: int


@dataclass
class RunReport:
    method: str
    n_sub: int
    schedule: EditSchedule
    steps: list = field(default_factory=list)
    delta_evals: int = 0
    vfa_evals: int = 0
    weight_summary: list = field(default_factory=list)  # per sub-flow {min, mean, max}
    aggregation_shift: Optional[float] = None
    final_latent: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "format": "splitflow-run-report",
            "version": 1,
            "method": self.method,
            "n_sub": self.n_sub,
            "schedule": {"T": self.schedule.T, "eta_max": self.schedule.eta_max, "eta_dec": self.schedule.eta_dec},
            "delta_evals": self.delta_evals,
            "vfa_evals": self.vfa_evals,
            "expected_delta_evals": (self.schedule.expected_delta_evals(self.n_sub) if self.n_sub else self.schedule.eta_max),
            "aggregation_shift": self.aggregation_shift,
            "weight_summary": self.weight_summary,
            "final_latent": self.final_latent,
            "steps": [vars(s) for s in self.steps],
        }


def velocity_delta(fld, x_tgt_est, x_src, sigma, cond_tgt: Condition, cond_src: Condition,
                   cfg_tgt: float = 1.0, cfg_src: float = 1.0) -> np.ndarray:
    x_tgt_est = as_latent(x_tgt_est, "x_tgt_est")
    x_src = as_latent(x_src, "x_src")
    if x_tgt_est.shape != x_src.shape:
        raise DimensionError(f"target estimate {x_tgt_est.shape} and source {x_src.shape} differ in shape")
    return evaluate_cfg(fld, x_tgt_est, sigma, cond_tgt, cfg_tgt) - evaluate_cfg(fld, x_src, sigma, cond_src, cfg_src)


def _flow_step(fld, x_fe, x0, x_src, sigma, dt, cond, cond_src, cfg_c, cfg_s):
    """One Euler step of a clean-space trajectory; returns (new latent, delta)."""
    d = velocity_delta(fld, x_fe + x_src - x0, x_src, sigma, cond, cond_src, cfg_c, cfg_s)
    return x_fe + dt * d, d


class _Noise:
    """Per-step noise draws; sub-flows get their own streams unless noise is shared."""

    def __init__(self, seed, shape, n_sub, shared):
        self.shape = shape
        self.main = np.random.default_rng(seed)
        self.shared = shared
        self.subs = [np.random.default_rng([seed, k + 1]) for k in range(n_sub)]

    def draw(self, with_subs: bool):
        eps = self.main.standard_normal(self.shape)
        if not with_subs:
            return eps, []
        if self.shared:
            return eps, [eps] * len(self.subs)
        return eps, [r.standard_normal(self.shape) for r in self.subs]


def _check_finite(x, i):
    if not np.all(np.isfinite(x)):
        raise NumericError("edited latent became non-finite", step=i)


def decomposition_step(fld, state: EditState, x0_src, cond_src, sub_conds, cond_tgt, sigma_i, delta, eps_i,
                       config: EditConfig, sub_eps: Optional[Sequence] = None) -> EditState:
    """Advance the target trajectory and every sub-trajectory by one Euler step of size ``delta``.

    ``delta`` is ``sigma_{i-1} - sigma_i`` (negative). ``sub_eps`` defaults to ``eps_i`` for every sub-flow.
    """
    if not sub_conds:
        raise ConfigError("decomposition needs at least one sub-target condition")
    if len(state.x_fe_sub) != len(sub_conds):
        raise ConfigError(f"{len(state.x_fe_sub)} sub-trajectories for {len(sub_conds)} sub-conditions")
    sub_eps = [eps_i] * len(sub_conds) if sub_eps is None else list(sub_eps)

    def src_at(eps):
        return x0_src if config.fidelity_enhanced else noise_interpolate(x0_src, eps, sigma_i)

    x_fe, _ = _flow_step(fld, state.x_fe, x0_src, src_at(eps_i), sigma_i, delta, cond_tgt, cond_src,
                         config.cfg_tgt, config.cfg_src)
    subs = []
    for x_k, c_k, e_k in zip(state.x_fe_sub, sub_conds, sub_eps):
        new, _ = _flow_step(fld, x_k, x0_src, src_at(e_k), sigma_i, delta, c_k, cond_src,
                            config.sub_scale, config.cfg_src)
        subs.append(new)
    return EditState(x_fe, subs, state.i - 1, state.delta_evals + 1 + len(subs))


def ltp(sub_latents: Sequence, target_latent, tol: float = DEFAULT_TOL):
    """Project each sub-latent onto the target latent per location; return (projections, their mean)."""
    if not len(sub_latents):
        raise ConfigError("latent trajectory projection needs at least one sub-latent")
    projected = [project_onto(x, target_latent, tol) for x in sub_latents]
    return projected, np.mean(projected, axis=0)


def aggregation_weights(gs: Sequence, tol: float = DEFAULT_TOL, include_self: bool = False) -> np.ndarray:
    """(N, H, W) softmax weights from summed pairwise cosine similarity of the velocity deltas.

    ``include_self`` adds the diagonal ``S_kk`` to every score. That is a constant
    shift for non-degenerate columns, so the weights do not change.
    """
    n = len(gs)
    if n == 0:
        raise ConfigError("aggregation needs at least one velocity")
    h, w = np.shape(gs[0])[1:]
    scores = np.zeros((n, h, w))
    for k in range(n):
        for j in range(n):
            if j != k or include_self:
                scores[k] += cosine_similarity_map(gs[k], gs[j], tol)
    return softmax(scores, axis=0)


def aggregate_velocities(gs: Sequence, weights) -> np.ndarray:
    return np.einsum("khw,kchw->chw", np.asarray(weights), np.asarray(gs))


def vfa(fld, projected: Sequence, x_src, x0_src, sigma, sub_conds: Sequence, cond_src, config: EditConfig,
        tol: float = DEFAULT_TOL, weighting: str = "vfa", sub_src: Optional[Sequence] = None):
    """Velocity-field aggregation at the projected sub-latents.

    Each sub-delta is evaluated at the noisy estimate ``projected[k] + x_src - x0_src``
    (the same clean-to-noisy mapping the trajectories use). Returns
    ``(v_bar, weights (N, H, W), deltas)``.
    """
    n = len(projected)
    if n == 0 or n != len(sub_conds):
        raise ConfigError(f"need matching non-empty projected latents and sub-conditions, got {n} and {len(sub_conds)}")
    sub_src = [x_src] * n if sub_src is None else list(sub_src)
    gs = [velocity_delta(fld, p + xs - x0_src, xs, sigma, c, cond_src, config.sub_scale, config.cfg_src)
          for p, c, xs in zip(projected, sub_conds, sub_src)]
    if weighting == "vfa":
        weights = aggregation_weights(gs, tol)
    elif weighting == "uniform":
        weights = np.full((n, *np.shape(gs[0])[1:]), 1.0 / n)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    return aggregate_velocities(gs, weights), weights, gs


def aggregate_update(x_proj, v_bar, delta: float) -> np.ndarray:
    x_proj = as_latent(x_proj, "x_proj")
    v_bar = as_latent(v_bar, "v_bar")
    if x_proj.shape != v_bar.shape:
        raise DimensionError(f"x_proj {x_proj.shape} and v_bar {v_bar.shape} differ in shape")
    return x_proj + delta * v_bar


def run_flowedit(fld, x0_src, cond_src, cond_tgt, schedule: EditSchedule, config: EditConfig):
    """Baseline single-flow edit; returns ``(edited latent, RunReport)``."""
    x0 = as_latent(x0_src, "x0_src")
    noise = _Noise(config.seed, x0.shape, 0, True)
    report = RunReport("baseline", 0, schedule)
    x_fe = x0.copy()
    for i in range(schedule.eta_max, 0, -1):
        sigma = schedule.sigma(i)
        dt = schedule.sigma(i - 1) - sigma
        eps, _ = noise.draw(False)
        x_src = noise_interpolate(x0, eps, sigma)
        x_fe, d = _flow_step(fld, x_fe, x0, x_src, sigma, dt, cond_tgt, cond_src, config.cfg_tgt, config.cfg_src)
        _check_finite(x_fe, i)
        report.delta_evals += 1
        report.steps.append(StepRecord(i, sigma, "unified", [float(np.linalg.norm(d))], report.delta_evals))
    return x_fe, report


def flowedit_run(fld, x0_src, cond_src, cond_tgt, schedule: EditSchedule, config: EditConfig) -> np.ndarray:
    return run_flowedit(fld, x0_src, cond_src, cond_tgt, schedule, config)[0]


def splitflow_run(fld, x0_src, cond_src, sub_conds: Sequence, cond_tgt, schedule: EditSchedule,
                  config: EditConfig, aggregation: str = "ltp+vfa"):
    """Split-flow edit; returns ``(edited latent, RunReport)``.

    Steps ``eta_max .. eta_dec+1`` advance the target flow and all sub-flows.
    At ``eta_dec`` the target flow takes its own step (used as the projection
    reference when ``config.ltp_reference == "post"``, and recorded as
    ``aggregation_shift`` otherwise); the sub-flows are then projected, their
    deltas aggregated, and the result replaces the target latent. Steps below
    ``eta_dec`` are plain single-flow steps under the full target condition.
    """
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {aggregation!r}; choose from {sorted(AGGREGATIONS)}")
    project, weighting = AGGREGATIONS[aggregation]
    n = len(sub_conds)
    if n < 1:
        raise ConfigError("split-flow editing needs at least one sub-target condition")
    if config.max_sub_prompts is not None and n > config.max_sub_prompts:
        raise ConfigError(f"{n} sub-target conditions exceed max_sub_prompts={config.max_sub_prompts}")
    x0 = as_latent(x0_src, "x0_src")
    noise = _Noise(config.seed, x0.shape, n, config.share_eps_across_flows)
    report = RunReport(aggregation, n, schedule)
    state = EditState(x0.copy(), [x0.copy() for _ in range(n)], schedule.eta_max)

    for i in range(schedule.eta_max, 0, -1):
        sigma = schedule.sigma(i)
        dt = schedule.sigma(i - 1) - sigma
        if i > schedule.eta_dec:
            eps, sub_eps = noise.draw(True)
            before = state
            state = decomposition_step(fld, state, x0, cond_src, sub_conds, cond_tgt, sigma, dt, eps, config, sub_eps)
            norms = [float(np.linalg.norm(a - b)) / abs(dt) for a, b in
                     zip([state.x_fe, *state.x_fe_sub], [before.x_fe, *before.x_fe_sub])]
            for x in (state.x_fe, *state.x_fe_sub):
                _check_finite(x, i)
            report.delta_evals = state.delta_evals
            report.steps.append(StepRecord(i, sigma, "decomposition", norms, report.delta_evals))
        elif i == schedule.eta_dec:
            eps, sub_eps = noise.draw(True)
            src = (lambda e: x0) if config.fidelity_enhanced else (lambda e: noise_interpolate(x0, e, sigma))
            x_src = src(eps)
            x_post, d = _flow_step(fld, state.x_fe, x0, x_src, sigma, dt, cond_tgt, cond_src,
                                   config.cfg_tgt, config.cfg_src)
            state.delta_evals += 1
            reference = state.x_fe if config.ltp_reference == "pre" else x_post
            if project:
                projected, x_proj = ltp(state.x_fe_sub, reference, config.tol)
            else:
                projected, x_proj = list(state.x_fe_sub), np.mean(state.x_fe_sub, axis=0)
            v_bar, weights, gs = vfa(fld, projected, x_src, x0, sigma, sub_conds, cond_src, config, config.tol,
                                     weighting, sub_src=[src(e) for e in sub_eps])
            report.vfa_evals += n
            x_new = aggregate_update(x_proj, v_bar, dt)
            _check_finite(x_new, i)
            report.aggregation_shift = float(np.max(np.abs(x_new - x_post)))
            report.weight_summary = [{"min": float(w.min()), "mean": float(w.mean()), "max": float(w.max())}
                                     for w in weights]
            state = EditState(x_new, [], i - 1, state.delta_evals)
            report.delta_evals = state.delta_evals
            report.steps.append(StepRecord(i, sigma, "aggregation",
                                           [float(np.linalg.norm(d)), *(float(np.linalg.norm(g)) for g in gs)],
                                           report.delta_evals))
        else:
            eps, _ = noise.draw(False)
            x_src = noise_interpolate(x0, eps, sigma)
            x_fe, d = _flow_step(fld, state.x_fe, x0, x_src, sigma, dt, cond_tgt, cond_src,
                                 config.cfg_tgt, config.cfg_src)
            _check_finite(x_fe, i)
            state = EditState(x_fe, [], i - 1, state.delta_evals + 1)
            report.delta_evals = state.delta_evals
            report.steps.append(StepRecord(i, sigma, "unified", [float(np.linalg.norm(d))], report.delta_evals))
    return state.x_fe, report


def run_edit(method: str, fld, x0_src, cond_src, cond_tgt, schedule, config, sub_conds=()):
    """Dispatch on method tag: ``baseline`` or one of the aggregation names."""
    if method == "baseline":
        return run_flowedit(fld, x0_src, cond_src, cond_tgt, schedule, config)
    return splitflow_run(fld, x0_src, cond_src, sub_conds, cond_tgt, schedule, config, aggregation=method)


# --- the aggregation inequality ----------------------------------------------

@dataclass
class VfaMargins:
    margin: float  # <g_bar, g_avg> - |g_avg|^2
    gibbs: float  # sum_k w_k a_k - log(Z / K)
    jensen: float  # log(Z / K) - mean(a)
    weights: np.ndarray
    scores: np.ndarray


def check_vfa_inequality(unit_vectors: Sequence, tol: float = 1e-9) -> VfaMargins:
    """Evaluate both sides of the consensus-weighting inequality for unit vectors ``g_1..g_K``."""
    g = np.atleast_2d(np.asarray(unit_vectors, dtype=np.float64))
    if g.shape[0] == 0:
        raise DomainError("need at least one vector")
    norms = np.linalg.norm(g, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise DomainError(f"vectors must be unit-norm within {tol}, got norms {norms}")
    k = g.shape[0]
    scores = (g @ g.T).sum(axis=1)
    weights = softmax(scores)
    g_bar = weights @ g
    g_avg = g.mean(axis=0)
    log_z_over_k = logsumexp(scores) - np.log(k)
    return VfaMargins(
        margin=float(g_bar @ g_avg - g_avg @ g_avg),
        gibbs=float(weights @ scores - log_z_over_k),
        jensen=float(log_z_over_k - scores.mean()),
        weights=weights,
        scores=scores,
    )
