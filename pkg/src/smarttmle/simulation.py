"""Data-generating process, counterfactual truth oracles, and the power study."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import poisson

from .data import CONTRASTS, ECOACH, TrialDataset, from_arrays, get_regime
from .inference import contrast_test
from .tmle import TmleConfig, estimate_regimes
from .utils import derive_seed

log = logging.getLogger(__name__)

MEAN_FLOOR = 0.2
FAILURE_FLAG = 0.02

# The DGP's "∨"/"∧" are read as max/min: the Poisson mean is max(Y_{t-1}, 1/5) times
# the rate ratio of the most recent arm, A_0 for visit 1 and A_1 for visits 2 and 3.
DGP_INTERPRETATION = "max(Y_{t-1}, 1/5) * exp(lin(A_{min(t-1,1)}))"


@dataclass(frozen=True)
class SimParams:
    n: int = 250
    gamma0: float = math.log(1.5)
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma3: float = 0.0
    gamma_w: float = 0.0
    alpha0: float = -4.06
    step_up_prob: float = 0.5
    seed: int = 0
    # Informative missingness (zero by default): logit P(miss visit t)
    # = alpha0 + alpha_w * W0 + alpha_y * Y_{t-1}.
    alpha_w: float = 0.0
    alpha_y: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            object.__setattr__(self, f.name, int(v) if f.name in ("n", "seed") else float(v))
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        vals = [v for k, v in asdict(self).items() if k not in ("n", "seed")]
        if not all(np.isfinite(vals)):
            raise ValueError("all parameters must be finite")
        if not 0 <= self.step_up_prob <= 1:
            raise ValueError("step_up_prob must lie in [0, 1]")

    def log_rate(self, arm, w0):
        arm = np.asarray(arm)
        return (self.gamma1 * (arm == 1) + self.gamma2 * (arm == 2) + self.gamma3 * (arm == ECOACH)
                + self.gamma_w * np.asarray(w0))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_trial(params: SimParams, seed=None) -> TrialDataset:
    """One simulated trial. Deterministic given ``seed`` (defaults to ``params.seed``)."""
    rng = _rng(params.seed if seed is None else seed)
    n = params.n
    w0 = rng.binomial(1, 0.5, n).astype(float)
    y0 = rng.poisson(np.exp(params.gamma0), n).astype(float)
    a0 = rng.integers(0, 3, n).astype(float)
    u_miss = rng.random((n, 3))
    u_step = rng.random(n)

    def visit(prev, arm):
        mean = np.maximum(prev, MEAN_FLOOR) * np.exp(params.log_rate(arm, w0))
        return rng.poisson(mean).astype(float)

    def attends(t, prev_y, prev_c):
        p_miss = expit(params.alpha0 + params.alpha_w * w0 + params.alpha_y * prev_y)
        return prev_c & (u_miss[:, t - 1] >= p_miss)

    c1 = attends(1, y0, np.ones(n, dtype=bool))
    y1 = visit(y0, a0)
    elig = (a0 != 0) & (y1 >= y0) & (y1 != 0)
    a1 = np.where(c1 & elig & (u_step < params.step_up_prob), float(ECOACH), a0)
    c2 = attends(2, y1, c1)
    y2 = visit(y1, a1)
    c3 = attends(3, y2, c2)
    y3 = visit(y2, a1)

    def obs(v, c):
        return np.where(c, v, np.nan)

    return from_arrays(
        ids=[f"s{i + 1}" for i in range(n)],
        w0=w0, y0=y0, a0=a0,
        c1=c1.astype(float), w1=obs(np.zeros(n), c1), y1=obs(y1, c1), a1=obs(a1, c1),
        c2=c2.astype(float), w2=obs(np.zeros(n), c2), y2=obs(y2, c2),
        c3=c3.astype(float), y3=obs(y3, c3),
        metadata={"params": asdict(params), "dgp": DGP_INTERPRETATION},
    )


def true_regime_mean_mc(params: SimParams, regime, n_mc: int = 10**6, seed=0):
    """Monte Carlo mean of Y1 + Y2 + Y3 under the regime with attendance enforced.

    Returns ``(mean, mc_standard_error)``.
    """
    if n_mc < 10**4:
        raise ValueError("n_mc must be at least 1e4")
    regime = get_regime(regime)
    rng = _rng(seed)
    w0 = rng.binomial(1, 0.5, n_mc).astype(float)
    y0 = rng.poisson(np.exp(params.gamma0), n_mc).astype(float)
    a0 = np.full(n_mc, float(regime.stage0_arm))

    def visit(prev, arm):
        return rng.poisson(np.maximum(prev, MEAN_FLOOR) * np.exp(params.log_rate(arm, w0)))

    y1 = visit(y0, a0)
    if regime.is_step_up:
        a1 = np.where((a0 != 0) & (y1 >= y0) & (y1 != 0), float(ECOACH), a0)
    else:
        a1 = np.full(n_mc, float(regime.stage1_policy))
    y2 = visit(y1, a1)
    y3 = visit(y2, a1)
    total = (y1 + y2 + y3).astype(float)
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(n_mc))


def exact_regime_mean(params: SimParams, regime, kmax: int = 200) -> float:
    """Series-summation value of the regime mean, Poisson supports truncated at ``kmax``."""
    regime = get_regime(regime)
    k = np.arange(kmax + 1, dtype=float)
    total = 0.0
    for w0 in (0.0, 1.0):
        p0 = poisson.pmf(k, np.exp(params.gamma0))
        a_star = regime.stage0_arm
        m1 = np.maximum(k, MEAN_FLOOR) * np.exp(params.log_rate(a_star, w0))  # by y0
        p01 = p0[:, None] * poisson.pmf(k[None, :], m1[:, None])           # y0 x y1
        y0g, y1g = np.meshgrid(k, k, indexing="ij")
        if regime.is_step_up:
            a1 = np.where((a_star != 0) & (y1g >= y0g) & (y1g != 0), ECOACH, a_star)
        else:
            a1 = np.full(y0g.shape, int(regime.stage1_policy))
        r1 = np.exp(params.log_rate(a1, w0))
        m2 = np.maximum(y1g, MEAN_FLOOR) * r1
        e_y3 = (m2 + MEAN_FLOOR * np.exp(-m2)) * r1
        total += 0.5 * float(np.sum(p01 * (y1g + m2 + e_y3)))
    return total


@dataclass(frozen=True)
class PowerCell:
    params: SimParams
    contrast: str
    true_effect: float
    reps: int
    rejections: int
    failures: int
    mean_estimate: float
    estimates: tuple = field(default=(), repr=False)
    std_errors: tuple = field(default=(), repr=False)

    @property
    def successes(self) -> int:
        return self.reps - self.failures

    @property
    def power(self) -> float:
        return self.rejections / self.successes if self.successes else float("nan")

    @property
    def mc_se(self) -> float:
        p = self.power
        return float(np.sqrt(p * (1 - p) / self.successes)) if self.successes else float("nan")

    @property
    def flagged(self) -> bool:
        return self.failures > FAILURE_FLAG * self.reps

    def as_row(self) -> dict:
        p = self.params
        return {
            "gamma1": p.gamma1, "gamma2": p.gamma2, "gamma3": p.gamma3, "alpha0": p.alpha0,
            "n": p.n, "contrast": self.contrast, "true_effect": self.true_effect,
            "reps": self.reps, "rejections": self.rejections, "power": self.power,
            "mc_se": self.mc_se, "failures": self.failures,
        }


POWER_COLUMNS = ("gamma1", "gamma2", "gamma3", "alpha0", "n", "contrast", "true_effect", "reps",
                 "rejections", "power", "mc_se", "failures")


def contrast_label(c) -> str:
    return f"{c[0]}-{c[1]}"


def parse_contrast(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(get_regime(x).label for x in s)
    a, b = s.replace(" ", "").split("-")
    return get_regime(a).label, get_regime(b).label


def analyze_replication(data: TrialDataset, contrasts, config: TmleConfig, alpha: float):
    """Estimate every regime needed and run each contrast. Failed contrasts map to None."""
    regimes = sorted({r for c in contrasts for r in c})
    out = {}
    try:
        fits = estimate_regimes(data, regimes, config)
    except Exception as exc:  # noqa: BLE001 - replication failures are counted, not fatal
        log.debug("replication failed: %s", exc)
        return {c: None for c in contrasts}
    for c in contrasts:
        try:
            out[c] = contrast_test(fits[c[0]], fits[c[1]], alpha)
        except Exception as exc:  # noqa: BLE001
            log.debug("contrast %s failed: %s", c, exc)
            out[c] = None
    return out


def _run_rep(args):
    params, contrasts, config, alpha, seed = args
    data = simulate_trial(params, np.random.default_rng(seed))
    res = analyze_replication(data, contrasts, config, alpha)
    return {c: None if r is None else (r.estimate, r.std_error, r.reject) for c, r in res.items()}


def run_power_study(grid: Sequence[SimParams], contrasts=(("II", "I"),), reps: int = 500,
                    alpha: float = 0.05, config: TmleConfig = TmleConfig(learner="glm"),
                    master_seed: int = 0, n_mc: int = 10**6, n_jobs: int = 1,
                    progress=None, common_random_numbers: bool = False) -> list:
    """Rejection rates of the Wald test for each grid cell and contrast.

    Replication ``r`` of cell ``c`` uses a seed derived from
    ``(master_seed, c, r)``, so results do not depend on execution order.
    With ``common_random_numbers`` the seed is derived from ``(master_seed, r)``
    alone, which couples cells and sharpens between-cell comparisons.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    contrasts = [parse_contrast(c) for c in contrasts]
    cells = []
    pool = ProcessPoolExecutor(n_jobs) if n_jobs > 1 else None
    try:
        for ci, params in enumerate(grid):
            key = (lambda r: (r,)) if common_random_numbers else (lambda r: (ci, r))
            jobs = [(params, contrasts, config, alpha, derive_seed(master_seed, *key(r)))
                    for r in range(reps)]
            results = list(pool.map(_run_rep, jobs, chunksize=8)) if pool else list(map(_run_rep, jobs))
            truth_seed = derive_seed(master_seed, ci, 10**9)
            truths = {}
            for c in contrasts:
                for lab in c:
                    if lab not in truths:
                        truths[lab] = true_regime_mean_mc(params, lab, n_mc, truth_seed)[0]
            for c in contrasts:
                ok = [r[c] for r in results if r[c] is not None]
                cells.append(PowerCell(
                    params=params,
                    contrast=contrast_label(c),
                    true_effect=truths[c[0]] - truths[c[1]],
                    reps=reps,
                    rejections=int(sum(x[2] for x in ok)),
                    failures=reps - len(ok),
                    mean_estimate=float(np.mean([x[0] for x in ok])) if ok else float("nan"),
                    estimates=tuple(x[0] for x in ok),
                    std_errors=tuple(x[1] for x in ok),
                ))
            if progress:
                progress(ci + 1, len(grid))
    finally:
        if pool:
            pool.shutdown()
    return cells


def effect_grid(n_values=(200, 250, 300), alpha0_values=(-4.06, -3.35), starred=False, **kw):
    """Standard power-study grid. ``starred`` adds the larger eCoaching effects for the two mildest text effects."""
    g1 = (0.0, -0.11, -0.22, -0.36)
    g2 = (0.0, -0.22, -0.51)
    g3 = (0.0, -0.11, -0.22, -0.36)
    g3_star = (-0.69, -0.92, -1.20, -1.61)
    grid = []
    for n in n_values:
        for a in alpha0_values:
            for x1 in g1:
                for x2 in g2:
                    for x3 in g3 + (g3_star if starred and x1 in (0.0, -0.11) else ()):
                        grid.append(SimParams(n=n, gamma1=x1, gamma2=x2, gamma3=x3, alpha0=a, **kw))
    return grid


def complete_case_mean(data: TrialDataset, regime) -> float:
    """Unadjusted mean cumulative outcome among completers whose arms follow the regime."""
    regime = get_regime(regime)
    done = data.c3 == 1
    a_star = regime.stage0_arm
    if regime.is_step_up:
        elig = (data.a0 != 0) & (data.y1 >= data.y0) & (data.y1 != 0)
        a1_star = np.where(elig, ECOACH, a_star)
    else:
        a1_star = np.full(data.n, regime.stage1_policy)
    with np.errstate(invalid="ignore"):
        sel = done & (data.a0 == a_star) & (data.a1 == a1_star)
    if not sel.any():
        raise ValueError(f"no complete cases follow regime {regime.label}")
    return float(np.mean(data.cumulative_y[sel]))


def complete_case_difference(data: TrialDataset, r1, r2) -> float:
    return complete_case_mean(data, r1) - complete_case_mean(data, r2)
