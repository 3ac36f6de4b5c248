"""Per-dyad Gaussian-process trend extraction on monthly log-fatalities.

The trend of a dyad's log-fatality series is modeled as a zero-mean GP
with a Matérn 3/2 kernel plus i.i.d. observation noise. Hyperparameters
(length scale, amplitude, noise sd) are fit by MAP under a LogNormal
length-scale prior, optionally with two-stage country-level pooling of
the length scale. The deliverable per dyad is the posterior mean on the
monthly grid and its numerical first derivative, which downstream code
discretizes into escalation states.

Everything here is dense: series run to a few hundred months at most, so
a Cholesky factorization per objective evaluation is cheap and exact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import months
from .ingest import DyadMonthSeries

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)

# Weakly-informative half-Normal scale for the amplitude and noise priors,
# on the log-fatality scale.
AMPLITUDE_NOISE_PRIOR_SD = 2.0

# Jitter policy: first level is 1e-8 * eta^2, escalated x10 at most 3 times.
_JITTER_BASE = 1e-8
_JITTER_LEVELS = 4

# Box constraint on log-parameters; purely a numerical guard against
# runaway line searches (exp(+-12) is far outside any plausible optimum).
_LOG_BOUND = 12.0


class FactorizationError(RuntimeError):
    """Gram matrix stayed indefinite through every jitter escalation."""


class FitError(RuntimeError):
    """Every optimizer start diverged to a non-finite objective."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class KernelParams:
    """Matérn 3/2 hyperparameters plus observation noise sd (months / log-fatalities)."""

    length_scale: float
    amplitude: float
    noise_sd: float

    def __post_init__(self) -> None:
        for name, value in (
            ("length_scale", self.length_scale),
            ("amplitude", self.amplitude),
            ("noise_sd", self.noise_sd),
        ):
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be positive and finite: {value}")

    def scaled(self, factor: float) -> "KernelParams":
        return KernelParams(
            self.length_scale * factor, self.amplitude * factor, self.noise_sd * factor
        )


@dataclass(frozen=True)
class PriorSpec:
    """LogNormal prior on the length scale: ln l ~ Normal(log_median, log_sd)."""

    log_median: float
    log_sd: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.log_sd) and self.log_sd > 0.0):
            raise ValueError(f"log_sd must be positive: {self.log_sd}")


@dataclass
class TrendFit:
    """MAP hyperparameters plus posterior mean and derivative on the monthly grid."""

    dyad_id: str
    params: KernelParams
    grid: np.ndarray
    mean: np.ndarray
    derivative: np.ndarray
    log_posterior_at_map: float


# ---------------------------------------------------------------------------
# Kernel and linear algebra
# ---------------------------------------------------------------------------

def matern32(distance, length_scale: float, amplitude: float):
    """Matérn 3/2 covariance at the given distance(s) in months.

    k(d) = eta^2 (1 + sqrt(3) d / l) exp(-sqrt(3) d / l).
    """
    if not (math.isfinite(length_scale) and length_scale > 0.0):
        raise ValueError(f"length_scale must be positive and finite: {length_scale}")
    if not (math.isfinite(amplitude) and amplitude > 0.0):
        raise ValueError(f"amplitude must be positive and finite: {amplitude}")
    d = np.asarray(distance, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and non-negative")
    r = SQRT3 * d / length_scale
    out = amplitude**2 * (1.0 + r) * np.exp(-r)
    return out if out.ndim else float(out)


def build_gram(times: np.ndarray, params: KernelParams) -> np.ndarray:
    """Kernel matrix on the given time points, noise variance on the diagonal."""
    x = np.asarray(times, dtype=float)
    if len(np.unique(x)) != len(x):
        raise ValueError("time points must be distinct")
    d = np.abs(x[:, None] - x[None, :])
    gram = matern32(d, params.length_scale, params.amplitude)
    gram[np.diag_indices_from(gram)] += params.noise_sd**2
    return gram


def cholesky_with_jitter(gram: np.ndarray, amplitude: float) -> tuple[np.ndarray, int]:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Returns (L, level) where level 0 means no jitter was needed and level
    k used jitter 1e-8 * 10^(k-1) * amplitude^2. Raises
    :class:`FactorizationError` once the escalations are exhausted.
    """
    for level in range(_JITTER_LEVELS + 1):
        jitter = 0.0 if level == 0 else _JITTER_BASE * 10 ** (level - 1) * amplitude**2
        try:
            L = cholesky(
                gram + jitter * np.eye(gram.shape[0]), lower=True, check_finite=False
            )
            return L, level
        except np.linalg.LinAlgError:
            continue
        except ValueError:  # scipy raises ValueError for non-finite input
            break
    raise FactorizationError(
        f"gram matrix not positive definite after {_JITTER_LEVELS} jitter levels"
    )


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def log_marginal(series: DyadMonthSeries, params: KernelParams) -> float:
    """Zero-mean GP log marginal likelihood of the series under the kernel."""
    y = np.asarray(series.log_fatalities, dtype=float)
    if y.size == 0:
        raise ValueError("series is empty")
    gram = build_gram(series.months, params)
    L, _ = cholesky_with_jitter(gram, params.amplitude)
    alpha = cho_solve((L, True), y, check_finite=False)
    n = y.size
    return float(
        -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    )


def length_scale_log_prior(length_scale: float, prior: PriorSpec) -> float:
    """LogNormal length-scale prior, taken in its log-parameterization.

    Over z = ln l the density is Normal(log_median, log_sd); this form is
    maximized at the median and becomes flat (constant in l) as
    log_sd grows, which is the behavior the optimizer relies on.
    """
    if length_scale <= 0.0:
        return -math.inf
    z = (math.log(length_scale) - prior.log_median) / prior.log_sd
    return -math.log(prior.log_sd) - 0.5 * LOG_2PI - 0.5 * z * z


def halfnormal_logpdf(x: float, sd: float) -> float:
    if x < 0.0:
        return -math.inf
    return 0.5 * math.log(2.0 / math.pi) - math.log(sd) - 0.5 * (x / sd) ** 2


def log_prior(params: KernelParams, prior: PriorSpec) -> float:
    """LogNormal prior on the length scale, half-Normal on amplitude and noise."""
    return (
        length_scale_log_prior(params.length_scale, prior)
        + halfnormal_logpdf(params.amplitude, AMPLITUDE_NOISE_PRIOR_SD)
        + halfnormal_logpdf(params.noise_sd, AMPLITUDE_NOISE_PRIOR_SD)
    )


def log_posterior(series: DyadMonthSeries, params: KernelParams, prior: PriorSpec) -> float:
    return log_marginal(series, params) + log_prior(params, prior)


# ---------------------------------------------------------------------------
# MAP optimization (log-space ascent with finite-difference gradients)
# ---------------------------------------------------------------------------

FD_STEP = 1e-5


def finite_difference_gradient(func, z: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of func at z."""
    grad = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        grad[i] = (func(zp) - func(zm)) / (2.0 * step)
    return grad


def _ascend(func, z0: np.ndarray, max_iter: int = 200, grad_tol: float = 1e-6):
    """Backtracking gradient ascent; accepted steps strictly improve the objective.

    Returns (z, value, trace) where trace holds the objective after every
    accepted step, starting value included.
    """
    z = z0.copy()
    value = func(z)
    trace = [value]
    if not math.isfinite(value):
        return z, value, trace
    step = 0.5
    for _ in range(max_iter):
        grad = finite_difference_gradient(func, z)
        gnorm = float(np.linalg.norm(grad))
        if not math.isfinite(gnorm) or gnorm < grad_tol:
            break
        direction = grad / gnorm
        accepted = False
        trial = step
        while trial > 1e-10:
            z_new = np.clip(z + trial * direction, -_LOG_BOUND, _LOG_BOUND)
            v_new = func(z_new)
            if math.isfinite(v_new) and v_new > value:
                z, value = z_new, v_new
                trace.append(value)
                step = min(trial * 1.3, 2.0)
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            break
    return z, value, trace


def _default_init(series: DyadMonthSeries) -> KernelParams:
    y = np.asarray(series.log_fatalities, dtype=float)
    spread = float(np.std(y))
    eta = spread if spread > 1e-3 else 1.0
    sigma = max(0.5 * spread, 0.1)
    # data-scale length scale so the scaled starts probe the short-l basin
    ell = max(2.0, len(y) / 12.0)
    return KernelParams(length_scale=ell, amplitude=eta, noise_sd=sigma)


def fit_map(
    series: DyadMonthSeries,
    prior: PriorSpec,
    init: KernelParams | None = None,
    max_iter: int = 200,
    return_trace: bool = False,
):
    """MAP kernel hyperparameters by multi-start log-space gradient ascent.

    Three fixed starts: the init vector with its length scale replaced by
    the prior median, plus the init vector scaled by 0.5 and by 2. The
    length-scale posterior is often bimodal (smooth-trend vs noise
    readings), so the starts cover both the prior's basin and the
    data-scale one. With ``return_trace`` the winning start's
    accepted-objective trace is returned alongside the parameters.
    """
    if len(series.months) < 4:
        raise ValueError(f"series too short to fit: {len(series.months)} months")
    if init is None:
        init = _default_init(series)
    base = KernelParams(math.exp(prior.log_median), init.amplitude, init.noise_sd)

    def objective(z: np.ndarray) -> float:
        try:
            params = KernelParams(*np.exp(z))
            return log_posterior(series, params, prior)
        except (FactorizationError, ValueError, OverflowError):
            return -math.inf

    best: tuple[float, np.ndarray, list[float]] | None = None
    diagnostics: list[str] = []
    for start in (base, init.scaled(0.5), init.scaled(2.0)):
        z0 = np.log([start.length_scale, start.amplitude, start.noise_sd])
        z, value, trace = _ascend(objective, z0, max_iter=max_iter)
        if not math.isfinite(value):
            diagnostics.append(f"start {start} diverged (objective {value})")
            continue
        if best is None or value > best[0]:
            best = (value, z, trace)
    if best is None:
        raise FitError(f"all starts diverged for dyad {series.dyad_id}", diagnostics)
    params = KernelParams(*np.exp(best[1]))
    if return_trace:
        return params, best[2]
    return params


def fit_hierarchical(
    series_list: list[DyadMonthSeries],
    prior: PriorSpec,
    max_iter: int = 200,
) -> dict[str, KernelParams]:
    """Two-stage empirical pooling of the length scale within countries.

    Stage 1 fits one country length scale by maximizing the sum of the
    per-dyad log marginals (amplitude and noise free per dyad) plus the
    global LogNormal prior. Stage 2 refits each dyad with the prior
    re-centered at the country length scale and log-sd halved. Countries
    with a single dyad skip stage 1 and keep the global prior.
    """
    by_country: dict[str, list[DyadMonthSeries]] = {}
    for series in series_list:
        by_country.setdefault(series.country_id, []).append(series)

    results: dict[str, KernelParams] = {}
    for country in sorted(by_country):
        group = sorted(by_country[country], key=lambda s: s.dyad_id)
        if len(group) == 1:
            results[group[0].dyad_id] = fit_map(group[0], prior, max_iter=max_iter)
            continue
        ell_c = _fit_country_length_scale(group, prior, max_iter=max_iter)
        logger.info("country %s pooled length scale %.3f", country, ell_c)
        pooled = PriorSpec(log_median=math.log(ell_c), log_sd=prior.log_sd / 2.0)
        for series in group:
            results[series.dyad_id] = fit_map(series, pooled, max_iter=max_iter)
    return results


def _fit_country_length_scale(
    group: list[DyadMonthSeries], prior: PriorSpec, max_iter: int = 200
) -> float:
    """Stage-1 shared length scale: joint ascent over (ln l_c, ln eta_d, ln sigma_d)."""
    inits = [_default_init(series) for series in group]

    def objective(z: np.ndarray) -> float:
        try:
            ell = math.exp(z[0])
            total = length_scale_log_prior(ell, prior)
            for i, series in enumerate(group):
                params = KernelParams(ell, math.exp(z[1 + 2 * i]), math.exp(z[2 + 2 * i]))
                total += log_marginal(series, params)
            return total
        except (FactorizationError, ValueError, OverflowError):
            return -math.inf

    data_ell = float(np.mean([init.length_scale for init in inits]))
    best: tuple[float, float] | None = None
    for ell0, factor in (
        (math.exp(prior.log_median), 1.0),
        (0.5 * data_ell, 0.5),
        (2.0 * data_ell, 2.0),
    ):
        z0 = [math.log(ell0)]
        for init in inits:
            z0.extend([math.log(init.amplitude * factor), math.log(init.noise_sd * factor)])
        z, value, _ = _ascend(objective, np.array(z0), max_iter=max_iter)
        if math.isfinite(value) and (best is None or value > best[0]):
            best = (value, math.exp(z[0]))
    if best is None:
        raise FitError("country-level length-scale fit diverged on all starts")
    return best[1]


# ---------------------------------------------------------------------------
# Posterior mean and derivative
# ---------------------------------------------------------------------------

def posterior_mean(
    series: DyadMonthSeries, params: KernelParams, grid: np.ndarray
) -> np.ndarray:
    """GP predictive mean on the grid: K(grid, X) (K(X,X) + sigma^2 I)^-1 y."""
    x = np.asarray(series.months, dtype=float)
    y = np.asarray(series.log_fatalities, dtype=float)
    g = np.asarray(grid, dtype=float)
    gram = build_gram(series.months, params)
    L, _ = cholesky_with_jitter(gram, params.amplitude)
    alpha = cho_solve((L, True), y, check_finite=False)
    k_star = matern32(np.abs(g[:, None] - x[None, :]), params.length_scale, params.amplitude)
    return k_star @ alpha


def derivative(mean: np.ndarray) -> np.ndarray:
    """Numerical first derivative on a unit monthly grid.

    Central differences inside, one-sided at the two endpoints; units are
    log-fatalities per month.
    """
    m = np.asarray(mean, dtype=float)
    if m.size < 2:
        raise ValueError("derivative needs at least 2 points")
    out = np.empty_like(m)
    out[1:-1] = (m[2:] - m[:-2]) / 2.0
    out[0] = m[1] - m[0]
    out[-1] = m[-1] - m[-2]
    return out


def fit_trend(
    series: DyadMonthSeries,
    prior: PriorSpec,
    params: KernelParams | None = None,
    max_iter: int = 200,
) -> TrendFit:
    """Fit (or reuse) MAP hyperparameters and evaluate mean + derivative."""
    if params is None:
        params = fit_map(series, prior, max_iter=max_iter)
    mean = posterior_mean(series, params, series.months)
    return TrendFit(
        dyad_id=series.dyad_id,
        params=params,
        grid=np.asarray(series.months, dtype=int),
        mean=mean,
        derivative=derivative(mean),
        log_posterior_at_map=log_posterior(series, params, prior),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_trend_fit(fit: TrendFit, path: str | Path) -> None:
    payload = {
        "dyad_id": fit.dyad_id,
        "length_scale": fit.params.length_scale,
        "amplitude": fit.params.amplitude,
        "noise_sd": fit.params.noise_sd,
        "grid": [months.format_month(int(m)) for m in fit.grid],
        "mean": [float(v) for v in fit.mean],
        "derivative": [float(v) for v in fit.derivative],
        "log_posterior": fit.log_posterior_at_map,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_trend_fit(path: str | Path) -> TrendFit:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return TrendFit(
        dyad_id=payload["dyad_id"],
        params=KernelParams(
            payload["length_scale"], payload["amplitude"], payload["noise_sd"]
        ),
        grid=np.array([months.parse_month(m) for m in payload["grid"]], dtype=int),
        mean=np.array(payload["mean"], dtype=float),
        derivative=np.array(payload["derivative"], dtype=float),
        log_posterior_at_map=float(payload["log_posterior"]),
    )
