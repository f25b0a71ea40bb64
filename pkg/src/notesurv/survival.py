"""Survival losses, Cox regression, Breslow baseline hazard and curves.

Risk sets are ``{j : T_j >= T_i}``.  Tied event times share one risk set
(Breslow handling).  Discharged patients are right-censored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import ENDOGENOUS, EXOGENOUS, DataError, FeatureSchema, SurvivalDataset

PROB_CLIP = 1e-12


class ConvergenceError(RuntimeError):
    """Newton iterations stopped without converging; ``beta`` is the last iterate."""

    def __init__(self, message, beta):
        super().__init__(message)
        self.beta = beta


class SeparationError(ConvergenceError):
    pass


def _maybe_item(out: Tensor, *inputs):
    return out if any(isinstance(x, Tensor) for x in inputs) else out.item()


# -- losses ------------------------------------------------------------------

def bce_loss(probs, labels):
    """Mean binary cross-entropy, probabilities clipped to [1e-12, 1 - 1e-12].

    Returns a Tensor when ``probs`` is one, otherwise a float.
    """
    p = ad.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if p.data.size == 0:
        raise ValueError("bce_loss of an empty batch")
    if p.shape != y.shape:
        raise ad.ShapeError(f"bce_loss: probs {p.shape} vs labels {y.shape}")
    pc = ad.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = y * ad.log(pc) + (1.0 - y) * ad.log(1.0 - pc)
    return _maybe_item(-ad.mean(ll), probs)


def _risk_index(times):
    """Ascending order and, per subject, where its risk set starts/ends in it."""
    order = np.argsort(times, kind="stable")
    ts = times[order]
    first = np.searchsorted(ts, times, side="left")
    last = np.searchsorted(ts, times, side="right") - 1
    return order, first, last


def _suffix_logsumexp(h, order):
    """log sum_{j: T_j >= T_(k)} exp(h_j) for each position k of ``order``.

    Each risk set gets its own running maximum, so a large risk outside a
    risk set cannot underflow it.
    """
    return np.logaddexp.accumulate(h[order][::-1])[::-1]


def pll_loss(risks, times, events):
    """Average negative log partial likelihood over observed events.

    -(1/N_events) * sum_{i: event} [h_i - log sum_{j: T_j >= T_i} exp(h_j)],
    evaluated with a max shift.  Differentiable when ``risks`` is a Tensor.
    """
    h = ad.as_tensor(risks)
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events, dtype=np.float64)
    if not (h.shape == t.shape == d.shape) or h.data.ndim != 1:
        raise ad.ShapeError(f"pll_loss: mismatched shapes {h.shape}, {t.shape}, {d.shape}")
    n_events = d.sum()
    if n_events == 0:
        raise ValueError("PLL undefined without observed events")

    order, first, last = _risk_index(t)
    log_denom = _suffix_logsumexp(h.data, order)[first]
    value = -np.sum(d * (h.data - log_denom)) / n_events

    def vjp(g):
        # d/dh_k: events i with T_i <= T_k include k in their risk set;
        # share_k = sum_i d_i exp(h_k - L_i), accumulated in log space
        log_w = np.where(d > 0, -log_denom, -np.inf)[order]
        log_inv = np.logaddexp.accumulate(log_w)
        share = np.exp(h.data + log_inv[last])
        return (g * -(d - share) / n_events,)

    out = Tensor(value, parents=(h,), vjp=vjp, op="pll")
    return _maybe_item(out, risks)


# -- Cox ---------------------------------------------------------------------

@dataclass(frozen=True)
class CoxParams:
    beta: np.ndarray
    schema: FeatureSchema | None = None
    log_likelihood: float = float("nan")
    iterations: int = 0

    @property
    def tau(self) -> np.ndarray:
        return self.beta[self.schema.mask(ENDOGENOUS)] if self.schema else self.beta

    @property
    def gamma(self) -> np.ndarray:
        return self.beta[self.schema.mask(EXOGENOUS)] if self.schema else self.beta[:0]

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.beta


def cox_loglik(beta, X, times, events, ridge: float = 0.0, derivatives: bool = True):
    """Log partial likelihood (sum over events) minus ridge*|beta|^2/2.

    With ``derivatives`` also returns the gradient and Hessian.
    """
    X = np.asarray(X, dtype=np.float64)
    eta = X @ beta
    d = np.asarray(events, dtype=np.float64)
    order, first, _ = _risk_index(np.asarray(times, dtype=np.float64))
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    s0 = np.cumsum(w[order][::-1])[::-1][first]
    ev = d > 0
    ll = np.sum(eta[ev] - shift - np.log(s0[ev])) - 0.5 * ridge * beta @ beta
    if not derivatives:
        return ll
    wx = w[:, None] * X
    s1 = np.cumsum(wx[order][::-1], axis=0)[::-1][first]
    xbar = s1[ev] / s0[ev, None]
    grad = np.sum(X[ev] - xbar, axis=0) - ridge * beta
    wxx = wx[:, :, None] * X[:, None, :]
    s2 = np.cumsum(wxx[order][::-1], axis=0)[::-1][first][ev]
    info = np.sum(s2 / s0[ev, None, None], axis=0) - xbar.T @ xbar
    hess = -info - ridge * np.eye(X.shape[1])
    return ll, grad, hess


def fit_cox_arrays(X, times, events, ridge: float = 0.0, max_iter: int = 100,
                   tol: float = 1e-9, separation_bound: float = 30.0,
                   beta0=None) -> CoxParams:
    """Newton-Raphson with step halving on the Cox log partial likelihood."""
    X = np.asarray(X, dtype=np.float64)
    events = np.asarray(events)
    if not np.any(events == 1):
        raise DataError("Cox fitting needs at least one observed event")
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=np.float64)
    ll, grad, hess = cox_loglik(beta, X, times, events, ridge)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        # judged on the Newton step, not the gradient: under separation both
        # gradient and curvature vanish while the step stays O(1)
        if np.max(np.abs(step), initial=0.0) < tol:
            return CoxParams(beta, None, ll, it - 1)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new = cox_loglik(cand, X, times, events, ridge, derivatives=False)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise ConvergenceError("step halving failed to improve the partial likelihood", beta)
        beta = cand
        ll, grad, hess = cox_loglik(beta, X, times, events, ridge)
        if np.max(np.abs(beta), initial=0.0) > separation_bound:
            raise SeparationError(
                f"coefficients diverge (|beta| > {separation_bound}) while the likelihood "
                "keeps increasing: the data look separated; refit with ridge > 0", beta)
        if np.max(np.abs(t * step), initial=0.0) < tol:
            return CoxParams(beta, None, ll, it)
    raise ConvergenceError(f"no convergence in {max_iter} Newton iterations", beta)


def fit_cox(dataset: SurvivalDataset, ridge: float = 0.0, max_iter: int = 100,
            tol: float = 1e-9, **kwargs) -> CoxParams:
    dataset.require_events()
    fit = fit_cox_arrays(dataset.X, dataset.times, dataset.events, ridge, max_iter, tol,
                         **kwargs)
    return CoxParams(fit.beta, dataset.schema, fit.log_likelihood, fit.iterations)


# -- Breslow and curves ------------------------------------------------------

@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step function H0 over sorted distinct event times."""

    times: np.ndarray
    cumulative: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        k = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative])
        return padded[k]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumulative, prepend=0.0)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "cumulative": self.cumulative.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BaselineHazard":
        return cls(np.array(d["times"], dtype=np.float64),
                   np.array(d["cumulative"], dtype=np.float64))


def breslow(times, events, risks) -> BaselineHazard:
    """H0(t) = sum_{i: T_i <= t, event} 1 / sum_{j: T_j >= T_i} exp(h_j)."""
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events)
    h = np.asarray(risks, dtype=np.float64)
    if not np.any(d == 1):
        raise DataError("Breslow estimator needs at least one observed event")
    order, first, _ = _risk_index(t)
    log_s0 = _suffix_logsumexp(h, order)[first]
    event_times = np.unique(t[d == 1])
    inc = np.zeros(event_times.size)
    k = np.searchsorted(event_times, t[d == 1])
    np.add.at(inc, k, np.exp(-log_s0[d == 1]))
    return BaselineHazard(event_times, np.cumsum(inc))


@dataclass(frozen=True)
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    mortality: np.ndarray
    cum_hazard: np.ndarray


def survival_curve(base: BaselineHazard, risk: float, grid=None) -> SurvivalCurve:
    """H(t) = H0(t) exp(risk), S = exp(-H), F = 1 - S.

    The default grid is 0 followed by the baseline's event times.
    """
    grid = (np.concatenate([[0.0], base.times]) if grid is None
            else np.asarray(grid, dtype=np.float64))
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted and nonnegative")
    H = base(grid) * np.exp(risk)
    S = np.exp(-H)
    return SurvivalCurve(grid, S, 1.0 - S, H)


def likelihood_at(time: float, event: int, base: BaselineHazard, risk: float) -> float:
    """h(T)^event * S(T) with h piecewise constant between event times."""
    scale = np.exp(risk)
    S = float(np.exp(-base(time) * scale))
    if not event:
        return S
    k = int(np.searchsorted(base.times, time, side="left"))
    if k >= base.times.size:
        raise ValueError(f"time {time} lies beyond the last event time {base.times[-1]}")
    start = base.times[k - 1] if k > 0 else 0.0
    hazard = base.increments[k] * scale / (base.times[k] - start)
    return float(hazard * S)


def likelihood(record, model) -> float:
    """Diagnostic likelihood of one record under a fitted model.

    ``model`` needs a ``baseline`` and a ``log_risk(record)`` method.
    """
    return likelihood_at(record.event_time, record.event, model.baseline,
                         float(model.log_risk(record)))


@dataclass(frozen=True)
class CoxModel:
    """Cox coefficients plus their Breslow baseline."""

    params: CoxParams
    baseline: BaselineHazard

    @classmethod
    def fit(cls, dataset: SurvivalDataset, ridge: float = 0.0, **kwargs) -> "CoxModel":
        params = fit_cox(dataset, ridge=ridge, **kwargs)
        eta = params.linear_predictor(dataset.X)
        return cls(params, breslow(dataset.times, dataset.events, eta))

    def log_risk(self, record_or_X):
        X = getattr(record_or_X, "measurements", record_or_X)
        return self.params.linear_predictor(X)

    def predict(self, dataset: SurvivalDataset) -> np.ndarray:
        return self.params.linear_predictor(dataset.X)


def write_curves(path, rows: Iterable[tuple[str, SurvivalCurve]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time", "survival", "mortality", "cum_hazard"])
        for pid, curve in rows:
            for t, s, f, h in zip(curve.times, curve.survival, curve.mortality,
                                  curve.cum_hazard):
                w.writerow([pid, repr(float(t)), repr(float(s)), repr(float(f)),
                            repr(float(h))])
