"""ARIMA baselines: conditional-sum-of-squares fitting, ADF-guided order
selection, and forecasts with psi-weight prediction intervals."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .errors import ConvergenceError, DataError, DegenerateInputError

logger = logging.getLogger(__name__)

ADF_CRITICAL_5PCT = -2.86  # constant, no trend
MAX_SIMPLEX_ITER = 2000
Z95 = 1.96
MA_RADIUS = 0.98
_SIGMA2_FLOOR = 1e-12


def difference(y, d: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if d not in (0, 1, 2):
        raise DataError("d must be 0, 1 or 2")
    if y.size <= d:
        raise DataError(f"series of length {y.size} too short to difference {d} times")
    return np.diff(y, n=d) if d else y.copy()


def undifference(w, heads) -> np.ndarray:
    """Inverse of :func:`difference`: ``heads[k]`` is the first value of the
    k-times differenced series, for k < d."""
    out = np.asarray(w, dtype=float)
    for h in reversed(heads):
        out = np.concatenate([[h], h + np.cumsum(out)])
    return out


def difference_heads(y, d: int) -> list[float]:
    y = np.asarray(y, dtype=float)
    return [float(np.diff(y, n=k)[0]) for k in range(d)]


# ---- ADF ---------------------------------------------------------------------


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    reject: bool
    lag: int
    nobs: int


def _adf_design(y: np.ndarray, dy: np.ndarray, k: int, start: int):
    # rows for t = start..n-1: dy_t on [1, y_{t-1}, dy_{t-1}, ..., dy_{t-k}]
    n = y.size
    t = np.arange(start, n)
    cols = [np.ones(t.size), y[t - 1]]
    cols += [dy[t - 1 - i] for i in range(1, k + 1)]
    return np.column_stack(cols), dy[t - 1]


def adf_test(y, max_lag: int | None = None) -> AdfResult:
    """Augmented Dickey-Fuller test with a constant and no trend.

    The augmentation lag is picked by AIC over 0..max_lag on a common sample,
    then the regression is refit on the longest sample for that lag. The
    unit root is rejected at 5% when the statistic is below -2.86.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if max_lag is None:
        max_lag = max(0, min(int(12 * (n / 100.0) ** 0.25), n - 20))
    if max_lag < 0 or n < 20 + max_lag:
        raise DataError(f"ADF needs at least {20 + max(max_lag, 0)} observations, got {n}")
    if np.ptp(y) == 0:
        raise DegenerateInputError("ADF undefined for a constant series")
    dy = np.diff(y)
    best = None
    for k in range(max_lag + 1):
        X, target = _adf_design(y, dy, k, max_lag + 1)
        beta, *_ = np.linalg.lstsq(X, target, rcond=None)
        ssr = float(np.sum((target - X @ beta) ** 2))
        nobs = target.size
        aic = nobs * math.log(max(ssr, 1e-300) / nobs) + 2 * (k + 2)
        if best is None or aic < best[0]:
            best = (aic, k)
    k = best[1]
    X, target = _adf_design(y, dy, k, k + 1)
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ beta
    dof = target.size - X.shape[1]
    s2 = float(resid @ resid) / dof
    xtx_inv = np.linalg.pinv(X.T @ X)
    se = math.sqrt(max(s2 * xtx_inv[1, 1], 0.0))
    gamma = float(beta[1])
    if se == 0.0:
        stat = 0.0 if gamma == 0.0 else math.copysign(math.inf, gamma)
    else:
        stat = gamma / se
    return AdfResult(stat, stat < ADF_CRITICAL_5PCT, k, target.size)


# ---- CSS fitting -------------------------------------------------------------


@dataclass(frozen=True)
class ArimaModel:
    order: tuple[int, int, int]
    ar: tuple[float, ...]
    ma: tuple[float, ...]
    intercept: float
    sigma2: float
    aic: float
    sse: float
    n_eff: int
    nobs: int

    @property
    def p(self):
        return self.order[0]

    @property
    def d(self):
        return self.order[1]

    @property
    def q(self):
        return self.order[2]


def aic_css(sse: float, n_eff: int, p: int, q: int) -> float:
    return n_eff * math.log(max(sse / n_eff, _SIGMA2_FLOOR)) + 2 * (p + q + 1)


def css_residuals(w, intercept: float, ar, ma) -> np.ndarray:
    """Residuals for t = p..n-1 with pre-sample innovations set to zero."""
    w = np.asarray(w, dtype=float)
    p, n = len(ar), w.size
    u = w[p:] - intercept
    for i, phi in enumerate(ar, start=1):
        u = u - phi * w[p - i: n - i]
    if len(ma):
        return lfilter([1.0], np.concatenate([[1.0], ma]), u)
    return u


def _stable(coefs, radius: float = 1.0 - 1e-8) -> bool:
    """True when 1 - sum c_i z^i has every root outside the circle of
    radius 1/radius (companion eigenvalues inside ``radius``).

    Schur-Cohn step-down on the rescaled polynomial: stable iff every
    reflection coefficient has modulus below 1.
    """
    a = [-float(v) / radius ** (i + 1) for i, v in enumerate(np.asarray(coefs, dtype=float).ravel())]
    for m in range(len(a), 0, -1):
        k = a[m - 1]
        if not abs(k) < 1.0:
            return False
        den = 1.0 - k * k
        a = [(a[i] - k * a[m - 2 - i]) / den for i in range(m - 1)]
    return True


def _invertible(theta) -> bool:
    # CSS with zero pre-sample innovations drifts to MA roots on the unit
    # circle (spurious over-differencing fits); keep a margin.
    return _stable(-np.asarray(theta), MA_RADIUS)


def _ls_start(w: np.ndarray, p: int, intercept: bool):
    n = w.size
    cols = [w[p - i: n - i] for i in range(1, p + 1)]
    if intercept:
        cols.insert(0, np.ones(n - p))
    if not cols:
        return 0.0, np.zeros(0), True
    X = np.column_stack(cols)
    beta, *_ = np.linalg.lstsq(X, w[p:], rcond=None)
    c = float(beta[0]) if intercept else 0.0
    phi = beta[1:] if intercept else beta
    exact = _stable(phi)
    shrink = 0
    while not _stable(phi) and shrink < 50:
        phi = phi * 0.9
        shrink += 1
    return c, np.asarray(phi, dtype=float), exact


def fit_arima(y, p: int, d: int, q: int, include_intercept: bool | None = None) -> ArimaModel:
    """Conditional-sum-of-squares ARIMA(p, d, q).

    The intercept is estimated only for d == 0 unless ``include_intercept``
    says otherwise. SSE is minimized with Nelder-Mead starting from the
    least-squares AR fit; non-stationary or non-invertible candidates are
    penalized out of the search.
    """
    if p < 0 or q < 0:
        raise DataError("p and q must be non-negative")
    w = difference(y, d)
    if w.size < 10 + p + q:
        raise DataError(f"need {10 + p + q} observations after differencing, have {w.size}")
    if include_intercept is None:
        include_intercept = d == 0
    c0, phi0, ls_exact = _ls_start(w, p, include_intercept)
    theta0 = np.zeros(q)
    x0 = np.concatenate([[c0] if include_intercept else [], phi0, theta0])

    def unpack(x):
        c = x[0] if include_intercept else 0.0
        off = 1 if include_intercept else 0
        return c, x[off: off + p], x[off + p:]

    def sse(x):
        c, phi, theta = unpack(x)
        e = css_residuals(w, c, phi, theta)
        return float(e @ e)

    base = sse(x0) if x0.size else sse(np.zeros(0))
    scale = base if base > 0 else 1.0

    def objective(x):
        c, phi, theta = unpack(x)
        if not (_stable(phi) and _invertible(theta)):
            return 1e12
        v = sse(x) / scale
        return v if math.isfinite(v) else 1e12

    x_best, f_best = x0, base
    # with q == 0 the stable least-squares AR fit already minimizes the CSS
    if x0.size and not (q == 0 and ls_exact):
        step = np.where(np.abs(x0) > 1e-3, 0.05 * np.abs(x0), 0.05)
        if include_intercept:
            step[0] = max(abs(c0) * 0.05, math.sqrt(scale / w.size) * 0.1, 1e-3)
        simplex = np.vstack([x0, x0 + np.diag(step)])
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={"maxiter": MAX_SIMPLEX_ITER, "xatol": 1e-7, "fatol": 1e-12, "initial_simplex": simplex},
        )
        if res.status == 2:
            raise ConvergenceError(f"ARIMA({p},{d},{q}) simplex hit {MAX_SIMPLEX_ITER} iterations")
        if res.fun * scale < f_best and res.fun < 1e12:
            x_best, f_best = res.x, res.fun * scale
        if not (_stable(unpack(x_best)[1]) and _invertible(unpack(x_best)[2])):
            raise ConvergenceError(f"ARIMA({p},{d},{q}): no stationary/invertible optimum")
    c, phi, theta = unpack(x_best)
    n_eff = w.size - p
    sigma2 = max(f_best / n_eff, _SIGMA2_FLOOR)
    return ArimaModel(
        order=(p, d, q),
        ar=tuple(float(v) for v in phi),
        ma=tuple(float(v) for v in theta),
        intercept=float(c),
        sigma2=sigma2,
        aic=aic_css(f_best, n_eff, p, q),
        sse=f_best,
        n_eff=n_eff,
        nobs=int(np.asarray(y).size),
    )


def choose_d(y, max_lag: int | None = None) -> int:
    """Smallest d in {0, 1, 2} whose differenced series rejects a unit root;
    2 when none does. Constant series count as stationary."""
    for d in (0, 1, 2):
        w = difference(y, d)
        try:
            if adf_test(w, max_lag).reject:
                return d
        except DegenerateInputError:
            return d
        except DataError:
            break  # too short to test
    return 2


def select_by_aic(models):
    """Lowest AIC; ties go to smaller p + q, then smaller p."""
    return min(models, key=lambda m: (m.aic, m.p + m.q, m.p))


def select_arima(y, max_p: int = 3, max_q: int = 3, max_lag: int | None = None) -> ArimaModel:
    d = choose_d(y, max_lag)
    fits = []
    for p in range(max_p + 1):
        for q in range(max_q + 1):
            try:
                fits.append(fit_arima(y, p, d, q))
            except (DataError, ConvergenceError) as exc:
                logger.debug("ARIMA(%d,%d,%d) skipped: %s", p, d, q, exc)
    if not fits:
        raise DataError("no ARIMA grid cell could be fitted")
    return select_by_aic(fits)


# ---- forecasting --------------------------------------------------------------


@dataclass(frozen=True)
class ArimaForecast:
    point: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def psi_weights(model: ArimaModel, h: int) -> np.ndarray:
    """MA(inf) weights of the integrated model, psi_0 = 1."""
    ar_poly = np.concatenate([[1.0], -np.asarray(model.ar)])
    for _ in range(model.d):
        ar_poly = np.convolve(ar_poly, [1.0, -1.0])
    phi_star = -ar_poly[1:]
    theta = np.asarray(model.ma)
    psi = np.zeros(h)
    if h:
        psi[0] = 1.0
    for j in range(1, h):
        v = theta[j - 1] if j <= theta.size else 0.0
        for i in range(1, min(j, phi_star.size) + 1):
            v += phi_star[i - 1] * psi[j - i]
        psi[j] = v
    return psi


def arima_forecast(model: ArimaModel, y, h: int, clamp: bool = True) -> ArimaForecast:
    """h-step point forecasts with 95% intervals; counts clamp at 0 when ``clamp``."""
    if h <= 0:
        raise DataError("forecast horizon must be positive")
    y = np.asarray(y, dtype=float)
    p, d, q = model.order
    w = difference(y, d)
    e = np.zeros(w.size)
    e[p:] = css_residuals(w, model.intercept, model.ar, model.ma)
    wx = list(w)
    ex = list(e)
    for _ in range(h):
        v = model.intercept
        for i, phi in enumerate(model.ar, start=1):
            v += phi * wx[-i]
        for j, th in enumerate(model.ma, start=1):
            v += th * ex[-j]
        wx.append(v)
        ex.append(0.0)
    f = np.asarray(wx[w.size:])
    for k in reversed(range(d)):
        last = np.diff(y, n=k)[-1] if k else y[-1]
        f = last + np.cumsum(f)
    psi = psi_weights(model, h)
    half = Z95 * np.sqrt(model.sigma2 * np.cumsum(psi**2))
    lo, hi = f - half, f + half
    if clamp:
        f, lo, hi = np.maximum(f, 0.0), np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return ArimaForecast(f, lo, hi)


def model_row(model: ArimaModel) -> dict:
    return {
        "p": model.p,
        "d": model.d,
        "q": model.q,
        "intercept": repr(model.intercept),
        "ar": ";".join(repr(v) for v in model.ar),
        "ma": ";".join(repr(v) for v in model.ma),
        "sigma2": repr(model.sigma2),
        "aic": repr(model.aic),
    }
