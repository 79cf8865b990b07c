"""Saturation and lifetime analysis of a single emitter.

The saturation model with a shelving roll-off and a linear background term is

    R(P) = R_inf * P / (P + P_sat + c_sh * P**2 / P_sh) + c_bg * P

Only the ratio ``c_sh / P_sh`` enters the curve, so the fitter estimates that
ratio and reports ``c_sh`` for a fixed reference ``P_sh`` (500 uW unless told
otherwise).
"""
from dataclasses import dataclass, field, asdict
import logging

import numpy as np
from scipy.optimize import nnls

from . import lm
from .errors import DegenerateDataError, InvalidInputError
from .stream import TRIGGER_CHANNEL

_logger = logging.getLogger(__name__)

DEFAULT_P_SH_UW = 500.0
SATURATION_FIELDS = ("r_inf_cps", "p_sat_uw", "c_sh", "p_sh_uw", "c_bg_cps_per_uw")


@dataclass(frozen=True)
class SaturationParams:
    r_inf_cps: float
    p_sat_uw: float
    c_sh: float = 0.0
    p_sh_uw: float = DEFAULT_P_SH_UW
    c_bg_cps_per_uw: float = 0.0

    def __post_init__(self):
        if not (self.r_inf_cps > 0 and self.p_sat_uw > 0 and self.p_sh_uw > 0):
            raise InvalidInputError("r_inf, p_sat and p_sh must be positive")
        if self.c_sh < 0 or self.c_bg_cps_per_uw < 0:
            raise InvalidInputError("c_sh and c_bg must be non-negative")

    def as_array(self):
        return np.array([getattr(self, f) for f in SATURATION_FIELDS])


@dataclass(frozen=True)
class SaturationCurve:
    power_uw: np.ndarray
    rate_cps: np.ndarray
    rate_err_cps: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.power_uw, dtype=float)
        r = np.asarray(self.rate_cps, dtype=float)
        e = np.asarray(self.rate_err_cps, dtype=float)
        if not (p.shape == r.shape == e.shape) or p.ndim != 1:
            raise InvalidInputError("power, rate and error arrays must match")
        if p.size < 6:
            raise InvalidInputError("a saturation curve needs at least 6 points")
        if np.any(p <= 0) or np.any(np.diff(p) <= 0):
            raise InvalidInputError("powers must be positive and strictly increasing")
        if np.any(r < 0) or np.any(e <= 0):
            raise InvalidInputError("rates must be >= 0 and errors > 0")
        for name, arr in (("power_uw", p), ("rate_cps", r), ("rate_err_cps", e)):
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SaturationFit:
    params: SaturationParams
    stderr: dict
    residual_rms: float
    chi2: float
    shelving_ratio: float
    cost: float
    initial_cost: float
    notes: str = ("c_sh and P_sh enter only as c_sh/P_sh; P_sh is held fixed and "
                  "c_sh reported relative to it")

    def to_dict(self):
        return {
            "params": asdict(self.params),
            "stderr": dict(self.stderr),
            "shelving_ratio_per_uw": self.shelving_ratio,
            "residual_rms_cps": self.residual_rms,
            "chi2": self.chi2,
            "notes": self.notes,
        }


def eval_saturation(params, power_uw):
    """Count rate predicted by the saturation model (total, including background)."""
    P = np.asarray(power_uw, dtype=float)
    if np.any(P < 0):
        raise InvalidInputError("power must be non-negative")
    out = signal_rate(params, P) + params.c_bg_cps_per_uw * P
    return float(out) if out.ndim == 0 else out


def signal_rate(params, power_uw):
    """Emitter term of the model, without the linear background."""
    P = np.asarray(power_uw, dtype=float)
    denom = P + params.p_sat_uw + params.c_sh * P * P / params.p_sh_uw
    return params.r_inf_cps * np.divide(P, denom, out=np.zeros_like(P), where=denom > 0)


def saturation_jacobian(params, power_uw):
    """Analytic derivatives of R(P) w.r.t. (R_inf, P_sat, c_sh, P_sh, c_bg)."""
    P = np.asarray(power_uw, dtype=float)
    R, Ps, c, Psh, _ = params.as_array()
    D = P + Ps + c * P * P / Psh
    J = np.empty((P.size, 5))
    J[:, 0] = P / D
    J[:, 1] = -R * P / D ** 2
    J[:, 2] = -R * P / D ** 2 * (P * P / Psh)
    J[:, 3] = R * P / D ** 2 * (c * P * P / Psh ** 2)
    J[:, 4] = P
    return J


def _grid_init(P, y, wt):
    """Grid starts for the saturation fit.

    Scans a log grid of (P_sat, k) with R_inf and c_bg solved linearly and
    returns the best ``(R_inf, P_sat, k, c_bg)`` in each of four families:
    with or without the shelving term, with or without background. Keeping a
    start with k > 0 matters because the squared parameterisation cannot
    leave k = 0 on its own.
    """
    pmin, pmax = P[0], P[-1]
    psat_grid = np.geomspace(pmin / 30.0, pmax * 30.0, 48)
    k_grid = np.concatenate([[0.0], np.geomspace(1e-4 / pmax, 30.0 / pmin, 40)])
    best = {}
    for ps in psat_grid:
        for k in k_grid:
            f = P / (P + ps + k * P * P)
            for use_bg in (False, True):
                X = np.column_stack([f, P])[:, :2 if use_bg else 1] * wt[:, None]
                coef, *_ = np.linalg.lstsq(X, y * wt, rcond=None)
                if coef[0] <= 0 or (use_bg and coef[1] < 0):
                    continue
                r = X @ coef - y * wt
                cost = float(r @ r)
                family = (k > 0, use_bg)
                if family not in best or cost < best[family][0]:
                    best[family] = (cost, coef[0], ps, k, coef[1] if use_bg else 0.0)
    if not best:
        raise DegenerateDataError("no positive saturation amplitude fits the data")
    return [b[1:] for b in sorted(best.values())]


def fit_saturation(curve, p_sh_uw=DEFAULT_P_SH_UW):
    """Weighted damped least-squares fit of the saturation model.

    Weights are ``1 / rate_err**2``. R_inf and P_sat are fitted in log space;
    the shelving ratio ``c_sh / P_sh`` and ``c_bg`` are fitted as squares so
    they can reach zero. Standard errors come from the local quadratic model.
    """
    P, y, e = curve.power_uw, curve.rate_cps, curve.rate_err_cps
    if P[-1] / P[0] < 10:
        raise InvalidInputError("powers must span at least a factor of 10")
    if np.ptp(y) == 0:
        raise DegenerateDataError("all rates are equal")
    wt = 1.0 / e
    inits = _grid_init(P, y, wt)

    def unpack(x):
        return np.exp(x[0]), np.exp(x[1]), x[2] ** 2, x[3] ** 2

    def residual(x):
        R, Ps, k, bg = unpack(x)
        model = R * P / (P + Ps + k * P * P) + bg * P
        return (model - y) * wt

    def jac(x):
        R, Ps, k, bg = unpack(x)
        D = P + Ps + k * P * P
        J = np.empty((P.size, 4))
        J[:, 0] = R * P / D
        J[:, 1] = -R * P / D ** 2 * Ps
        J[:, 2] = -R * P / D ** 2 * P * P * 2 * x[2]
        J[:, 3] = P * 2 * x[3]
        return J * wt[:, None]

    def linear_part(ps, k):
        f = P / (P + ps + k * P * P)
        X = np.column_stack([f, P]) * wt[:, None]
        coef, _ = nnls(X, y * wt)
        return coef, X

    def reduced(z):
        # R_inf and c_bg are linear: project them out and fit (P_sat, k) only
        coef, X = linear_part(np.exp(np.clip(z[0], -700, 700)), z[1] ** 2)
        return X @ coef - y * wt

    full_x0 = np.array([np.log(inits[0][0]), np.log(inits[0][1]), np.sqrt(inits[0][2]),
                        np.sqrt(inits[0][3])])
    initial_cost = float(np.sum(residual(full_x0) ** 2))
    best_z = None
    for _, ps0, k0, _ in inits:
        for z0 in ([np.log(ps0), np.sqrt(k0)], [np.log(ps0), np.sqrt(k0 + 1e-3 / P[-1])]):
            res = lm.levenberg_marquardt(reduced, z0, raise_on_failure=False)
            if best_z is None or res.cost < best_z.cost:
                best_z = res
    coef, _ = linear_part(np.exp(best_z.x[0]), best_z.x[1] ** 2)
    if coef[0] <= 0:
        raise DegenerateDataError("no positive saturation amplitude fits the data")
    x0 = np.array([np.log(coef[0]), best_z.x[0], best_z.x[1], np.sqrt(coef[1])])
    # polish all four together; also gives the Jacobian for the standard errors
    best = lm.levenberg_marquardt(residual, x0, jac)
    best.initial_cost = initial_cost

    R, Ps, k, bg = unpack(best.x)
    # stderr in natural units: chain rule through the reparameterisation
    Jn = jac(best.x) / np.array([R, Ps, 2 * best.x[2] or 1.0, 2 * best.x[3] or 1.0])
    cov = lm.covariance(Jn)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    params = SaturationParams(R, Ps, k * p_sh_uw, p_sh_uw, bg)
    resid_cps = best.residual / wt
    return SaturationFit(
        params=params,
        stderr={"r_inf_cps": se[0], "p_sat_uw": se[1], "c_sh": se[2] * p_sh_uw,
                "p_sh_uw": 0.0, "c_bg_cps_per_uw": se[3]},
        residual_rms=float(np.sqrt(np.mean(resid_cps ** 2))),
        chi2=best.cost,
        shelving_ratio=k,
        cost=best.cost,
        initial_cost=best.initial_cost,
    )


@dataclass(frozen=True, eq=False)
class DecayHistogram:
    bin_width_ps: int
    counts: np.ndarray
    t0_ps: int = 0
    n_discarded: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size < 16:
            raise InvalidInputError("a decay histogram needs at least 16 bins")
        if int(self.bin_width_ps) < 1:
            raise InvalidInputError("bin_width_ps must be >= 1")
        if np.any(c < 0):
            raise InvalidInputError("counts must be non-negative")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "bin_width_ps", int(self.bin_width_ps))

    @property
    def times_ps(self):
        """Left edge of every bin relative to the trigger."""
        return self.t0_ps + np.arange(self.counts.size) * self.bin_width_ps


@dataclass(frozen=True)
class LifetimeFit:
    tau_ns: float
    amplitude: float
    offset: float
    fit_window: tuple
    residual_rms: float
    tau_err_ns: float = float("nan")

    def to_dict(self):
        return asdict(self) | {"fit_window": list(self.fit_window)}


def build_decay_histogram(stream, trigger_channel=TRIGGER_CHANNEL, bin_width_ps=128,
                          photon_channels=None):
    """Start-stop histogram of photon delay after the most recent trigger.

    Photons before the first trigger are ignored; delays of a full trigger
    period or more are counted in ``n_discarded``.
    """
    bin_width_ps = int(bin_width_ps)
    if bin_width_ps < 1:
        raise InvalidInputError("bin_width_ps must be >= 1")
    trig = stream.times(trigger_channel)
    if trig.size < 2:
        raise InvalidInputError(f"trigger channel {trigger_channel} needs at least 2 events")
    spacing = np.diff(trig)
    period = float(np.median(spacing))
    if period <= 0 or np.any(np.abs(spacing - period) > 0.01 * period):
        raise InvalidInputError("triggers are not periodic within 1%")
    if photon_channels is None:
        sel = stream.channels != trigger_channel
    else:
        sel = np.isin(stream.channels, list(photon_channels))
    photons = stream.times_ps[sel]
    idx = np.searchsorted(trig, photons, side="right") - 1
    photons, idx = photons[idx >= 0], idx[idx >= 0]
    delay = photons - trig[idx]
    keep = delay < period
    n_bins = max(int(np.ceil(period / bin_width_ps)), 16)
    counts = np.bincount(delay[keep] // bin_width_ps, minlength=n_bins)[:n_bins]
    return DecayHistogram(bin_width_ps, counts.astype(np.int64), 0,
                          int(np.count_nonzero(~keep)))


def fit_lifetime(hist, guard_bins=1, tail_fraction=0.1):
    """Exponential-plus-offset fit to the decaying part of a delay histogram.

    The window starts ``guard_bins`` after the maximum and ends at the last
    bin above an offset estimate (median of the final ``tail_fraction`` of
    bins). Residuals are Poisson weighted so tau depends only on the shape.
    """
    y_all = hist.counts.astype(float)
    peak = int(np.argmax(y_all))
    start = peak + int(guard_bins)
    n_tail = max(1, int(round(tail_fraction * y_all.size)))
    offset_est = float(np.median(y_all[-n_tail:]))
    above = np.nonzero(y_all[start:] > offset_est)[0]
    if above.size == 0:
        raise DegenerateDataError("no decay above the offset level")
    end = start + int(above[-1]) + 1
    if end - start < 10:
        raise DegenerateDataError("fewer than 10 decaying bins after the maximum")
    y = y_all[start:end]
    if y[0] <= offset_est or y.max() == y.min():
        raise DegenerateDataError("histogram does not decay")

    t = (np.arange(start, end) - start) * hist.bin_width_ps * 1e-3  # ns from window start
    # empty bins get the weight of the smallest non-empty one (one count for raw data),
    # which keeps tau independent of a uniform rescaling of the counts
    floor = y[y > 0].min() if np.any(y > 0) else 1.0
    wt = 1.0 / np.sqrt(np.maximum(y, floor))
    slope = np.polyfit(t[: max(3, (end - start) // 3)],
                       np.log(np.maximum(y[: max(3, (end - start) // 3)] - offset_est, 1e-12)), 1)[0]
    tau0 = -1.0 / slope if slope < 0 else t[-1] / 3.0
    a0 = max(y[0] - offset_est, 1e-12)

    def residual(x):
        return (np.exp(x[0]) * np.exp(-t / np.exp(x[1])) + x[2] ** 2 - y) * wt

    def jac(x):
        a, tau = np.exp(x[0]), np.exp(x[1])
        e = np.exp(-t / tau)
        return np.column_stack([a * e, a * e * t / tau, 2 * x[2] * np.ones_like(t)]) * wt[:, None]

    x0 = np.array([np.log(a0), np.log(max(tau0, 1e-3)), np.sqrt(max(offset_est, 0.0))])
    res = lm.levenberg_marquardt(residual, x0, jac)
    a, tau, off = np.exp(res.x[0]), np.exp(res.x[1]), res.x[2] ** 2
    Jn = jac(res.x) / np.array([a, tau, 2 * res.x[2] or 1.0])
    tau_err = float(np.sqrt(max(lm.covariance(Jn)[1, 1], 0.0)))
    resid = res.residual / wt
    t_start = hist.t0_ps + start * hist.bin_width_ps
    # amplitude referenced to the trigger rather than to the window start
    amp_at_trigger = a * np.exp((t_start - hist.t0_ps) * 1e-3 / tau)
    return LifetimeFit(
        tau_ns=float(tau),
        amplitude=float(amp_at_trigger),
        offset=float(off),
        fit_window=(int(t_start), int(hist.t0_ps + end * hist.bin_width_ps)),
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        tau_err_ns=tau_err,
    )
