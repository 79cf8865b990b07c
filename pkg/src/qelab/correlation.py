"""Second-order photon correlation g2(tau) from two-detector timestamp streams.

Lags are ``t_b - t_a`` for every ordered pair of an event on channel ``a``
and an event on channel ``b``. Bins are centred on integer multiples of the
bin width, so the histogram is symmetric about zero lag; a lag lying exactly
on a bin edge goes to the bin nearer zero. ``max_lag_ps`` is the centre of the
outermost bin, which therefore collects lags up to ``max_lag_ps + w // 2``.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar, nnls

from .errors import DegenerateDataError, InvalidInputError

PAIRS_PER_CHUNK = 4_000_000
DEFAULT_BIN_PS = 256
DEFAULT_SIDE_PEAKS = 10


@dataclass(frozen=True, eq=False)
class G2Histogram:
    bin_width_ps: int
    lags_ps: np.ndarray
    raw_counts: np.ndarray
    normalized: np.ndarray
    rate_ch1_hz: float
    rate_ch2_hz: float
    duration_s: float

    def to_dict(self):
        return {
            "bin_width_ps": self.bin_width_ps,
            "duration_s": self.duration_s,
            "rate_ch1_hz": self.rate_ch1_hz,
            "rate_ch2_hz": self.rate_ch2_hz,
            "lags_ps": self.lags_ps.tolist(),
            "raw_counts": self.raw_counts.tolist(),
            "normalized": self.normalized.tolist(),
        }


@dataclass(frozen=True)
class G2Result:
    g2_zero: float
    center_peak_area: float
    mean_side_peak_area: float
    rep_period_ps: int
    n_side_peaks_used: int
    g2_zero_err: float
    method: str = "window"
    side_peak_areas: tuple = field(default=(), repr=False)

    def to_dict(self):
        return {
            "g2_zero": self.g2_zero,
            "g2_zero_err": self.g2_zero_err,
            "center_peak_area": self.center_peak_area,
            "mean_side_peak_area": self.mean_side_peak_area,
            "rep_period_ps": self.rep_period_ps,
            "n_side_peaks_used": self.n_side_peaks_used,
            "method": self.method,
        }


def lag_bin_index(lags, bin_width_ps):
    """Signed bin index of integer lags (edges go toward zero)."""
    lags = np.asarray(lags, dtype=np.int64)
    mag = (2 * np.abs(lags) + bin_width_ps - 1) // (2 * bin_width_ps)
    return np.sign(lags) * mag


def _chunk_histogram(ta, tb, lo, hi, reach, bin_width, n_half):
    lens = hi - lo
    total = int(lens.sum())
    if total == 0:
        return np.zeros(2 * n_half + 1, dtype=np.int64)
    owner = np.repeat(np.arange(ta.size), lens)
    offsets = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
    d = tb[lo[owner] + offsets] - ta[owner]
    k = lag_bin_index(d, bin_width)
    return np.bincount(k + n_half, minlength=2 * n_half + 1).astype(np.int64)


def compute_g2(stream, ch_a=0, ch_b=1, bin_width_ps=DEFAULT_BIN_PS, max_lag_ps=400_000,
               workers=1):
    """Coincidence histogram and its Poisson-normalised g2(tau).

    Each event on ``ch_a`` is paired with the window of ``ch_b`` events within
    reach, located by binary search in the sorted ``ch_b`` times. Work is split
    into contiguous chunks of ``ch_a`` events; integer partial histograms are
    summed, so the result does not depend on ``workers``.
    """
    bin_width_ps = int(bin_width_ps)
    max_lag_ps = int(max_lag_ps)
    if bin_width_ps < 1:
        raise InvalidInputError("bin_width_ps must be >= 1")
    if max_lag_ps < 0 or max_lag_ps % bin_width_ps:
        raise InvalidInputError("max_lag_ps must be a non-negative multiple of bin_width_ps")
    present = stream.channel_ids
    for ch in (ch_a, ch_b):
        if ch not in present:
            raise InvalidInputError(f"channel {ch} has no events")
    if stream.duration_ps <= 0:
        raise InvalidInputError("stream duration must be positive")

    ta = stream.times(ch_a)
    tb = stream.times(ch_b)
    n_half = max_lag_ps // bin_width_ps
    reach = max_lag_ps + bin_width_ps // 2
    lo = np.searchsorted(tb, ta - reach, side="left")
    hi = np.searchsorted(tb, ta + reach, side="right")

    csum = np.cumsum(hi - lo)
    bounds = [0]
    if csum.size:
        cuts = np.searchsorted(csum, np.arange(PAIRS_PER_CHUNK, csum[-1], PAIRS_PER_CHUNK))
        bounds.extend(int(c) + 1 for c in cuts)
    bounds.append(ta.size)
    bounds = sorted(set(min(b, ta.size) for b in bounds))
    spans = list(zip(bounds[:-1], bounds[1:]))

    def work(span):
        s, e = span
        return _chunk_histogram(ta[s:e], tb, lo[s:e], hi[s:e], reach, bin_width_ps, n_half)

    raw = np.zeros(2 * n_half + 1, dtype=np.int64)
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    for p in parts:
        raw += p

    duration_s = stream.duration_ps * 1e-12
    rate_a = ta.size / duration_s
    rate_b = tb.size / duration_s
    expected = rate_a * rate_b * duration_s * (bin_width_ps * 1e-12)
    normalized = raw / expected if expected > 0 else np.zeros(raw.size)
    lags = np.arange(-n_half, n_half + 1, dtype=np.int64) * bin_width_ps
    return G2Histogram(bin_width_ps, lags, raw, normalized, float(rate_a), float(rate_b),
                       float(duration_s))


def _check_pulsed(hist, rep_rate_hz, n_side_peaks):
    if not rep_rate_hz > 0:
        raise InvalidInputError("rep_rate_hz must be positive")
    if n_side_peaks < 2:
        raise InvalidInputError("n_side_peaks must be >= 2")
    period = 1e12 / rep_rate_hz
    w = hist.bin_width_ps
    if period < 4 * w:
        raise InvalidInputError("repetition period must span at least 4 bins")
    covered = hist.lags_ps[-1] + w / 2.0
    if (n_side_peaks + 0.5) * period > covered + 1e-9:
        raise InvalidInputError(
            f"lag range {covered:.0f} ps does not cover {n_side_peaks} side peaks")
    return period


def _window_areas(hist, period, peaks):
    w = hist.bin_width_ps
    lo = hist.lags_ps - w / 2.0
    hi = hist.lags_ps + w / 2.0
    counts = hist.raw_counts.astype(float)
    areas = []
    for m in peaks:
        wlo, whi = (m - 0.5) * period, (m + 0.5) * period
        frac = np.clip(np.minimum(hi, whi) - np.maximum(lo, wlo), 0.0, None) / w
        areas.append(float(counts @ frac))
    return np.array(areas)


def g2_zero_pulsed(hist, rep_rate_hz, n_side_peaks=DEFAULT_SIDE_PEAKS, method="window"):
    """g2(0) under pulsed excitation as the centre-to-side peak area ratio.

    ``method="window"`` integrates raw counts over one full repetition period
    around zero lag and around each of the ``n_side_peaks`` nearest pulse
    multiples per side (bins straddling a window edge are split by overlap).

    ``method="fit"`` accounts for peaks whose exponential tails spill into
    neighbouring windows: the histogram is modelled as a flat coincidence
    floor plus one two-sided exponential peak per pulse multiple (common decay
    constant, free areas), and each window's area is the floor over one period
    plus that peak's own area. Use it when the decay time is not small
    compared with the repetition period.
    """
    period = _check_pulsed(hist, rep_rate_hz, n_side_peaks)
    if method == "window":
        peaks = np.arange(-n_side_peaks, n_side_peaks + 1)
        areas = _window_areas(hist, period, peaks)
        center = areas[n_side_peaks]
        sides = np.delete(areas, n_side_peaks)
        mean_side = sides.mean()
        if mean_side <= 0:
            raise DegenerateDataError("side peaks are empty")
        g2 = center / mean_side
        err = abs(g2) * np.sqrt(1.0 / max(center, 1.0) + sides.sum() / sides.sum() ** 2)
    elif method == "fit":
        center, sides, err = _fit_peak_areas(hist, period, n_side_peaks)
        mean_side = sides.mean()
        if mean_side <= 0:
            raise DegenerateDataError("side peaks are empty")
        g2 = center / mean_side
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return G2Result(float(g2), float(center), float(mean_side), int(round(period)),
                    int(n_side_peaks), float(err), method, tuple(float(s) for s in sides))


def _laplace_cdf(x, scale):
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / scale),
                    1.0 - 0.5 * np.exp(-np.maximum(x, 0) / scale))


def _neighbour_cdf(d, scale, period):
    """CDF of ``e2 - e1`` for two exponential delays with ``e1 < period``.

    Shape of the first side peak (offset by one period): the emitter must have
    relaxed before the next pulse can excite it, which thins the inner tail.
    """
    q = np.exp(-period / scale)
    z = -np.expm1(-period / scale)
    neg = (np.exp(np.clip(d, -period, 0) / scale)
           + q * q * np.exp(-np.clip(d, -period, 0) / scale) - 2 * q) / (2 * z)
    pos = z / 2 + (1 + q) / 2 * -np.expm1(-np.maximum(d, 0) / scale)
    return np.where(d <= -period, 0.0, np.where(d < 0, neg, pos))


def _peak_cdf(x, m, scale, period):
    if m == 1:
        return _neighbour_cdf(x - period, scale, period)
    if m == -1:
        return 1.0 - _neighbour_cdf(-x - period, scale, period)
    return _laplace_cdf(x - m * period, scale)


def _fit_peak_areas(hist, period, n_side):
    w = hist.bin_width_ps
    keep = np.abs(hist.lags_ps) <= (n_side + 0.5) * period
    c = hist.lags_ps[keep].astype(float)
    y = hist.raw_counts[keep].astype(float)
    if y.sum() <= 0:
        raise DegenerateDataError("histogram is empty")
    peaks = np.arange(-(n_side + 2), n_side + 3)
    wt = 1.0 / np.sqrt(np.maximum(y, 1.0))

    def design(scale):
        cols = [np.full(c.size, float(w))]
        for m in peaks:
            cols.append(_peak_cdf(c + w / 2.0, m, scale, period)
                        - _peak_cdf(c - w / 2.0, m, scale, period))
        return np.column_stack(cols)

    def solve(log_scale):
        X = design(np.exp(log_scale)) * wt[:, None]
        coef, rnorm = nnls(X, y * wt, maxiter=50 * X.shape[1])
        return coef, X, float(rnorm ** 2)

    # weights from the data bias low-count bins downwards; reweight from the model
    for _ in range(3):
        res = minimize_scalar(lambda s: solve(s)[2], bounds=(np.log(w / 4.0), np.log(period)),
                              method="bounded", options={"xatol": 1e-6})
        coef, X, _ = solve(res.x)
        model = (X / wt[:, None]) @ coef
        wt = 1.0 / np.sqrt(np.maximum(model, 0.5))
    floor = coef[0] * period
    i0 = 1 + list(peaks).index(0)
    side_idx = [1 + list(peaks).index(m) for m in peaks if m != 0 and abs(m) <= n_side]
    center = floor + coef[i0]
    sides = floor + coef[side_idx]

    cov = np.linalg.pinv(X.T @ X)
    g2 = center / sides.mean()
    grad = np.zeros(coef.size)
    ms = sides.mean()
    grad[0] = period * (1.0 / ms - center / ms ** 2) if ms else 0.0
    grad[i0] = 1.0 / ms
    grad[side_idx] = -center / ms ** 2 / len(side_idx)
    err = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    return center, sides, err if np.isfinite(g2) else np.nan


def background_corrected_g2(g2_measured, signal_fraction_p):
    """Intrinsic g2(0) of the emitter behind uncorrelated (Poissonian) background.

    Returns ``(g2 - (1 - p^2)) / p^2``; negative results are returned as-is.
    """
    p = float(signal_fraction_p)
    if not 0 < p <= 1:
        raise InvalidInputError("signal fraction must lie in (0, 1]")
    if g2_measured < 0:
        raise InvalidInputError("g2_measured must be non-negative")
    return (g2_measured - (1.0 - p * p)) / (p * p)
