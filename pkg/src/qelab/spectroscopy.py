"""Multi-Gaussian decomposition of emission spectra.

A spectrum is modelled as a constant baseline plus a sum of Gaussian peaks
(zero-phonon line and phonon-sideband components). The component with the
largest integrated area is taken as the zero-phonon line.
"""
from dataclasses import dataclass, field, asdict
import math

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks, peak_widths

from . import lm
from .errors import ConvergenceError, DegenerateDataError, InvalidInputError

HC_EV_NM = 1239.84198
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
MAX_COMPONENTS = 8


@dataclass(frozen=True, eq=False)
class Spectrum:
    wavelengths_nm: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=float)
        it = np.asarray(self.intensities, dtype=float)
        if wl.ndim != 1 or wl.shape != it.shape:
            raise InvalidInputError("wavelengths and intensities must be 1-D and equal length")
        if wl.size < 8:
            raise InvalidInputError("a spectrum needs at least 8 samples")
        if np.any(np.diff(wl) <= 0):
            raise InvalidInputError("wavelengths must be strictly increasing")
        if np.any(it < 0) or not np.all(np.isfinite(it)):
            raise InvalidInputError("intensities must be finite and non-negative")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "intensities", it)

    def __eq__(self, other):
        return (isinstance(other, Spectrum)
                and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)
                and np.array_equal(self.intensities, other.intensities))


@dataclass(frozen=True)
class GaussianComponent:
    center_nm: float
    sigma_nm: float
    amplitude: float

    def __post_init__(self):
        if not (self.sigma_nm > 0 and self.amplitude > 0):
            raise InvalidInputError("sigma and amplitude must be positive")

    @property
    def area(self):
        return self.amplitude * self.sigma_nm * math.sqrt(2.0 * math.pi)

    @property
    def fwhm_nm(self):
        return FWHM_PER_SIGMA * self.sigma_nm

    def evaluate(self, wavelengths_nm):
        x = (np.asarray(wavelengths_nm, dtype=float) - self.center_nm) / self.sigma_nm
        return self.amplitude * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class SpectralFit:
    components: tuple
    baseline: float
    zpl_index: int
    fitted_fwhm_nm: float
    direct_fwhm_nm: float
    residual_rms: float
    cost: float = field(default=float("nan"), compare=False)
    initial_cost: float = field(default=float("nan"), compare=False)

    @property
    def zpl(self):
        return self.components[self.zpl_index]

    def to_dict(self):
        return {
            "components": [asdict(c) for c in self.components],
            "baseline": self.baseline,
            "zpl_index": self.zpl_index,
            "zpl_nm": self.zpl.center_nm,
            "fitted_fwhm_nm": self.fitted_fwhm_nm,
            "direct_fwhm_nm": self.direct_fwhm_nm,
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_dict(cls, d):
        nan = float("nan")
        return cls(tuple(GaussianComponent(**c) for c in d["components"]), d["baseline"],
                   d["zpl_index"], d["fitted_fwhm_nm"],
                   nan if d["direct_fwhm_nm"] is None else d["direct_fwhm_nm"],
                   d["residual_rms"])


@dataclass(frozen=True)
class FilterConfig:
    passbands: tuple
    peak_transmission: float = 1.0

    def __post_init__(self):
        bands = tuple(sorted((float(lo), float(hi)) for lo, hi in self.passbands))
        for lo, hi in bands:
            if not lo < hi:
                raise InvalidInputError("passband low edge must be below high edge")
        for (_, h1), (l2, _) in zip(bands, bands[1:]):
            if l2 < h1:
                raise InvalidInputError("passbands overlap")
        if not 0 < self.peak_transmission <= 1:
            raise InvalidInputError("peak_transmission must lie in (0, 1]")
        object.__setattr__(self, "passbands", bands)

    def transmits(self, wavelengths_nm):
        wl = np.asarray(wavelengths_nm, dtype=float)
        inside = np.zeros(wl.shape, dtype=bool)
        for lo, hi in self.passbands:
            inside |= (wl >= lo) & (wl <= hi)
        return inside


# 594 nm longpass + 775 nm shortpass, 594 + 650 nm shortpass, 620/10 nm bandpass
FILTER_PRESETS = {
    "cfg1": FilterConfig(((594.0, 775.0),), 1.0),
    "cfg2": FilterConfig(((594.0, 650.0),), 1.0),
    "cfg3": FilterConfig(((615.0, 625.0),), 0.60),
}


def multi_gaussian(wavelengths_nm, components, baseline=0.0):
    out = np.full(np.shape(wavelengths_nm), float(baseline))
    for c in components:
        out += c.evaluate(wavelengths_nm)
    return out


def detect_peaks(spectrum, k):
    """Initial guesses for the ``k`` most prominent local maxima.

    Prominence is the height above the higher of the two flanking minima.
    Amplitudes are measured above the spectrum minimum, widths at half
    prominence. Results are sorted by descending amplitude.
    """
    if not 1 <= k <= MAX_COMPONENTS:
        raise InvalidInputError(f"k must lie in 1..{MAX_COMPONENTS}")
    y = spectrum.intensities
    wl = spectrum.wavelengths_nm
    idx, props = find_peaks(y, prominence=(1e-300, None))
    if idx.size == 0:
        return []
    order = np.argsort(-props["prominences"], kind="stable")[:k]
    idx = idx[order]
    widths = peak_widths(y, idx, rel_height=0.5,
                         prominence_data=(props["prominences"][order],
                                          props["left_bases"][order],
                                          props["right_bases"][order]))
    samples = np.arange(wl.size)
    base = y.min()
    out = []
    for i, left, right in zip(idx, widths[2], widths[3]):
        width_nm = np.interp(right, samples, wl) - np.interp(left, samples, wl)
        sigma = max(width_nm / FWHM_PER_SIGMA, 0.5 * float(np.min(np.diff(wl))))
        amp = float(y[i] - base)
        if amp > 0:
            out.append(GaussianComponent(float(wl[i]), float(sigma), amp))
    out.sort(key=lambda c: -c.amplitude)
    return out


def _pack(components, baseline):
    x = [math.sqrt(max(baseline, 0.0))]
    for c in components:
        x += [c.center_nm, math.log(c.sigma_nm), math.log(c.amplitude)]
    return np.array(x)


def _unpack(x):
    comps = tuple(GaussianComponent(float(x[i]), float(np.exp(x[i + 1])), float(np.exp(x[i + 2])))
                  for i in range(1, x.size, 3))
    return comps, float(x[0] ** 2)


def _fit(wl, y, wt, components, baseline, raise_on_failure=True):
    def residual(x):
        model = np.full(wl.size, x[0] ** 2)
        for i in range(1, x.size, 3):
            s = np.exp(x[i + 1])
            model += np.exp(x[i + 2]) * np.exp(-0.5 * ((wl - x[i]) / s) ** 2)
        return (model - y) * wt

    def jac(x):
        J = np.empty((wl.size, x.size))
        J[:, 0] = 2 * x[0]
        for i in range(1, x.size, 3):
            s, a = np.exp(x[i + 1]), np.exp(x[i + 2])
            u = (wl - x[i]) / s
            g = a * np.exp(-0.5 * u * u)
            J[:, i] = g * u / s
            J[:, i + 1] = g * u * u
            J[:, i + 2] = g
        return J * wt[:, None]

    return lm.levenberg_marquardt(residual, _pack(components, baseline), jac,
                                  raise_on_failure=raise_on_failure)


def _grow(wl, y, wt, comps, base, k):
    """Refit and add a component at the largest smoothed residual until there are ``k``.

    Components that collapse below two sample spacings are fitted noise and
    are dropped before the next addition.
    """
    spacing = float(np.median(np.diff(wl)))
    comps = list(comps)
    for _ in range(4 * k):
        if len(comps) == k:
            return comps, base
        if comps:
            res = _fit(wl, y, wt, comps, base, raise_on_failure=False)
            fitted, base = _unpack(res.x)
            comps = [c for c in fitted if c.sigma_nm >= 2 * spacing] or list(fitted[:1])
            comps = comps[:k]
            if len(comps) == k:
                return comps, base
        resid = gaussian_filter1d(y - multi_gaussian(wl, comps, base), 2.0, mode="nearest")
        j = int(np.argmax(resid))
        if resid[j] <= 0:
            break
        sigma = max(float(np.median([c.sigma_nm for c in comps])) if comps else 0.0, 3 * spacing)
        comps.append(GaussianComponent(float(wl[j]), sigma, float(resid[j])))
    raise InvalidInputError(f"cannot place {k} components: only {len(comps)} resolvable")


def _initial_components(spectrum, k, wt):
    """Candidate starting points for the fit.

    One start keeps the prominent maxima of a lightly smoothed copy and fills
    up with residual maxima; the other grows from the single strongest peak.
    """
    wl, y = spectrum.wavelengths_nm, spectrum.intensities
    spacing = float(np.median(np.diff(wl)))
    base = float(y.min())
    smoothed = Spectrum(wl, gaussian_filter1d(y, 2.0, mode="nearest"))
    found = detect_peaks(smoothed, min(k, MAX_COMPONENTS))
    if not found:
        raise InvalidInputError("spectrum has no local maximum to fit")
    # small or sub-resolution maxima are noise, not components
    kept = [c for c in found
            if c.amplitude >= 0.05 * found[0].amplitude and c.sigma_nm >= 2 * spacing][:k]
    starts = [kept or found[:1]]
    if len(starts[0]) > 1:
        starts.append(found[:1])
    out = []
    for comps in starts:
        try:
            out.append(_grow(wl, y, wt, comps, base, k))
        except InvalidInputError:
            if not out and comps is starts[-1]:
                raise
    return out


def fit_multi_gaussian(spectrum, k=4):
    """Least-squares decomposition into ``k`` Gaussians plus a constant baseline.

    Widths and amplitudes are fitted in log space (always positive), the
    baseline as a square. Residuals are Poisson weighted. Two seeding
    strategies are tried and the lower final cost wins.
    """
    if not 1 <= k <= MAX_COMPONENTS:
        raise InvalidInputError(f"k must lie in 1..{MAX_COMPONENTS}")
    if 3 * k + 1 > spectrum.intensities.size:
        raise InvalidInputError("too few samples for the requested number of components")
    wl, y = spectrum.wavelengths_nm, spectrum.intensities
    wt = 1.0 / np.sqrt(np.maximum(y, 1.0))
    best, error = None, None
    for comps, base in _initial_components(spectrum, k, wt):
        try:
            res = _fit(wl, y, wt, comps, base)
        except ConvergenceError as exc:
            error = exc
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise error
    comps, base = _unpack(best.x)
    comps = tuple(sorted(comps, key=lambda c: c.center_nm))
    resid = y - multi_gaussian(wl, comps, base)
    zpl = classify_zpl(comps)
    try:
        direct = direct_fwhm(spectrum)
    except DegenerateDataError:
        direct = float("nan")
    return SpectralFit(
        components=comps,
        baseline=base,
        zpl_index=zpl,
        fitted_fwhm_nm=FWHM_PER_SIGMA * comps[zpl].sigma_nm,
        direct_fwhm_nm=direct,
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        cost=best.cost,
        initial_cost=best.initial_cost,
    )


def classify_zpl(fit_or_components):
    """Index of the component with the largest area; ties go to the shortest wavelength."""
    comps = getattr(fit_or_components, "components", fit_or_components)
    if len(comps) == 0:
        raise InvalidInputError("no components to classify")
    areas = np.array([c.area for c in comps])
    best = areas.max()
    tied = [i for i, a in enumerate(areas) if a == best]
    return min(tied, key=lambda i: comps[i].center_nm)


def direct_fwhm(spectrum):
    """Width of the global maximum at half height above the spectrum minimum.

    Crossings are linearly interpolated on each side of the peak.
    """
    wl, y = spectrum.wavelengths_nm, spectrum.intensities
    i = int(np.argmax(y))
    base = float(y.min())
    if y[i] <= base:
        raise DegenerateDataError("spectrum has no peak above baseline")
    half = base + 0.5 * (y[i] - base)
    left = np.nonzero(y[:i] < half)[0]
    right = np.nonzero(y[i + 1:] < half)[0]
    if left.size == 0 or right.size == 0:
        raise DegenerateDataError("peak has no half-level crossing on one side")
    l1 = int(left[-1])
    r1 = i + 1 + int(right[0])
    x_left = wl[l1] + (half - y[l1]) * (wl[l1 + 1] - wl[l1]) / (y[l1 + 1] - y[l1])
    x_right = wl[r1 - 1] + (half - y[r1 - 1]) * (wl[r1] - wl[r1 - 1]) / (y[r1] - y[r1 - 1])
    return float(x_right - x_left)


def detuning_mev(component_nm, zpl_nm):
    """Photon-energy detuning of a component below the ZPL, in meV."""
    if component_nm <= 0 or zpl_nm <= 0:
        raise InvalidInputError("wavelengths must be positive")
    return 1e3 * HC_EV_NM * (1.0 / zpl_nm - 1.0 / component_nm)


def wavelength_at_detuning(detuning, zpl_nm):
    """Inverse of :func:`detuning_mev`."""
    if zpl_nm <= 0:
        raise InvalidInputError("wavelengths must be positive")
    inv = 1.0 / zpl_nm - detuning * 1e-3 / HC_EV_NM
    if inv <= 0:
        raise InvalidInputError("detuning too large")
    return 1.0 / inv


def apply_filter(spectrum, filt):
    """Top-hat transmission: zero outside every passband, scaled inside."""
    if isinstance(filt, str):
        filt = FILTER_PRESETS[filt]
    inside = filt.transmits(spectrum.wavelengths_nm)
    out = np.where(inside, spectrum.intensities * filt.peak_transmission, 0.0)
    return Spectrum(spectrum.wavelengths_nm, out)
