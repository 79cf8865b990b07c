"""Kinetic Monte Carlo ground truth for the analysis modules.

The emitter is a three-level system (ground, excited, shelf) driven by a
pulsed laser. At each pulse a free emitter is excited with probability
``P / (P + p_sat_sim_uw)``. The excited state decays after an exponential
delay; it either emits a photon and is free again, or falls into the shelf and
stays dark for an exponential shelf dwell. An emitter that is still excited
or shelved when a pulse arrives ignores that pulse. Background photons are a
Poisson process with rate ``background_cps_per_uw * P``. Every photon is kept
with probability ``collection_efficiency``, sent to detector 0 with
probability ``splitter_ratio`` (otherwise detector 1) and smeared by Gaussian
timing jitter. Laser triggers are written on channel 2.

Random numbers come from Philox4x64-10, a counter-based generator. Each
purpose (excitation, decay delay, branching, ...) owns a stream keyed by
``(seed, stream_id)`` and pulse ``k`` always consumes the ``k``-th draw of
each per-pulse stream, so results do not depend on internal chunking.

With ``shelving_mode="photoinduced"`` the shelving branch is multiplied by
the excitation probability, i.e. shelving needs a second absorption from the
same pulse. Unlike the constant branch this gives the saturation curve a
roll-off at high power.
"""
from dataclasses import dataclass, fields, replace
import math

import numpy as np
from numba import njit

from .errors import InvalidInputError
from .scan import ScanImage
from .spectroscopy import Spectrum, multi_gaussian
from .photophysics import SaturationCurve
from .stream import TimestampStream, TRIGGER_CHANNEL

GENERATOR_NAME = "philox4x64-10"
CHUNK_PULSES = 1 << 20

# stream ids
_EXCITE, _DECAY, _BRANCH, _SHELF = 1, 2, 3, 4
_BG_COUNT, _BG_TIME = 5, 6
_DETECT, _SPLIT, _JITTER = 7, 8, 9
_SCAN, _SPECTRUM, _LAYOUT = 10, 11, 12

SHELVING_MODES = ("constant", "photoinduced")


def philox(seed, stream_id):
    """Generator for one named stream of a seeded run."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed, index):
    """Child seed for the ``index``-th sub-run of a seeded batch."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
               .generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SimEmitterConfig:
    lifetime_ns: float = 5.87
    p_sat_sim_uw: float = 200.0
    shelving_branch: float = 0.0
    shelf_lifetime_ns: float = 100.0
    rep_rate_hz: float = 39e6
    collection_efficiency: float = 0.1
    background_cps_per_uw: float = 0.0
    splitter_ratio: float = 0.5
    jitter_ps_rms: float = 0.0
    seed: int = 0
    shelving_mode: str = "constant"

    def __post_init__(self):
        ok = (self.lifetime_ns > 0 and self.p_sat_sim_uw > 0 and 0 <= self.shelving_branch < 1
              and self.shelf_lifetime_ns > 0 and self.rep_rate_hz > 0
              and 0 < self.collection_efficiency <= 1 and self.background_cps_per_uw >= 0
              and 0 < self.splitter_ratio < 1 and self.jitter_ps_rms >= 0
              and self.shelving_mode in SHELVING_MODES)
        if not ok:
            raise InvalidInputError(f"invalid simulator configuration: {self}")

    @property
    def period_ps(self):
        return 1e12 / self.rep_rate_hz

    def excitation_prob(self, power_uw):
        return power_uw / (power_uw + self.p_sat_sim_uw)

    def shelving_prob(self, power_uw):
        if self.shelving_mode == "photoinduced":
            return self.shelving_branch * self.excitation_prob(power_uw)
        return self.shelving_branch

    @classmethod
    def from_mapping(cls, values):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise InvalidInputError(f"unknown simulator key {key!r}")
            t = kinds[key]
            if t in (int, "int"):
                kwargs[key] = int(raw)
            elif t in (str, "str"):
                kwargs[key] = str(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class SimRunRecord:
    config: SimEmitterConfig
    power_uw: float
    duration_s: float
    emitted_signal_photons: int
    emitted_background_photons: int
    detected_signal_photons: int
    detected_background_photons: int
    stream: TimestampStream
    n_pulses: int
    generator: str = GENERATOR_NAME
    # pulse index of every emitted signal photon (debug tally)
    signal_pulse_index: np.ndarray = None

    @property
    def signal_fraction(self):
        total = self.detected_signal_photons + self.detected_background_photons
        return self.detected_signal_photons / total if total else float("nan")


@njit(cache=True)
def _pulse_pass(k0, period_ps, u_exc, decay_ps, u_branch, shelf_ps, p_exc, p_shelf,
                t_free, out_t, out_k):
    n_out = 0
    for j in range(u_exc.size):
        t = (k0 + j) * period_ps
        if t < t_free or u_exc[j] >= p_exc:
            continue
        t_decay = t + decay_ps[j]
        if u_branch[j] < p_shelf:
            t_free = t_decay + shelf_ps[j]
        else:
            out_t[n_out] = t_decay
            out_k[n_out] = k0 + j
            n_out += 1
            t_free = t_decay
    return n_out, t_free


def _emitter_photons(config, power_uw, n_pulses, seed):
    """Emission times (ps, float) and originating pulse index of signal photons."""
    p_exc = config.excitation_prob(power_uw)
    p_shelf = config.shelving_prob(power_uw)
    if p_exc <= 0 or n_pulses == 0:
        return np.zeros(0), np.zeros(0, np.int64)
    tau_ps = config.lifetime_ns * 1e3
    shelf_ps = config.shelf_lifetime_ns * 1e3
    g_exc, g_dec = philox(seed, _EXCITE), philox(seed, _DECAY)
    g_br, g_sh = philox(seed, _BRANCH), philox(seed, _SHELF)
    times, pulses = [], []
    t_free = -np.inf
    out_t = np.empty(min(n_pulses, CHUNK_PULSES))
    out_k = np.empty(min(n_pulses, CHUNK_PULSES), dtype=np.int64)
    for k0 in range(0, n_pulses, CHUNK_PULSES):
        m = min(CHUNK_PULSES, n_pulses - k0)
        u_exc = g_exc.random(m)
        decay = -tau_ps * np.log1p(-g_dec.random(m))
        u_br = g_br.random(m)
        shelf = -shelf_ps * np.log1p(-g_sh.random(m))
        n, t_free = _pulse_pass(k0, config.period_ps, u_exc, decay, u_br, shelf,
                                p_exc, p_shelf, t_free, out_t, out_k)
        times.append(out_t[:n].copy())
        pulses.append(out_k[:n].copy())
    return np.concatenate(times), np.concatenate(pulses)


def _run(config, power_uw, duration_s, seed):
    if not power_uw >= 0 or not duration_s > 0:
        raise InvalidInputError("power must be >= 0 and duration > 0")
    duration_ps = int(round(duration_s * 1e12))
    n_pulses = int(math.floor(duration_ps / config.period_ps)) + 1
    if n_pulses < 10_000:
        raise InvalidInputError("duration must cover at least 1e4 pulses")
    sig_t, sig_k = _emitter_photons(config, power_uw, n_pulses, seed)
    keep = sig_t <= duration_ps
    sig_t, sig_k = sig_t[keep], sig_k[keep]

    bg_rate = config.background_cps_per_uw * power_uw
    n_bg = int(philox(seed, _BG_COUNT).poisson(bg_rate * duration_s)) if bg_rate > 0 else 0
    bg_t = philox(seed, _BG_TIME).random(n_bg) * duration_ps

    all_t = np.concatenate([sig_t, bg_t])
    is_sig = np.concatenate([np.ones(sig_t.size, bool), np.zeros(n_bg, bool)])
    detected = philox(seed, _DETECT).random(all_t.size) < config.collection_efficiency
    to_ch0 = philox(seed, _SPLIT).random(all_t.size) < config.splitter_ratio
    if config.jitter_ps_rms > 0:
        all_t = all_t + config.jitter_ps_rms * philox(seed, _JITTER).standard_normal(all_t.size)
    t_int = np.rint(all_t).astype(np.int64)
    detected &= (t_int >= 0) & (t_int <= duration_ps)
    return dict(
        duration_ps=duration_ps, n_pulses=n_pulses,
        t=t_int[detected], ch=np.where(to_ch0[detected], 0, 1).astype(np.uint8),
        n_sig=int(sig_t.size), n_bg=n_bg, sig_k=sig_k,
        det_sig=int(np.count_nonzero(detected & is_sig)),
        det_bg=int(np.count_nonzero(detected & ~is_sig)),
    )


def simulate_stream(config, power_uw, duration_s, seed=None):
    """Simulate one acquisition; returns a :class:`SimRunRecord`.

    ``seed`` defaults to ``config.seed``. Identical arguments always give a
    bit-identical stream.
    """
    seed = config.seed if seed is None else seed
    r = _run(config, power_uw, duration_s, seed)
    trig = np.rint(np.arange(r["n_pulses"]) * config.period_ps).astype(np.int64)
    det = {0: r["t"][r["ch"] == 0], 1: r["t"][r["ch"] == 1], TRIGGER_CHANNEL: trig}
    for c in (0, 1):
        det[c] = np.sort(det[c], kind="stable")
    stream = TimestampStream.from_channels(det, r["duration_ps"])
    return SimRunRecord(
        config=replace(config, seed=int(seed)), power_uw=float(power_uw),
        duration_s=float(duration_s),
        emitted_signal_photons=r["n_sig"], emitted_background_photons=r["n_bg"],
        detected_signal_photons=r["det_sig"], detected_background_photons=r["det_bg"],
        stream=stream, n_pulses=int(trig.size), signal_pulse_index=r["sig_k"],
    )


def occupancy_factor(config, power_uw):
    """Steady-state probability that the emitter is free when a pulse arrives.

    Exact for the simulated process: a per-pulse Markov chain over the states
    free / still excited / shelved. Reduces to the two-state (free, shelved)
    chain when the lifetime is short compared with the pulse period.
    """
    p = config.excitation_prob(power_uw)
    b = config.shelving_prob(power_uw)
    T = config.period_ps * 1e-3
    tau, tau_s = config.lifetime_ns, config.shelf_lifetime_ns
    stay_e = math.exp(-T / tau)
    stay_s = math.exp(-T / tau_s)
    if b > 0:
        k = 1.0 / tau - 1.0 / tau_s
        integral = T if abs(k * T) < 1e-12 else -math.expm1(-k * T) / k
        to_s = b / tau * stay_s * integral
    else:
        to_s = 0.0
    to_f = 1.0 - stay_e - to_s
    M = np.array([
        [1.0 - p + p * to_f, p * stay_e, p * to_s],
        [to_f, stay_e, to_s],
        [1.0 - stay_s, 0.0, stay_s],
    ])
    # stationary distribution: left eigenvector of M for eigenvalue 1
    A = np.vstack([M.T - np.eye(3), np.ones(3)])
    pi = np.linalg.lstsq(A, np.array([0.0, 0.0, 0.0, 1.0]), rcond=None)[0]
    return float(pi[0])


def expected_rate(config, power_uw):
    """Mean detected count rate (cps), signal plus background."""
    if power_uw < 0:
        raise InvalidInputError("power must be non-negative")
    p = config.excitation_prob(power_uw)
    b = config.shelving_prob(power_uw)
    signal = config.rep_rate_hz * p * (1.0 - b) * occupancy_factor(config, power_uw)
    background = config.background_cps_per_uw * power_uw
    return config.collection_efficiency * (signal + background)


def simulate_saturation(config, powers_uw, integration_s, seed=None):
    """Count rate vs power, each point an independent simulated acquisition.

    Point ``i`` uses ``derive_seed(seed, i)``. Errors are ``sqrt(N) / t``
    (floored at one count so weights stay finite).
    """
    seed = config.seed if seed is None else seed
    powers = np.asarray(powers_uw, dtype=float)
    if np.any(np.diff(powers) <= 0):
        raise InvalidInputError("powers must be strictly increasing")
    counts = np.array([
        _run(config, P, integration_s, derive_seed(seed, i))["t"].size
        for i, P in enumerate(powers)
    ], dtype=float)
    rates = counts / integration_s
    errs = np.sqrt(np.maximum(counts, 1.0)) / integration_s
    return SaturationCurve(powers, rates, errs)


def simulate_scan(emitters, psf_sigma_um, background_cps, image_spec, seed=0):
    """Poisson-sampled confocal scan of Gaussian spots.

    ``emitters`` is a list of ``(x_um, y_um, brightness_cps)``; ``image_spec``
    is ``(width_px, height_px, pixel_um)``. Pixel ``(r, c)`` is centred at
    ``(c * pixel_um, r * pixel_um)``.
    """
    if not psf_sigma_um > 0:
        raise InvalidInputError("psf_sigma_um must be positive")
    w, h, pix = image_spec
    y = np.arange(h)[:, None] * pix
    x = np.arange(w)[None, :] * pix
    expected = np.full((h, w), float(background_cps))
    reach = 6.0 * psf_sigma_um
    for ex, ey, bright in emitters:
        r0, r1 = max(0, int((ey - reach) / pix)), min(h, int((ey + reach) / pix) + 2)
        c0, c1 = max(0, int((ex - reach) / pix)), min(w, int((ex + reach) / pix) + 2)
        if r0 >= r1 or c0 >= c1:
            continue
        d2 = (x[:, c0:c1] - ex) ** 2 + (y[r0:r1, :] - ey) ** 2
        expected[r0:r1, c0:c1] += bright * np.exp(-d2 / (2 * psf_sigma_um ** 2))
    counts = philox(seed, _SCAN).poisson(expected).astype(float)
    return ScanImage(counts, pix)


def simulate_spectrum(components, baseline, wavelengths_nm, total_counts, seed=0):
    """Poisson realisation of a multi-Gaussian spectrum with ``total_counts`` expected."""
    wl = np.asarray(wavelengths_nm, dtype=float)
    if np.any(np.diff(wl) <= 0):
        raise InvalidInputError("wavelength grid must be strictly increasing")
    model = multi_gaussian(wl, components, baseline)
    s = model.sum()
    expected = model * (total_counts / s) if s > 0 else np.zeros_like(model)
    counts = philox(seed, _SPECTRUM).poisson(expected).astype(float)
    return Spectrum(wl, counts)


def random_layout(n, field_um, margin_um, min_separation_um, brightness_cps, seed=0,
                  max_tries=100_000):
    """``n`` emitter positions uniform in ``[margin, field - margin]^2``, pairwise apart.

    Rejection sampling; returns ``(x_um, y_um, brightness_cps)`` tuples.
    """
    rng = philox(seed, _LAYOUT)
    lo, hi = margin_um, field_um - margin_um
    if hi <= lo:
        raise InvalidInputError("margin leaves no room for emitters")
    pts = []
    for _ in range(max_tries):
        if len(pts) == n:
            break
        x, y = rng.uniform(lo, hi, size=2)
        if all((x - a) ** 2 + (y - b) ** 2 >= min_separation_um ** 2 for a, b, _c in pts):
            pts.append((float(x), float(y), float(brightness_cps)))
    if len(pts) < n:
        raise InvalidInputError(f"could only place {len(pts)} of {n} emitters")
    return pts
