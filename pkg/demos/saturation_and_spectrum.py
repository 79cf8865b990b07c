"""Brightness and colour of one emitter.

Part one fits the power-saturation model to a simulated power sweep. The
simulated emitter has a photo-induced dark state, so the count rate rolls
over at high power and the shelving term of the model is needed.

Part two fits four Gaussians to a spectrum with a zero-phonon line and three
phonon-assisted features and picks out the ZPL.

    python demos/saturation_and_spectrum.py
"""
import numpy as np

from qelab.photophysics import eval_saturation, fit_saturation
from qelab.sim import SimEmitterConfig, expected_rate, simulate_saturation, simulate_spectrum
from qelab.spectroscopy import (FILTER_PRESETS, GaussianComponent, apply_filter, detuning_mev,
                                fit_multi_gaussian, multi_gaussian, wavelength_at_detuning)

emitter = SimEmitterConfig(shelving_branch=0.1, shelf_lifetime_ns=300.0,
                           shelving_mode="photoinduced", background_cps_per_uw=300.0)
powers = np.geomspace(10, 3000, 30)
curve = simulate_saturation(emitter, powers, integration_s=0.02, seed=3)
fit = fit_saturation(curve)
p = fit.params
print(f"R_inf = {p.r_inf_cps / 1e6:.2f} Mcps, P_sat = {p.p_sat_uw:.0f} uW, "
      f"c_sh = {p.c_sh:.3f}, background {p.c_bg_cps_per_uw:.0f} cps/uW")
# the model is phenomenological, so chi2 well above the degrees of freedom
# shows where it departs from the kinetic simulation at this precision
print(f"chi2 = {fit.chi2:.1f} for {powers.size - 4} degrees of freedom")
for P in (100.0, 1000.0, 3000.0):
    print(f"  {P:6.0f} uW: model {eval_saturation(p, P) / 1e6:.3f} Mcps, "
          f"exact mean {expected_rate(emitter, P) / 1e6:.3f} Mcps")

zpl = 619.14
layout = [(0.0, 1.7, 1000.0), (2.5, 4.0, 300.0), (17.0, 1.5, 300.0), (71.0, 5.0, 120.0)]
comps = [GaussianComponent(wavelength_at_detuning(d, zpl), s, a) for d, s, a in layout]
wl = np.arange(600.0, 680.0001, 0.1)
spectrum = simulate_spectrum(comps, 20.0, wl, int(10 * multi_gaussian(wl, comps, 20.0).sum()), seed=1)

sfit = fit_multi_gaussian(spectrum, k=4)
for c in sfit.components:
    print(f"  {c.center_nm:7.2f} nm  sigma {c.sigma_nm:4.2f}  detuning "
          f"{detuning_mev(c.center_nm, sfit.zpl.center_nm):5.1f} meV")
print(f"ZPL {sfit.zpl.center_nm:.2f} nm, FWHM {sfit.fitted_fwhm_nm:.2f} nm (fit), "
      f"{sfit.direct_fwhm_nm:.2f} nm (direct)")

# a 10 nm bandpass keeps the ZPL and the nearest sideband only
narrow = fit_multi_gaussian(apply_filter(spectrum, FILTER_PRESETS["cfg3"]), k=2)
print(f"behind cfg3 the ZPL fits to {narrow.zpl.center_nm:.2f} nm")
