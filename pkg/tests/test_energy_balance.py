from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwis.energy import (
    KELVIN,
    STEFAN_BOLTZMANN,
    AnalysisColumn,
    ColumnConfig,
    SurfaceMeteo,
    SurfaceParams,
    ThermalProfile,
    equilibrium_surface_temp,
    forecast,
    physical_forecasts,
    step_profile,
    surface_flux,
    trend_forecast,
)
from rwis.errors import InsufficientMeteo, NonFiniteInput, OutOfRange, SingularSystem, StepTooLarge

QUIET = SurfaceParams(albedo=0.1, emissivity=0.95, sensible_coeff=0.0, latent_coeff=0.0)


def met(S=0.0, I=0.0, air=0.0, wind=2.0, rh=80.0, P=0.0):
    return SurfaceMeteo(S, I, air, wind, rh, P)


def uniform_profile(temp, n=12, depth=2.0, k=1.2, rc=2.0e6):
    z = np.linspace(0.0, depth, n)
    return ThermalProfile(z, np.full(n, temp), k, rc, temp)


# -- surface flux --------------------------------------------------------------------

def test_all_terms_vanish():
    p = replace(QUIET, albedo=1.0)
    assert surface_flux(-KELVIN, met(S=400.0, I=0.0, air=-KELVIN), p) == 0.0


def test_emission_only_matches_exact_arithmetic():
    r = surface_flux(0.0, met(), QUIET)
    sigma = Fraction(STEFAN_BOLTZMANN)
    exact = -Fraction(95, 100) * sigma * Fraction(27315, 100) ** 4
    assert r == pytest.approx(float(exact), rel=1e-14)


def test_anthropogenic_flux_is_additive():
    m = met(S=300.0, I=280.0, air=2.0)
    r1 = surface_flux(4.0, m, replace(SurfaceParams(), anthropogenic=20.0))
    r2 = surface_flux(4.0, m, replace(SurfaceParams(), anthropogenic=40.0))
    assert r2 - r1 == pytest.approx(20.0, abs=1e-10)


@pytest.mark.parametrize("field,params_field", [("S", None), ("I", None), (None, "anthropogenic")])
def test_affine_in_each_forcing(field, params_field):
    def flux(v):
        if field:
            return surface_flux(3.0, met(**{"S": 100.0, "I": 250.0, "air": 1.0, field: v}), SurfaceParams())
        return surface_flux(3.0, met(S=100.0, I=250.0, air=1.0), replace(SurfaceParams(), **{params_field: v}))

    a, b, c = flux(10.0), flux(20.0), flux(50.0)
    assert (b - a) / 10.0 == pytest.approx((c - b) / 30.0, rel=1e-10)


def test_slopes_are_absorptivity_and_emissivity():
    p = SurfaceParams()
    base = surface_flux(3.0, met(S=100.0, I=250.0), p)
    assert surface_flux(3.0, met(S=101.0, I=250.0), p) - base == pytest.approx(1 - p.albedo, rel=1e-9)
    assert surface_flux(3.0, met(S=100.0, I=251.0), p) - base == pytest.approx(p.emissivity, rel=1e-9)


def test_phase_flux_sign():
    p = SurfaceParams()
    base = surface_flux(0.0, met(P=0.0), p)
    assert surface_flux(0.0, met(P=1e-4), p) - base == pytest.approx(p.latent_fusion * 1e-4)
    assert surface_flux(0.0, met(P=-1e-4), p) - base == pytest.approx(-p.latent_fusion * 1e-4)


def test_sensible_heat_cools_a_warmer_surface():
    p = replace(SurfaceParams(), latent_coeff=0.0)
    assert surface_flux(10.0, met(air=0.0), p) < surface_flux(10.0, met(air=5.0), p)


def test_evaporation_only_removes_heat():
    dry = replace(SurfaceParams(), latent_coeff=0.0)
    wet = SurfaceParams()
    for rh in (10.0, 60.0, 100.0):
        assert surface_flux(5.0, met(air=5.0, rh=rh), wet) <= surface_flux(5.0, met(air=5.0, rh=rh), dry)


def test_non_finite_flux_input():
    with pytest.raises(NonFiniteInput):
        surface_flux(float("nan"), met(), SurfaceParams())


def test_meteo_invariants():
    with pytest.raises(OutOfRange):
        met(S=-1.0)
    with pytest.raises(OutOfRange):
        SurfaceParams(albedo=1.5)


# -- step_profile ------------------------------------------------------------------

def test_uniform_profile_is_a_fixpoint():
    p = uniform_profile(7.5)
    out = step_profile(p, 60.0, 0.0)
    assert np.max(np.abs(out.temperatures - p.temperatures)) <= 1e-10
    assert out is not p


def test_input_profile_untouched():
    p = uniform_profile(1.0)
    before = p.temperatures.copy()
    step_profile(p, 60.0, 100.0)
    assert np.array_equal(p.temperatures, before)


def test_positive_flux_warms_surface():
    p = uniform_profile(2.0)
    assert step_profile(p, 60.0, 50.0).surface > 2.0
    assert step_profile(p, 60.0, -50.0).surface < 2.0


def sinusoid_amplitude(hours, n=81, depth=0.5, k=1.2, rc=2.0e6, dt=60.0):
    z = np.linspace(0.0, depth, n)
    mode = np.sin(np.pi * z / depth)
    p = ThermalProfile(z, mode, k, rc, 0.0)
    for _ in range(int(hours * 3600 / dt)):
        p = step_profile(p, dt, 0.0, fixed_surface=0.0)
    # amplitude by projection onto the initial mode
    return float(np.dot(p.temperatures, mode) / np.dot(mode, mode))


def test_sinusoid_decays_like_analytic_solution():
    k, rc, depth = 1.2, 2.0e6, 0.5
    amp = sinusoid_amplitude(24.0, depth=depth, k=k, rc=rc)
    analytic = np.exp(-(k / rc) * (np.pi / depth) ** 2 * 24 * 3600)
    assert abs(amp - analytic) / analytic < 0.02


def test_step_errors():
    p = uniform_profile(0.0)
    with pytest.raises(StepTooLarge):
        step_profile(p, 301.0, 0.0)
    with pytest.raises(OutOfRange):
        step_profile(p, 0.0, 0.0)
    with pytest.raises(SingularSystem):
        ThermalProfile([0.0, 0.5, 0.5], [0, 0, 0], 1.0, 1.0, 0.0)
    with pytest.raises(OutOfRange):
        ThermalProfile([0.0, 1.0], [0, 0], 1.0, 1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_discrete_maximum_principle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    z = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 0.4, size=n - 1))])
    temps = rng.uniform(-20, 30, size=n)
    deep = float(rng.uniform(-20, 30))
    temps[-1] = deep
    p = ThermalProfile(z, temps, rng.uniform(0.3, 3.0, size=n - 1), rng.uniform(1e6, 3e6, size=n - 1), deep)
    lo, hi = min(temps.min(), deep), max(temps.max(), deep)
    dt = float(rng.uniform(1.0, 300.0))
    for _ in range(20):
        p = step_profile(p, dt, 0.0)
        assert np.all(p.temperatures >= lo - 1e-9) and np.all(p.temperatures <= hi + 1e-9)


# -- forecast ----------------------------------------------------------------------

def equilibrium_setup():
    m = met(S=150.0, I=300.0, air=3.0, rh=70.0)
    params = SurfaceParams()
    t_eq = equilibrium_surface_temp(m, params)
    cfg = replace(ColumnConfig(), deep_temp=t_eq)
    k, rc = cfg.layers()
    profile = ThermalProfile(cfg.depths, np.full(len(cfg.depths), t_eq), k, rc, t_eq)
    return m, params, t_eq, profile


def test_equilibrium_fixpoint_exact():
    m, params, t_eq, profile = equilibrium_setup()
    assert abs(surface_flux(t_eq, m, params)) < 1e-9
    out = step_profile(profile, 60.0, surface_flux(t_eq, m, params))
    assert np.max(np.abs(out.temperatures - t_eq)) <= 1e-10


def test_constant_meteo_keeps_equilibrium():
    m, params, t_eq, profile = equilibrium_setup()
    seq = SurfaceMeteo(*(np.full(180, v) for v in (m.shortwave_in, m.longwave_in, m.air_temp, m.wind_speed, m.humidity, 0.0)))
    fc = forecast(profile, params, seq)
    for h in (1, 2, 3):
        assert fc.get("road", h) == pytest.approx(t_eq, abs=0.01)
        assert fc.get("underground", h) == pytest.approx(t_eq, abs=0.01)


def test_forecast_is_the_full_grid():
    _, params, _, profile = equilibrium_setup()
    seq = SurfaceMeteo(*(np.full(180, v) for v in (150.0, 300.0, 3.0, 2.0, 70.0, 0.0)))
    fc = forecast(profile, params, seq, recent_air=[1.0, 2.0, 3.0], recent_humidity=[80.0, 79.0, 78.0])
    assert fc.values.shape == (4, 3)
    assert np.all(np.isfinite(fc.values))
    assert [fc.get("air", h) for h in (1, 2, 3)] == [4.0, 5.0, 6.0]
    assert [fc.get("humidity", h) for h in (1, 2, 3)] == [77.0, 76.0, 75.0]


def test_shortwave_drop_cools_monotonically():
    m, params, t_eq, profile = equilibrium_setup()
    n = 180
    dropped = SurfaceMeteo(np.zeros(n), *(np.full(n, v) for v in (300.0, 3.0, 2.0, 70.0, 0.0)))
    fc = forecast(profile, params, dropped)
    road = [fc.get("road", h) for h in (1, 2, 3)]
    assert road[0] < t_eq
    assert road[0] >= road[1] >= road[2]
    # a 6x finer reference run agrees with the same ordering
    fine = SurfaceMeteo(np.zeros(6 * n), *(np.full(6 * n, v) for v in (300.0, 3.0, 2.0, 70.0, 0.0)))
    ref = forecast(profile, params, fine, dt=10.0)
    ref_road = [ref.get("road", h) for h in (1, 2, 3)]
    assert ref_road[0] >= ref_road[1] >= ref_road[2]
    assert np.max(np.abs(np.array(road) - ref_road)) < 0.1


def test_insufficient_meteo():
    _, params, _, profile = equilibrium_setup()
    with pytest.raises(InsufficientMeteo):
        forecast(profile, params, SurfaceMeteo(*(np.full(100, v) for v in (0, 300.0, 3.0, 2.0, 70.0, 0.0))))
    with pytest.raises(InsufficientMeteo):
        trend_forecast([1.0, 2.0], 1)


def test_trend_forecast():
    assert trend_forecast([0.0, 1.0, 4.0], [1, 2, 3]).tolist() == [6.0, 8.0, 10.0]


# -- analysis cycle and batched forecasts ------------------------------------------

def test_analysis_inserts_observations():
    col = AnalysisColumn(ColumnConfig(), SurfaceParams())
    col.assimilate(float("nan"), 4.0)
    assert not col.initialized
    col.assimilate(3.0, 4.0)
    node = int(np.argmin(np.abs(np.asarray(ColumnConfig().depths) - 0.3)))
    assert col.temps[0] == 3.0 and col.temps[node] == 4.0
    row = np.array([0.0, 300.0, 2.0, 2.0, 80.0, 0.0])
    col.advance(row, row)
    col.assimilate(5.0, float("nan"))
    assert col.temps[0] == 5.0 and col.temps[node] != 4.0


def test_physical_forecasts_shape_and_tail(scenario):
    s = scenario.heldout[0]
    phys = physical_forecasts(s)
    assert phys.shape == (len(s), 4, 3)
    assert np.all(np.isnan(phys[-3:, 1:3]))
    assert np.all(np.isfinite(phys[10:-3]))


def test_halving_dt_barely_moves_road_forecasts(scenario):
    s = scenario.heldout[0]
    coarse = physical_forecasts(s, ColumnConfig(dt=60.0))
    fine = physical_forecasts(s, ColumnConfig(dt=30.0))
    ok = np.isfinite(coarse[:, 1, 2])
    assert np.max(np.abs(coarse[ok, 1, 2] - fine[ok, 1, 2])) < 0.05


def test_persistence_trend_channels(scenario):
    s = scenario.heldout[0]
    phys = physical_forecasts(s)
    t = 50
    for ci in (0, 3):
        assert phys[t, ci, :].tolist() == pytest.approx(trend_forecast(s.values[t - 2 : t + 1, ci], [1, 2, 3]).tolist())
