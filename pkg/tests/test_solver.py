import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from nsstab.fields import (
    BoxSpec,
    PhysicalVectorField,
    SpectralVectorField,
    forward_transform,
    gradient,
    inner_product,
    project_coeffs,
    relative_divergence,
    to_physical,
    to_spectral,
)
from nsstab.solver import (
    Forcing,
    SolverAbort,
    SolverConfig,
    SolverState,
    cfl_timestep,
    load_checkpoint,
    march,
    max_wavenumber,
    nonlinear_term,
    run,
    save_checkpoint,
    set_viscosity_sign,
    step,
)


def physical(box, fn):
    X, Y, Z = box.grid()
    comps = [np.broadcast_to(c, box.resolution) for c in fn(X, Y, Z)]
    return forward_transform(PhysicalVectorField(np.stack(comps).astype(float), box))


def taylor_green(box, amp=1.0):
    return physical(
        box, lambda X, Y, Z: (amp * np.sin(X) * np.cos(Y), -amp * np.cos(X) * np.sin(Y), 0 * X)
    )


def random_solenoidal(box, seed, amp=1.0, two_d=False):
    """Random divergence-free field band-limited inside the dealiasing mask."""
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (3,) + box.spectral_shape
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.exp(-0.2 * box.k2)
    if two_d:
        c[:, :, :, 1:] = 0
    # round trip through physical space restores exact Hermitian symmetry
    c = to_spectral(to_physical(c, box), box)
    c = project_coeffs(c * box.dealias_mask, box)
    c[:, 0, 0, 0] = 0
    f = SpectralVectorField(c, box, divergence_free=True)
    return f * (amp / f.l2_norm())


BOX16 = BoxSpec.cube(16)
BOX32 = BoxSpec.cube(32)


class TestConfig:
    def test_defaults(self):
        cfg = SolverConfig(nu=0.1, t_end=1.0)
        assert cfg.dt == "auto" and cfg.cfl == 0.5 and cfg.record_every == 1 and cfg.dealias

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(nu=0.0),
            dict(nu=-1.0),
            dict(nu=float("nan")),
            dict(t_end=-1.0),
            dict(dt=0.0),
            dict(dt="fast"),
            dict(cfl=0.0),
            dict(cfl=1.5),
            dict(record_every=0),
            dict(dt_max=0.0),
        ],
    )
    def test_rejects_invalid(self, kwargs):
        base = dict(nu=0.1, t_end=1.0)
        base.update(kwargs)
        with pytest.raises(ValueError):
            SolverConfig(**base)

    def test_hash_is_stable_and_sensitive(self):
        a = SolverConfig(nu=0.1, t_end=1.0)
        assert a.config_hash() == SolverConfig(nu=0.1, t_end=1.0).config_hash()
        assert a.config_hash() != SolverConfig(nu=0.1, t_end=2.0).config_hash()


class TestNonlinearTerm:
    def test_taylor_green_is_pure_gradient(self):
        n = nonlinear_term(taylor_green(BOX16))
        assert n.norm_max() < 1e-13

    def test_single_shear_mode_has_no_nonlinearity(self):
        v = physical(BOX16, lambda X, Y, Z: (0 * X, np.sin(X), 0 * X))
        assert nonlinear_term(v).norm_max() < 1e-14

    def test_matches_advective_form_for_band_limited_field(self):
        # -(v.grad)v projected, computed in physical space without the rotational identity
        v = random_solenoidal(BOX16, seed=3)
        vel = to_physical(v.coeffs, BOX16)
        grad = to_physical(gradient(v.coeffs, BOX16).reshape(9, *BOX16.spectral_shape), BOX16)
        grad = grad.reshape(3, 3, *BOX16.resolution)
        adv = -np.einsum("j...,ij...->i...", vel, grad)
        expected = project_coeffs(to_spectral(adv, BOX16) * BOX16.dealias_mask, BOX16)
        got = nonlinear_term(v).coeffs
        assert np.abs(got - expected).max() < 1e-12 * np.abs(expected).max()

    def test_output_divergence_free(self):
        n = nonlinear_term(random_solenoidal(BOX16, seed=4))
        assert relative_divergence(n) < 1e-13

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), amp=st.floats(0.1, 10.0))
    def test_skew_symmetry(self, seed, amp):
        v = random_solenoidal(BOX16, seed, amp)
        n = nonlinear_term(v)
        assert abs(inner_product(n, v)) <= 1e-11 * n.l2_norm() * v.l2_norm()

    def test_non_finite_input_aborts(self):
        c = random_solenoidal(BOX16, 1).coeffs.copy()
        c[0, 1, 0, 0] = np.nan
        with pytest.raises(SolverAbort, match="blow-up or instability detected at t"):
            nonlinear_term(SpectralVectorField(c, BOX16), t=0.25)


class TestTimestep:
    def test_cfl_bound(self):
        v = random_solenoidal(BOX16, 7, amp=20.0)
        cfg = SolverConfig(nu=0.1, t_end=1.0, cfl=0.4)
        dt = cfl_timestep(v, cfg)
        speed = np.sqrt((to_physical(v.coeffs, BOX16) ** 2).sum(0)).max()
        assert dt * max_wavenumber(BOX16) * speed == pytest.approx(0.4, rel=1e-12)

    def test_rest_state_uses_dt_max(self):
        cfg = SolverConfig(nu=0.1, t_end=1.0, dt_max=0.05)
        assert cfl_timestep(SpectralVectorField.zeros(BOX16), cfg) == 0.05

    def test_fixed_dt_passes_through(self):
        cfg = SolverConfig(nu=0.1, t_end=1.0, dt=0.01)
        assert cfl_timestep(random_solenoidal(BOX16, 1), cfg) == 0.01

    def test_collapsed_step_aborts(self):
        v = random_solenoidal(BOX16, 7, amp=1e8)
        with pytest.raises(SolverAbort, match="time step collapsed"):
            step(SolverState(0.0, v), SolverConfig(nu=0.1, t_end=1.0))

    def test_max_wavenumber_is_nyquist(self):
        assert max_wavenumber(BoxSpec((2 * math.pi, math.pi, 2 * math.pi), (16, 16, 8))) == 16.0


class TestRun:
    def test_rest_state_stays_at_rest(self):
        series = run(SpectralVectorField.zeros(BOX16), SolverConfig(nu=0.1, t_end=1.0))
        assert series.t[-1] == 1.0
        assert np.all(series.column("energy") == 0.0)

    def test_zero_horizon_gives_single_sample(self):
        series = run(taylor_green(BOX16), SolverConfig(nu=0.1, t_end=0.0))
        assert len(series) == 1 and series.t[0] == 0.0

    def test_viscous_mode_decays_exactly(self):
        amp, nu = 0.7, 0.3
        v0 = physical(BOX16, lambda X, Y, Z: (0 * X, amp * np.sin(X), 0 * X))
        out = {}

        def observer(sample):
            out[sample.t] = sample.velocity.data[1].copy()
            return {"energy": 0.0}

        run(v0, SolverConfig(nu=nu, t_end=2.0, dt=0.1), observer=observer)
        X, _, _ = BOX16.grid()
        for t, vy in out.items():
            exact = amp * math.exp(-nu * t) * np.sin(X)
            assert np.abs(vy - exact[:, :, :]).max() < 1e-10

    def test_taylor_green_decay(self):
        nu = 0.1
        v0 = taylor_green(BOX32)
        got = {}

        def observer(sample):
            got["v"] = sample.velocity.data.copy()
            return {"energy": 0.0}

        run(v0, SolverConfig(nu=nu, t_end=1.0), observer=observer)
        exact = to_physical(v0.coeffs, BOX32) * math.exp(-2 * nu)
        err = np.sqrt(np.mean(np.sum((got["v"] - exact) ** 2, axis=0)))
        assert err / np.sqrt(np.mean(np.sum(exact**2, axis=0))) < 1e-8

    def test_records_start_stride_and_end(self):
        cfg = SolverConfig(nu=0.1, t_end=0.35, dt=0.1, record_every=2)
        series = run(taylor_green(BOX16), cfg)
        assert series.t == pytest.approx([0.0, 0.2, 0.35])
        assert series.t[-1] == 0.35

    def test_energy_nonincreasing_and_identity(self):
        v0 = random_solenoidal(BOX16, 11, amp=3.0)
        nu = 0.05
        series = run(v0, SolverConfig(nu=nu, t_end=1.0, dt=0.01))
        E = series.column("energy")
        assert np.all(np.diff(E) <= 1e-14 * E[0])
        D = series.column("dissipation")
        lhs = E[-1] - E[0] + 2 * nu * trapezoid(D, series.t)
        assert abs(lhs) / E[0] < 1e-4

    def test_two_dimensional_data_stays_two_dimensional(self):
        v0 = random_solenoidal(BOX16, 5, amp=2.0, two_d=True)
        state = SolverState(0.0, v0)
        cfg = SolverConfig(nu=0.02, t_end=0.5)
        final = march([state], cfg, lambda s: None)[0]
        assert np.abs(final.v_hat.coeffs[:, :, :, 1:]).max() == 0.0
        assert final.v_hat.l2_norm() > 0.5 * v0.l2_norm()

    def test_non_solenoidal_input_warns_and_projects(self):
        v = physical(BOX16, lambda X, Y, Z: (np.sin(X), 0 * X, 0 * X))
        with pytest.warns(UserWarning, match="not divergence-free"):
            series = run(v, SolverConfig(nu=0.1, t_end=0.1))
        assert series.column("energy")[0] < 1e-25

    def test_observer_sees_read_only_arrays(self):
        def observer(sample):
            with pytest.raises(ValueError):
                sample.v_hat.coeffs[0, 0, 0, 0] = 1.0
            with pytest.raises(ValueError):
                sample.velocity.data[0, 0, 0, 0] = 1.0
            return {"energy": 0.0}

        run(taylor_green(BOX16), SolverConfig(nu=0.1, t_end=0.1), observer=observer)

    def test_abort_carries_partial_series(self):
        # a huge field with a fixed large step blows up
        v0 = random_solenoidal(BOX16, 2, amp=1e4)
        cfg = SolverConfig(nu=1e-3, t_end=10.0, dt=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(SolverAbort) as info:
                run(v0, cfg)
        assert "blow-up or instability detected at t" in str(info.value)
        assert info.value.series is not None and len(info.value.series) >= 1

    def test_energy_growth_without_forcing_aborts(self):
        set_viscosity_sign(-1.0)
        try:
            with pytest.raises(SolverAbort, match="energy of an unforced flow grew") as info:
                run(taylor_green(BOX16), SolverConfig(nu=0.1, t_end=1.0))
        finally:
            set_viscosity_sign(1.0)
        assert len(info.value.series) == 1

    def test_forced_growth_is_allowed(self):
        # a steady force pumps energy into a fluid at rest
        f = Forcing(taylor_green(BOX16))
        series = run(SolverState(0.0, SpectralVectorField.zeros(BOX16), f), SolverConfig(nu=0.1, t_end=0.5))
        assert np.all(np.diff(series.column("energy")) > 0)


class TestForcing:
    def test_kinds(self):
        f = taylor_green(BOX16)
        assert Forcing().kind == "zero"
        assert Forcing(f).kind == "steady"
        assert Forcing(f, 0.5, 2.0).kind == "modulated"
        assert Forcing().coeffs_at(1.0) is None

    def test_modulation(self):
        f = taylor_green(BOX16)
        forcing = Forcing(f, 0.5, 2.0)
        ratio = forcing.coeffs_at(0.3)[0, 1, 1, 0] / f.coeffs[0, 1, 1, 0]
        assert ratio == pytest.approx(1 + 0.5 * math.sin(0.6), rel=1e-14)

    def test_steady_forcing_balances_viscosity(self):
        # F = nu |k|^2 v for a Taylor-Green eigenmode keeps it steady
        nu = 0.1
        v0 = taylor_green(BOX16)
        forcing = Forcing(v0 * (2 * nu))
        series = run(v0, SolverConfig(nu=nu, t_end=1.0), forcing=forcing)
        E = series.column("energy")
        assert np.abs(E / E[0] - 1).max() < 1e-10


class TestRestart:
    @pytest.mark.parametrize("dt", [0.02, "auto"])
    def test_checkpoint_restart_is_bit_exact(self, tmp_path, dt):
        v0 = random_solenoidal(BOX16, 9, amp=2.0)
        cfg = SolverConfig(nu=0.05, t_end=0.6, dt=dt, record_every=3)
        full = run(v0, cfg)

        saved = {}

        def capture(states):
            if states[0].step_index == 6:
                saved["path"] = save_checkpoint(tmp_path / "ck.npz", states[0], cfg)

        march([SolverState(0.0, v0)], cfg, capture)
        resumed_state = load_checkpoint(saved["path"], cfg)
        assert resumed_state.step_index == 6
        tail = run(resumed_state, cfg)
        n = len(tail)
        assert tail.t.tolist() == full.t[-n:].tolist()
        for name in full.names:
            assert tail.column(name).tolist() == full.column(name)[-n:].tolist()

    def test_checkpoint_rejects_other_config(self, tmp_path):
        cfg = SolverConfig(nu=0.05, t_end=0.6)
        path = save_checkpoint(tmp_path / "ck.npz", SolverState(0.1, taylor_green(BOX16)), cfg)
        with pytest.raises(ValueError, match="different solver config"):
            load_checkpoint(path, SolverConfig(nu=0.06, t_end=0.6))

    def test_repeat_runs_identical(self):
        v0 = random_solenoidal(BOX16, 21, amp=2.0)
        cfg = SolverConfig(nu=0.05, t_end=0.3)
        a, b = run(v0, cfg), run(v0, cfg)
        assert a.t.tolist() == b.t.tolist()
        assert all(a.column(k).tolist() == b.column(k).tolist() for k in a.names)


class TestStep:
    def test_step_is_pure(self):
        v0 = random_solenoidal(BOX16, 1)
        before = v0.coeffs.copy()
        state = SolverState(0.0, v0)
        new = step(state, SolverConfig(nu=0.1, t_end=1.0), 0.01)
        assert np.array_equal(v0.coeffs, before)
        assert new.t == 0.01 and new.step_index == 1

    def test_fourth_order_convergence(self):
        v0 = random_solenoidal(BOX16, 13, amp=3.0)
        cfg = SolverConfig(nu=0.02, t_end=0.4)

        def final(dt):
            s = SolverState(0.0, v0)
            for _ in range(round(0.4 / dt)):
                s = step(s, cfg, dt)
            return s.v_hat

        ref = final(0.0025)
        e1 = (final(0.04) - ref).l2_norm()
        e2 = (final(0.02) - ref).l2_norm()
        assert 12 < e1 / e2 < 20
