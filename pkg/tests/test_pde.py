import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biorth.pde import (Grid2D, NonPositiveDiffusivity, SourceSpec, StepFailure, diffusion_apply, rk4_step,
                        solve_deterministic, source_field, step_count)
from biorth.problem import prior_mean_diffusivity


def test_grid_basics():
    g = Grid2D.square(101)
    assert g.h == pytest.approx(0.02)
    assert g.integrate(np.ones(g.shape)) == pytest.approx(4.0)
    assert g.nearest_node((0.2, -0.2)) == (60, 40)
    with pytest.raises(ValueError):
        Grid2D(2, 5, 0.1)


def test_diffusion_apply_examples():
    g = Grid2D.square(21)
    X, Y = g.mesh
    assert np.allclose(diffusion_apply(np.ones(g.shape), np.full(g.shape, 3.0), g.h), 0.0)
    c = 0.7
    r = diffusion_apply(np.full(g.shape, c), X**2, g.h)
    assert np.allclose(r[1:-1, :], 2 * c)
    with pytest.raises(NonPositiveDiffusivity):
        diffusion_apply(-np.ones(g.shape), X, g.h)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conservation(seed):
    # the flux form telescopes: the trapezoid-weighted sum of the operator vanishes
    rng = np.random.default_rng(seed)
    g = Grid2D.square(int(rng.integers(5, 25)))
    nu = 0.5 + rng.random(g.shape)
    u = rng.standard_normal(g.shape)
    r = diffusion_apply(nu, u, g.h)
    assert abs(g.integrate(r)) <= 1e-12 * g.integrate(np.abs(r))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_self_adjoint_in_weighted_inner_product(seed):
    rng = np.random.default_rng(seed)
    g = Grid2D.square(9)
    nu = 0.5 + rng.random(g.shape)
    a, b = rng.standard_normal((2,) + g.shape)
    lhs = g.inner(diffusion_apply(nu, a, g.h), b)
    rhs = g.inner(a, diffusion_apply(nu, b, g.h))
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-11)
    assert g.inner(diffusion_apply(nu, a, g.h), a) <= 1e-12


def manufactured_errors(sizes=(11, 21, 41, 81)):
    errs = []
    pi = math.pi
    for n in sizes:
        g = Grid2D.square(n)
        X, Y = g.mesh
        nu = 2.0 + 0.5 * np.cos(pi * X) + 0.3 * np.cos(pi * Y)
        u = np.cos(pi * X) * np.cos(pi * Y)
        ux = -pi * np.sin(pi * X) * np.cos(pi * Y)
        uy = -pi * np.cos(pi * X) * np.sin(pi * Y)
        nux = -0.5 * pi * np.sin(pi * X)
        nuy = -0.3 * pi * np.sin(pi * Y)
        exact = nux * ux + nuy * uy + nu * (-2 * pi**2 * u)
        errs.append(np.max(np.abs(diffusion_apply(nu, u, g.h) - exact)))
    hs = [2.0 / (n - 1) for n in sizes]
    return np.array(hs), np.array(errs)


def test_spatial_order():
    hs, errs = manufactured_errors()
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(order - 2.0) <= 0.2


def rk4_errors(dts=(0.1, 0.05, 0.025)):
    errs = []
    for dt in dts:
        u = np.array(1.0)
        for n in range(step_count(1.0, dt)):
            u = rk4_step(u, lambda t, v: -v, n * dt, dt)
        errs.append(abs(float(u) - math.exp(-1.0)))
    return np.array(dts), np.array(errs)


def test_rk4():
    u = rk4_step(np.array(1.0), lambda t, v: -v, 0.0, 0.1)
    assert abs(float(u) - math.exp(-0.1)) <= 1e-7
    s = (np.ones(3), np.arange(3.0))
    out = rk4_step(s, lambda t, v: (np.zeros(3), np.zeros(3)), 0.0, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(out, s))
    dts, errs = rk4_errors()
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert abs(order - 4.0) <= 0.2
    with pytest.raises(StepFailure):
        rk4_step(np.array(1.0), lambda t, v: v * np.inf, 0.0, 0.1)


def test_source_field():
    g = Grid2D.square(101)
    src = SourceSpec()
    S = source_field(src, (0.2, -0.2), g)
    i, j = g.nearest_node((0.2, -0.2))
    assert S[i, j] == pytest.approx(1 / (2 * math.pi * 0.01))
    assert S.sum() * g.h**2 == pytest.approx(1.0, rel=0.02)
    zero = source_field(SourceSpec(strength=0.0), (0.2, -0.2), g)
    assert np.all(zero == 0)


def test_solver_trivial_cases():
    g = Grid2D.square(11)
    nu = prior_mean_diffusivity(g)
    src = SourceSpec()
    assert np.all(solve_deterministic(nu, src, (0, 0), g, 0.0, 1e-3)[0.0] == 0)
    out = solve_deterministic(nu, SourceSpec(strength=0.0), (0, 0), g, 0.01, 1e-3)
    assert np.all(out[0.01] == 0)
    with pytest.raises(ValueError):
        solve_deterministic(nu, src, (0, 0), g, 0.0105, 1e-3)


def test_solver_paper_configuration():
    g = Grid2D.square(41)
    nu = prior_mean_diffusivity(g)
    src = SourceSpec()
    out = solve_deterministic(nu, src, (0.2, -0.2), g, 0.05, 5e-4, record_times=(0.01,))
    u1, u5 = out[0.01], out[0.05]
    peak = np.unravel_index(np.argmax(u5), g.shape)
    assert abs(g.x[peak[0]] - 0.2) <= g.h and abs(g.y[peak[1]] + 0.2) <= g.h
    assert u5.max() < u1.max()  # diffuses outward after switch-off
    # total mass equals the injected mass
    injected = 0.01 * g.integrate(source_field(src, (0.2, -0.2), g))
    assert g.integrate(u5) == pytest.approx(injected, rel=1e-10)


def test_batched_solver_matches_single():
    g = Grid2D.square(11)
    rng = np.random.default_rng(0)
    nu = prior_mean_diffusivity(g)[None] * (1 + 0.1 * rng.random((3, 1, 1)))
    z = rng.uniform(-0.3, 0.3, (3, 2))
    batch = solve_deterministic(nu, SourceSpec(), z, g, 0.02, 1e-3)[0.02]
    for k in range(3):
        one = solve_deterministic(nu[k], SourceSpec(), z[k], g, 0.02, 1e-3)[0.02]
        assert np.allclose(batch[k], one, rtol=1e-13, atol=1e-15)
