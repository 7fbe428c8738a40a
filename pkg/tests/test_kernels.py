import dataclasses
import os
import subprocess
import sys

import numpy as np
import pytest

from rmparametrix import kernels
from rmparametrix.chains import simulate_V
from rmparametrix.diffusions import (simulate_coupled_limit_and_cutoff, simulate_cutoff_sde)
from rmparametrix.flows import DriftField
from rmparametrix.model import INNOVATIONS, build_grid, harmonic_schedule, sine_model

needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None,
                                    reason="compiled extension not built")

MODEL = sine_model(1.0, 0.2, sigma=1.0, theta0=1.0)


@pytest.fixture(scope="module")
def field():
    return DriftField.build(MODEL, build_grid(harmonic_schedule(40, 0.5)))


def field_args(f):
    return f.theta_bar, f.sqrt_gamma, f.alpha, f.ratio


def test_python_backend_is_always_available():
    assert kernels.active("python") is kernels.python_backend
    assert kernels.backend_name("python") == "python"


def test_environment_forces_fallback():
    code = "from rmparametrix import kernels; print(kernels.backend_name())"
    env = dict(os.environ, RMPARAMETRIX_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_backend_is_default():
    if os.environ.get("RMPARAMETRIX_BACKEND", "").lower() == "python":
        pytest.skip("fallback forced by the environment")
    assert kernels.backend_name() == "compiled"


@needs_compiled
def test_v_chain_backends_agree(field):
    rng = np.random.default_rng(0)
    noise = np.ascontiguousarray(rng.standard_normal((field.grid.m_of_n, 500)))
    x0 = rng.uniform(-3, 3, 500)
    out = []
    for mod in (kernels.compiled_backend, kernels.python_backend):
        x = x0.copy()
        mod.v_chain(x, noise, 0, *field_args(field), field.next_gamma, field.a_N, 1.0, 0.2, 1.0)
        out.append(x)
    np.testing.assert_allclose(out[0], out[1], rtol=1e-12, atol=1e-12)


@needs_compiled
def test_uv_chain_backends_agree(field):
    rng = np.random.default_rng(1)
    M = field.grid.m_of_n
    noise = np.ascontiguousarray(rng.standard_normal((M, 400)))
    beta = rng.normal(0, 0.01, M + 1)
    out = []
    for mod in (kernels.compiled_backend, kernels.python_backend):
        u, v = np.zeros(400), np.zeros(400)
        gap, stopped = np.zeros(400), np.zeros(400)
        exited = np.zeros(400, dtype=np.uint8)
        mod.uv_chain(u, v, gap, stopped, exited, noise, 0, *field_args(field), field.next_gamma,
                     beta, 1.5, 1.0, 0.2, 1.0)
        out.append((u, v, gap, stopped, exited))
    for a, b in zip(*out):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    assert out[0][4].any() and not out[0][4].all()


@needs_compiled
def test_em_kernels_backends_agree(field):
    rng = np.random.default_rng(2)
    steps = 3 * field.grid.m_of_n
    normals = np.ascontiguousarray(rng.standard_normal((steps, 300)))
    cells = np.ascontiguousarray(np.repeat(np.arange(field.grid.m_of_n), 3), dtype=np.int_)
    dts = np.ascontiguousarray(np.repeat(field.next_gamma[:-1], 3) / 3)
    x0 = rng.uniform(-2, 2, 300)
    res = []
    for mod in (kernels.compiled_backend, kernels.python_backend):
        x = x0.copy()
        blown = mod.em_cutoff(x, normals, cells, dts, *field_args(field), field.a_N, 1.0, 0.2,
                              1.0, 2.5)
        lin = x0.copy()
        mod.em_linear(lin, normals, np.linspace(-0.5, -0.4, steps), dts, 1.0)
        res.append((x, blown, lin))
    np.testing.assert_allclose(res[0][0], res[1][0], rtol=1e-12, atol=1e-12)
    assert res[0][1] == res[1][1] > 0
    np.testing.assert_allclose(res[0][2], res[1][2], rtol=1e-12, atol=1e-12)


@needs_compiled
def test_simulators_agree_across_backends(field):
    inn = INNOVATIONS["logistic"]()
    a = simulate_V(field, inn, 0.3, 2000, 5, backend="compiled").paths
    b = simulate_V(field, inn, 0.3, 2000, 5, backend="python").paths
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    a = simulate_cutoff_sde(field, 0.0, 0.3, 2000, 6, backend="compiled")
    b = simulate_cutoff_sde(field, 0.0, 0.3, 2000, 6, backend="python")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    a = simulate_coupled_limit_and_cutoff(field, 0.0, 0.3, 2000, 7, backend="compiled")
    b = simulate_coupled_limit_and_cutoff(field, 0.0, 0.3, 2000, 7, backend="python")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_generic_drift_path_matches_family_path(field):
    # a model without the slope/sine tag runs the plain numpy loop over F_N
    generic = dataclasses.replace(MODEL, family=None)
    gfield = DriftField(generic, field.grid, field.flows, field.a_N)
    inn = INNOVATIONS["gaussian"]()
    a = simulate_V(field, inn, -0.4, 2000, 8).paths
    b = simulate_V(gfield, inn, -0.4, 2000, 8).paths
    np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)
