import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freebd import energy as en
from freebd.errors import ConfigurationError, EvaluationError
from freebd.riemann import chart_energy, flat

X2 = np.zeros((1, 2))
Z = np.zeros(1)


def test_quadratic_example():
    spec = en.quadratic(f=1.0, dim=2)
    F, a, a0, H = spec.evaluate(X2, Z, np.array([[1.0, 0.0]]))
    assert F[0] == 1.0
    assert np.array_equal(a[0], [2.0, 0.0])
    assert a0[0] == 2.0
    assert np.array_equal(H[0], 2 * np.eye(2))


def test_area_examples():
    spec = en.area(dim=2)
    F, a, a0, H = spec.evaluate(X2, Z, np.zeros((1, 2)))
    assert F[0] == 1.0 and np.array_equal(a[0], [0, 0]) and np.array_equal(H[0], np.eye(2))
    F, a, a0, H = spec.evaluate(X2, Z, np.array([[1.0, 0.0]]))
    assert np.allclose(a[0], [2 ** -0.5, 0.0], rtol=1e-15)
    assert np.allclose(H[0], np.diag([2 ** -1.5, 2 ** -0.5]), rtol=1e-15)


def _samples(n, count=100):
    t = en.halton_points(2 * n + 1, count)
    box = en.Box(((-1.0, 1.0),) * n, (-1.0, 1.0), 1.5)
    return box.map(t)


def _presets(n):
    A = lambda x: np.stack([np.stack([1 + 0.3 * x[..., 0] ** 2, 0.2 * np.ones(x.shape[:-1])], -1),
                            np.stack([0.2 * np.ones(x.shape[:-1]), 1.5 + 0 * x[..., 0]], -1)], -2)
    out = [en.quadratic(dim=n, f=1.0), en.p_energy(1.5, dim=n), en.p_energy(3.0, dim=n), en.area(dim=n)]
    if n == 2:
        out.append(en.quadratic(A=A, dim=2))
    return out


@pytest.mark.parametrize("n", [1, 2])
def test_derivative_consistency_all_presets(n):
    delta = 1e-4
    x, z, xi = _samples(n)
    for spec in _presets(n):
        err_a, err_h = en.derivative_consistency(spec, x, z, xi, delta)
        # third derivatives of the presets are O(10) on the box
        assert err_a.max() <= 10 * delta ** 2 * 10, spec.name
        assert err_h.max() <= 10 * delta ** 2 * 10 + 1e-9, spec.name


@pytest.mark.parametrize("n", [1, 2])
def test_hessian_symmetric_exactly(n):
    x, z, xi = _samples(n)
    for spec in _presets(n):
        H = spec.eval_hess(x, z, xi)
        assert np.array_equal(H, np.swapaxes(H, -1, -2)), spec.name


def test_p2_reduces_to_quadratic():
    x, z, xi = _samples(2)
    a1 = en.p_energy(2.0, dim=2).eval_a(x, z, xi)
    a2 = en.quadratic(dim=2, f=0.0).eval_a(x, z, xi)
    assert np.array_equal(a1, 2 * xi)
    assert np.array_equal(a2, 2 * xi)


@pytest.mark.parametrize("spec", [en.quadratic(dim=2, f=1.0), en.p_energy(2.0, dim=2), en.p_energy(1.5, dim=2),
                                  en.p_energy(4.0, dim=1), en.area(dim=2, xi_max=1.0), en.area(dim=1, xi_max=2.0)])
def test_presets_pass_their_own_hypotheses(spec):
    xi_r = spec.params.get("xi_max", 3.0)
    rep = en.check_hypotheses(spec, en.Box(((-1.0, 1.0),) * spec.dim, (-1.0, 1.0), xi_r), 2048)
    assert rep.passed, rep.as_dict()
    for r in rep.records:
        assert (r.verdict == "fail") == (r.margin < 0)


def test_quadratic_funcvx_margin():
    spec = en.quadratic(dim=2, f=1.0)
    rep = en.check_hypotheses(spec, en.Box(((-1.0, 1.0),) * 2), 512)
    # hessian 2I and nu = 2: the upper side is tight
    assert rep["Funcvx"].verdict == "pass"
    assert abs(rep["Funcvx"].margin) < 1e-12


def test_area_fails_on_large_gradients():
    spec = en.area(dim=2, xi_max=1.0)
    rep = en.check_hypotheses(spec, en.Box(((-1.0, 1.0),) * 2, (-1.0, 1.0), 10.0), 4096)
    assert rep["H2'"].verdict == "fail"
    assert rep["Funcvx"].verdict == "fail"
    assert np.linalg.norm(rep["Funcvx"].worst_point["xi"]) > 1.0


def test_report_records_sample_count_and_box():
    box = en.Box(((-1.0, 1.0),))
    rep = en.check_hypotheses(en.area(dim=1), box, 100)
    d = rep.as_dict()
    assert d["n_samples"] == 100
    assert set(d["checks"]) == {"H1ii", "H1iii'", "H2'", "Fgrowth", "Funcvx"}


def test_invalid_parameters_name_fields():
    with pytest.raises(ConfigurationError, match="problem.p"):
        en.p_energy(1.0)
    with pytest.raises(ConfigurationError, match="problem.A"):
        en.quadratic(A=np.array([[1.0, 2.0], [0.0, 1.0]]), dim=2)
    with pytest.raises(ConfigurationError, match="problem.A"):
        en.quadratic(A=-np.eye(2), dim=2)
    with pytest.raises(ConfigurationError, match="problem.kind"):
        en.make_preset("cubic")
    with pytest.raises(ConfigurationError):
        en.check_hypotheses(en.area(dim=1), en.Box(((-1.0, 1.0),)), 0)


def test_make_preset_dispatch():
    assert en.make_preset("quadratic", dim=1).name == "quadratic"
    assert en.make_preset("p_energy", p=3.0, dim=1).name == "p_energy"
    assert en.make_preset("area", dim=2).name == "area"
    assert en.make_preset("custom_field", dim=1).name == "custom_field"
    spec = en.make_preset("riemann_area", metric=flat(2))
    assert spec.name == "riemann_area" and not spec.variational and spec.locally_coercive


def test_non_finite_callback_is_reported():
    spec = en.p_energy(0.5 + 1.0, dim=1)
    bad = en.EnergySpec(1, spec.eval_F, lambda x, z, xi: np.full(xi.shape, np.nan), spec.eval_a0, spec.eval_hess,
                        spec.growth)
    with pytest.raises(EvaluationError):
        bad.evaluate(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)))


def test_custom_field_variational_flag():
    f = lambda x, z: 1.0 + 0.0 * z
    f.z_free = True
    assert en.custom_field(a0=f, dim=1).variational
    g = lambda x, z: 1.0 + z
    assert not en.custom_field(a0=g, dim=1).variational
    spec = en.custom_field(A=np.diag([1.0, 2.0]), a0=3.0, dim=2)
    _, a, a0, H = spec.evaluate(X2, Z, np.array([[1.0, 1.0]]))
    assert np.array_equal(a[0], [1.0, 2.0]) and a0[0] == 3.0 and np.array_equal(H[0], np.diag([1.0, 2.0]))


def test_riemann_chart_energy_flat_field():
    spec = chart_energy(flat(2))
    x, z, xi = _samples(2)
    xi = 0.3 * xi
    a = spec.eval_a(x, z, xi)
    assert np.allclose(a, xi / (1 + np.sum(xi * xi, -1))[:, None], atol=1e-14)
    assert np.allclose(spec.eval_F(x, z, xi), np.sqrt(1 + np.sum(xi * xi, -1)), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.2, 4.0), st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_p_energy_monotone_field(p, v):
    spec = en.p_energy(p, dim=2)
    xi, eta = np.array([v[:2]]), np.array([v[2:]])
    x = np.zeros((1, 2))
    z = np.zeros(1)
    d = xi - eta
    lhs = np.sum((spec.eval_a(x, z, xi) - spec.eval_a(x, z, eta)) * d)
    assert lhs >= -1e-12
