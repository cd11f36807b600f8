import numpy as np
import pytest

from flowstate import autodiff as ad
from flowstate.gradcheck import (
    FLOOR,
    TOLERANCE,
    check_model,
    check_primitives,
    check_rule,
    primitive_cases,
    rel_error,
    run_gradcheck,
)


def test_quadratic_gradient(rng):
    p = rng.normal(size=(3, 4))
    tape = ad.Tape()
    v = tape.leaf(p)
    (g,) = tape.backward(ad.sum(v * v), [v])
    np.testing.assert_array_equal(g, 2 * p)


def test_unused_parameter_has_zero_gradient(rng):
    tape = ad.Tape()
    a, b = tape.leaf(rng.normal(size=3)), tape.leaf(rng.normal(size=3))
    ga, gb = tape.backward(ad.sum(ad.exp(a)), [a, b])
    assert np.all(gb == 0.0)
    np.testing.assert_allclose(ga, np.exp(a.value))


def test_plain_arrays_bypass_tape(rng):
    x = rng.normal(size=4)
    out = ad.gelu(ad.mul(x, 2.0))
    assert isinstance(out, np.ndarray)


def test_complex_convention_for_abs_squared():
    # L = |z|^2 -> dL/dRe + i dL/dIm = 2z
    z0 = np.array([1.5 - 0.5j])
    tape = ad.Tape()
    z = tape.leaf(z0)
    re = ad.real(z)
    im = ad.real(ad.mul(z, -1j))
    (g,) = tape.backward(ad.sum(re * re + im * im), [z])
    np.testing.assert_allclose(g, 2 * z0)


def test_structure_errors(rng):
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf(rng.normal(size=3))
    b = t2.leaf(rng.normal(size=3))
    with pytest.raises(ad.StructureError):
        t1.backward(ad.sum(a), [b])
    with pytest.raises(ad.StructureError):
        t1.backward(a, [a])
    with pytest.raises(ad.StructureError):
        t1.vjp(a, np.ones(4), [a])


@pytest.mark.parametrize("q,y,yhat,expect", [(0.5, 2, 1, 0.5), (0.9, 2, 1, 0.9), (0.9, 1, 2, 0.1)])
def test_pinball_examples(q, y, yhat, expect):
    assert float(ad.pinball_loss(np.array([[yhat]], float), np.array([y], float), [q])) == pytest.approx(expect)


def test_pinball_zero_and_invalid_levels(rng):
    y = rng.normal(size=5)
    assert float(ad.pinball_loss(np.repeat(y[:, None], 3, 1), y, (0.1, 0.5, 0.9))) == 0.0
    with pytest.raises(ValueError):
        ad.pinball_loss(np.zeros((2, 1)), np.zeros(2), [1.0])


def test_zoh_limit_rule():
    lam = np.array([0.0 + 0j, 5e-13 + 0j, -1.0 + 0j])
    dt = np.array([0.1, 0.2, np.log(2.0)])
    out = ad.zoh_scale(lam, dt)
    assert out[0] == 0.1
    assert out[1] == 0.2
    assert out[2] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("case", [c[0] for c in primitive_cases(np.random.default_rng(0))])
def test_primitive_gradcheck(case):
    (res,) = check_primitives(0, only=[case])
    assert res.coords > 0
    assert res.max_rel_error <= TOLERANCE, f"{case}: {res.max_rel_error:.3e}"


def test_every_rule_is_exercised():
    seen = set()
    for _, fn, inputs in primitive_cases(np.random.default_rng(0)):
        tape = ad.Tape()
        fn(*[tape.leaf(x) for x in inputs])
        seen |= {node.op for node in tape.nodes}
    assert set(ad.VJP) <= seen, sorted(set(ad.VJP) - seen)


def test_full_model_gradcheck():
    res = check_model(0)
    assert res.coords > 500
    assert res.skipped < res.coords // 10
    assert res.passed, f"{res.max_rel_error:.3e}"


def test_corrupted_rule_is_caught(monkeypatch):
    good = ad.VJP["gelu"]
    monkeypatch.setitem(ad.VJP, "gelu", lambda g, ctx, xs: tuple(1.01 * x for x in good(g, ctx, xs)))
    report = run_gradcheck(0)
    failed = {r.name for r in report.results if not r.passed}
    assert "gelu" in failed and "full_model" in failed
    assert not report.passed


def test_corrupted_scan_rule_is_caught(monkeypatch):
    good = ad.VJP["linear_scan"]

    def bad(g, ctx, xs):
        ga, gb = good(g, ctx, xs)
        return np.conj(ga), gb

    monkeypatch.setitem(ad.VJP, "linear_scan", bad)
    assert not check_primitives(0, only=["linear_scan"])[0].passed


def test_report_lists_each_check():
    report = run_gradcheck(1, include_model=False)
    lines = report.lines()
    assert len(lines) == len(report.results) + 1
    assert all(("PASS" in ln or "FAIL" in ln) for ln in lines[1:])
    assert report.passed


def test_rel_error_floor():
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-12 / FLOOR)
    assert rel_error(2.0, 1.0) == 0.5


def test_check_rule_on_custom_function(rng):
    res = check_rule("poly", lambda x: ad.mul(ad.mul(x, x), x), [rng.normal(size=4)], rng)
    assert res.passed


@pytest.mark.parametrize("lam,dt", [(2e-12, 0.05), (1e-9 - 3e-9j, 0.1), (-5e-5, 1.0), (-9.9e-4, 1.0),
                                    (-1.01e-3, 1.0), (5e-4j, 1.9), (-0.3 + 4j, 0.01), (-40 + 300j, 0.1)])
def test_zoh_scale_high_precision(lam, dt):
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    L = mpmath.mpc(complex(lam).real, complex(lam).imag)
    ref = complex((mpmath.exp(L * dt) - 1) / L)
    got = ad.zoh_scale(np.array([complex(lam)]), np.array([dt]))[0]
    assert abs(got - ref) <= 1e-13 * abs(ref)
