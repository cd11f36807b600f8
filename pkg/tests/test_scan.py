import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstate.scan import (
    ComplexVec,
    DimensionError,
    ScanElement,
    cumulative_sum,
    parallel_scan,
    scan_arrays,
    scan_op,
    sequential_scan,
)


def elem(a, b):
    return ScanElement(ComplexVec.from_complex(a), ComplexVec.from_complex(b))


def test_identity_transition_adds_inputs():
    out = scan_op(elem([1], [2]), elem([1], [3]))
    assert out.a.to_complex()[0] == 1
    assert out.b.to_complex()[0] == 5


def test_zero_transition_forgets_left():
    out = scan_op(elem([0.3 + 2j], [11 - 4j]), elem([0], [7]))
    assert out.b.to_complex()[0] == 7


def test_compose_matches_two_substitutions(rng):
    a1, b1, a2, b2 = (rng.normal(size=4) + 1j * rng.normal(size=4) for _ in range(4))
    s0 = rng.normal(size=4) + 1j * rng.normal(size=4)
    out = scan_op(elem(a1, b1), elem(a2, b2))
    direct = a2 * (a1 * s0 + b1) + b2
    np.testing.assert_allclose(out.a.to_complex() * s0 + out.b.to_complex(), direct, rtol=1e-14)


def test_compose_is_associative(rng):
    es = [elem(rng.normal(size=3) + 1j * rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
    left = scan_op(scan_op(es[0], es[1]), es[2])
    right = scan_op(es[0], scan_op(es[1], es[2]))
    np.testing.assert_allclose(left.b.to_complex(), right.b.to_complex(), rtol=1e-13)
    np.testing.assert_allclose(left.a.to_complex(), right.a.to_complex(), rtol=1e-13)


def test_prefix_sum_case():
    states = parallel_scan([elem([1], [1])] * 3)
    assert [s.to_complex()[0] for s in states] == [1, 2, 3]


def test_single_step_is_input():
    states = parallel_scan([elem([0.5 + 0.5j], [2 - 1j])])
    assert states[0].to_complex()[0] == 2 - 1j


def test_empty_sequence():
    assert parallel_scan([]) == []


def test_mismatched_widths_rejected():
    with pytest.raises(DimensionError):
        scan_op(elem([1, 1], [0, 0]), elem([1], [0]))
    with pytest.raises(DimensionError):
        ComplexVec(np.zeros(2), np.zeros(3))
    with pytest.raises(DimensionError):
        parallel_scan([elem([1], [1]), elem([1, 1], [1, 1])])


def test_random_64x8_matches_loop(rng):
    a = 0.95 * np.exp(1j * rng.uniform(0, 2 * np.pi, (64, 8)))
    b = rng.normal(size=(64, 8)) + 1j * rng.normal(size=(64, 8))
    states = np.stack([s.to_complex() for s in parallel_scan([elem(x, y) for x, y in zip(a, b)])])
    ref = sequential_scan(a, b)
    assert np.max(np.abs(states - ref)) <= 1e-10 * np.max(np.abs(ref))


@settings(max_examples=40, deadline=None)
@given(L=st.integers(1, 300), P=st.integers(1, 6), seed=st.integers(0, 2**16), invariant=st.booleans())
def test_scan_arrays_matches_loop(L, P, seed, invariant):
    r = np.random.default_rng(seed)
    shape = (P,) if invariant else (L, P)
    a = r.uniform(0.5, 1.0, shape) * np.exp(1j * r.uniform(0, 2 * np.pi, shape))
    b = r.normal(size=(L, P)) + 1j * r.normal(size=(L, P))
    got = scan_arrays(a, b)
    ref = sequential_scan(a, b)
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_scan_along_other_axis(rng):
    a = rng.uniform(0.5, 1.0, 5)
    b = rng.normal(size=(2, 37, 5))
    np.testing.assert_allclose(scan_arrays(a, b, axis=1), sequential_scan(a, b, axis=1), rtol=1e-12)


def test_cumulative_sum_examples():
    np.testing.assert_array_equal(cumulative_sum([1, 2, 3]), [1, 3, 6])
    assert cumulative_sum([]).shape == (0,)


def test_cumulative_sum_against_exact_accumulation(rng):
    x = rng.normal(size=100) * 10.0 ** rng.integers(-3, 4, size=100)
    exact = [math.fsum(x[: k + 1]) for k in range(100)]
    np.testing.assert_allclose(cumulative_sum(x), exact, rtol=0, atol=1e-12 * np.abs(x).sum())
