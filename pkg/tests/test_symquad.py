"""Half-vectorization and quadratic-form bookkeeping."""

import numpy as np
import pytest

from slqt.symquad import (duplication, h_form, h_form_rows, kron_vec,
                          quad_basis, unvec, unvech, vec, vech, vech_indices,
                          vech_rows)


def random_sym(rng, n):
    M = rng.standard_normal((n, n))
    return 0.5 * (M + M.T)


def test_vech_roundtrip():
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        P = random_sym(rng, n)
        v = vech(P)
        assert v.shape == (n * (n + 1) // 2,)
        np.testing.assert_array_equal(unvech(v, n), P)


def test_vech_ordering_is_row_major_upper_triangle():
    P = np.array([[1.0, 2.0, 3.0],
                  [2.0, 4.0, 5.0],
                  [3.0, 5.0, 6.0]])
    np.testing.assert_array_equal(vech(P), [1, 2, 3, 4, 5, 6])


def test_vec_is_column_major():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(vec(M), [1, 3, 2, 4])
    np.testing.assert_array_equal(unvec(vec(M), (2, 2)), M)


def test_vech_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        vech(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_pairing_identity_against_quadratic_form():
    """<vech(P), h_form(x x')> must equal x' P x.

    This is the contraction every least-squares row in the learner
    relies on, so it is checked across sizes with tight tolerance.
    """
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        P = random_sym(rng, n)
        x = rng.standard_normal(n)
        lhs = float(vech(P) @ h_form(np.outer(x, x)))
        rhs = float(x @ P @ x)
        denom = max(abs(rhs), 1e-30)
        worst = max(worst, abs(lhs - rhs) / denom)
    assert worst <= 1e-12


def test_h_form_trace_pairing():
    # <vech(P), h_form(S)> = trace(P S) for any symmetric S, not just rank one
    rng = np.random.default_rng(7)
    for n in (1, 2, 3, 5):
        P = random_sym(rng, n)
        S = random_sym(rng, n)
        got = float(vech(P) @ h_form(S))
        np.testing.assert_allclose(got, np.trace(P @ S), rtol=1e-12, atol=1e-13)


def test_duplication_matrix():
    rng = np.random.default_rng(3)
    for n in (1, 2, 4):
        Dn = duplication(n)
        P = random_sym(rng, n)
        np.testing.assert_allclose(Dn @ vech(P), vec(P), rtol=0, atol=1e-14)


def test_kron_vec_contraction():
    rng = np.random.default_rng(11)
    a = rng.standard_normal(3)
    b = rng.standard_normal(4)
    M = rng.standard_normal((3, 4))
    np.testing.assert_allclose(kron_vec(b, a) @ vec(M), a @ M @ b,
                               rtol=1e-13, atol=1e-14)


def test_quad_basis_matches_h_form():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(quad_basis(x), h_form(np.outer(x, x)),
                               rtol=0, atol=1e-13)


def test_vectorized_rows_match_loop():
    rng = np.random.default_rng(13)
    stack = np.stack([random_sym(rng, 3) for _ in range(10)])
    hr = h_form_rows(stack)
    vr = vech_rows(stack)
    for k in range(10):
        np.testing.assert_array_equal(hr[k], h_form(stack[k]))
        np.testing.assert_array_equal(vr[k], vech(stack[k]))


def test_vech_indices_consistency():
    n = 4
    ri, ci = vech_indices(n)
    P = random_sym(np.random.default_rng(1), n)
    np.testing.assert_array_equal(P[ri, ci], vech(P))
