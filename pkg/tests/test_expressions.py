import numpy as np
import pytest

from reflectmc.expressions import (ExpressionError, MatrixField, ScalarField,
                                   VectorField)


def test_scalar_parse_and_eval():
    f = ScalarField.parse("t + x1*x2", 2)
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    vals = f(np.array([0.0, 1.0]), x)
    assert np.allclose(vals, [2.0, 0.5])


def test_scalar_constant_detection():
    c = ScalarField.parse("3.5", 2)
    assert c.is_constant
    assert c.constant_value() == 3.5
    z = ScalarField.parse("0", 1)
    assert z.is_zero


def test_scalar_diff():
    f = ScalarField.parse("x1**2 + 3*x2", 2)
    assert np.allclose(f.diff("x1")(0.0, np.array([[2.0, 0.0]])), [4.0])
    assert np.allclose(f.diff("x2")(0.0, np.array([[2.0, 0.0]])), [3.0])


def test_parse_rejects_unknown_symbols():
    with pytest.raises(ExpressionError):
        ScalarField.parse("x3", 2)
    with pytest.raises(ExpressionError):
        ScalarField.parse("import os", 1)


def test_vector_divergence():
    v = VectorField.parse(["x1", "x2"], 2)
    div = v.divergence()
    assert np.allclose(div(0.0, np.array([[0.3, 0.7]])), [2.0])


def test_vector_zero():
    v = VectorField.zero(3)
    assert v.is_zero
    assert np.allclose(v(0.0, np.array([[1.0, 2.0, 3.0]])), 0.0)


def test_matrix_isotropic_and_symmetry():
    A = MatrixField.isotropic(0.5, 2)
    val = A(0.0, np.array([[0.1, 0.2]]))
    assert np.allclose(val[0], 0.5 * np.eye(2))
    assert A.is_symmetric()


def test_matrix_entry_access():
    A = MatrixField.parse([["1 + x1", "0"], ["0", "2"]], 2)
    e00 = A.entry(0, 0)
    assert np.allclose(e00(0.0, np.array([[0.5, 0.0]])), [1.5])
