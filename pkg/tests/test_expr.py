import math
import random

import numpy as np
import pytest

from orbitlab import expr as ex

from oracles import central_diff, dual_first_vs_fd_samples, fd_second, random_expression


class TestParse:
    def test_sum_of_squares_shape(self):
        node = ex.parse("x1^2 + x2^2", 2)
        expected = ex.add(ex.powc(ex.var(0), 2.0), ex.powc(ex.var(1), 2.0))
        assert node == expected

    def test_kinetic_eval(self):
        node = ex.parse("0.5*(v1^2+v2^2)", 2)
        assert ex.evaluate(node, [0.0, 0.0, 1.0, 0.0]) == 0.5

    def test_expression_exponent_rejected(self):
        with pytest.raises(ex.ParseError):
            ex.parse("x1^x2", 2)

    def test_whitespace_insensitive(self):
        assert ex.parse(" x1 +  2* v1 ", 1) == ex.parse("x1+2*v1", 1)

    def test_precedence(self):
        # pow binds tighter than unary minus, which binds tighter than mul
        node = ex.parse("-x1^2*3", 1)
        expected = ex.mul(ex.neg(ex.powc(ex.var(0), 2.0)), ex.const(3.0))
        assert node == expected

    def test_function_application_then_pow(self):
        node = ex.parse("sin(x1)^2", 1)
        assert node == ex.powc(ex.Unary("sin", ex.var(0)), 2.0)

    def test_unknown_identifier(self):
        with pytest.raises(ex.ParseError):
            ex.parse("x1 + foo", 1)

    def test_variable_out_of_range(self):
        with pytest.raises(ex.ParseError):
            ex.parse("x3", 2)
        with pytest.raises(ex.ParseError):
            ex.parse("v3", 2)

    def test_syntax_error_has_offset(self):
        with pytest.raises(ex.ParseError) as err:
            ex.parse("x1 + ", 1)
        assert "byte" in str(err.value)

    def test_scientific_numbers(self):
        node = ex.parse("1.5e-3 * x1", 1)
        assert ex.evaluate(node, [2.0, 0.0]) == pytest.approx(3e-3)

    def test_roundtrip_printer(self):
        sources = [
            "x1^2 + x2^2",
            "0.5*(v1^2+v2^2)",
            "sin(x1)*cos(x2) - exp(-x1^2)/sqrt(1+v2^2)",
            "-x1^3 + x2/v1 - log(1+x1^2)",
        ]
        for s in sources:
            tree = ex.parse(s, 2)
            assert ex.parse(ex.to_source_dim(tree, 2), 2) == tree

    def test_roundtrip_random(self):
        rng = random.Random(7)
        for _ in range(100):
            tree = random_expression(rng, 2, depth=3)
            assert ex.parse(ex.to_source_dim(tree, 2), 2) == tree


class TestEvalDual:
    def test_sin_at_zero(self):
        d = ex.dual_scalar(ex.parse("sin(x1)", 1), [0.0, 0.0], [0])
        assert d.value == 0.0
        assert d.first[0] == 1.0

    def test_product_rule(self):
        d = ex.dual_scalar(ex.parse("x1*x2", 2), [2.0, 3.0, 0.0, 0.0], [0, 1])
        assert d.value == 6.0
        assert d.first == [3.0, 2.0]

    def test_exp_square_matches_fd(self):
        node = ex.parse("exp(x1^2)", 1)
        d = ex.dual_scalar(node, [0.7, 0.0], [0])
        fd = central_diff(lambda t: ex.evaluate(node, [t, 0.0]), 0.7, 1e-5)
        assert abs(d.first[0] - fd) < 1e-6 * (1.0 + abs(d.value))
        # frozen analytic value: 2*0.7*exp(0.49)
        assert d.first[0] == pytest.approx(2.2852427079375, abs=1e-9)

    def test_second_derivatives_symmetric_and_match_fd(self):
        node = ex.parse("sin(x1*x2) + x1^3/(2 + x2^2)", 2)
        point = [0.8, -0.4, 0.0, 0.0]
        d = ex.dual_scalar(node, point, [0, 1], order=2)
        sec = np.array(d.second)
        assert np.array_equal(sec, sec.T)

        def f(p):
            return ex.evaluate(node, list(p) + [0.0, 0.0])

        for i in range(2):
            for j in range(2):
                fd = fd_second(f, point[:2], i, j)
                assert abs(sec[i, j] - fd) < 1e-5 * (1.0 + abs(sec[i, j]))

    def test_inactive_directions_are_constants(self):
        node = ex.parse("x1*v1", 1)
        d = ex.dual_scalar(node, [2.0, 5.0], [0])
        assert d.first == [5.0]

    def test_log_domain_error_reports_node(self):
        node = ex.parse("log(x1)", 1)
        with pytest.raises(ex.EvalDomainError) as err:
            ex.evaluate(node, [-1.0, 0.0])
        assert "log" in str(err.value)

    def test_sqrt_domain_error(self):
        with pytest.raises(ex.EvalDomainError):
            ex.evaluate(ex.parse("sqrt(x1)", 1), [-4.0, 0.0])

    def test_division_by_zero(self):
        with pytest.raises(ex.EvalDomainError):
            ex.evaluate(ex.parse("1/x1", 1), [0.0, 0.0])

    def test_evaluation_deterministic(self):
        node = ex.parse("sin(x1)*exp(x2) - x1/(1+x2^2)", 2)
        pt = [0.3, 0.7, 0.0, 0.0]
        first = ex.evaluate(node, pt)
        for _ in range(5):
            assert ex.evaluate(node, pt) == first


class TestDerivativeSoundness:
    def test_first_derivatives_match_central_differences(self):
        # property from the module contract, 200 samples here; the full
        # 500-sample sweep runs in the acceptance suite
        for node, point, direction, dual, fd in dual_first_vs_fd_samples(200, seed=3):
            value = ex.evaluate(node, point)
            tol = 1e-6 * (1.0 + abs(value)) + 1e-6 * abs(dual)
            assert abs(dual - fd) < max(tol, 1e-6), ex.to_source_dim(node, 3)

    def test_pow_edge_cases(self):
        # x^0 and x^1 at x = 0 must not divide by zero in derivative terms
        for p, expect_first in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]:
            d = ex.dual_scalar(ex.powc(ex.var(0), p), [0.0, 0.0], [0], order=2)
            assert d.first[0] == expect_first

    def test_third_order_chain(self):
        x = 0.7
        node = ex.parse("exp(x1^2)", 1)
        d = ex.eval_dual(node, [x, 0.0], [0], order=3)
        analytic = (12 * x + 8 * x**3) * math.exp(x * x)
        assert ex.val_of(d.third[0][0][0]) == pytest.approx(analytic, rel=1e-12)


class TestNestedDuals:
    def test_cross_level_arithmetic_guarded(self):
        a = ex.Dual.seed(1.0, 2, 0, tag=0)
        b = ex.Dual.seed(1.0, 2, 0, tag=1)
        with pytest.raises(ValueError):
            a * b

    def test_nested_second_derivative(self):
        # f(x) = x^3: inner grad 3x^2, outer derivative of that 6x
        x0 = 1.5
        inner_x = ex.Dual.seed(ex.Dual.seed(x0, 1, 0, tag=0), 1, 0, tag=1)
        f = inner_x**3
        assert ex.val_of(f.val) == pytest.approx(x0**3)
        assert ex.val_of(f.grad[0]) == pytest.approx(3 * x0**2)
        assert f.grad[0].grad[0] == pytest.approx(6 * x0)
