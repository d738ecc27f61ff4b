"""Expression trees over design vectors and feature matrices.

A specification's objectives and constraints are trees of these nodes.  The
same tree serves two masters: the exact nonlinear evaluator (used by the
brute-force oracle and by feasibility reporting) and the lowering pass that
rewrites trees into binary linear rows.  Evaluation is pure and exact; any
log/power/division domain violation is a hard error, never a NaN.
"""

from __future__ import annotations

import ast as _pyast
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Literal, Mapping, Sequence

from .catalog import (
    DesignSpace,
    DesignVector,
    EnumerationCapExceeded,
    enumerate_designs,
)

LEX_TOL = 1e-9
FEAS_TOL = 1e-9


class EvaluationError(ValueError):
    """Exact evaluation failed (domain violation or unresolvable selection)."""


class ExprSyntaxError(ValueError):
    """Malformed constraint/objective expression string."""


# ---------------------------------------------------------------------------
# AST nodes


class FeatureExpr:
    """Base class; nodes are immutable and shareable."""

    __slots__ = ()

    def modules(self) -> frozenset[str]:
        """Set of module ids the tree references."""
        raise NotImplementedError

    # arithmetic sugar, used heavily by the problem builders
    def __add__(self, other):
        return Sum((self, _as_expr(other)))

    def __radd__(self, other):
        return Sum((_as_expr(other), self))

    def __sub__(self, other):
        return Sum((self, Product((Constant(-1.0), _as_expr(other)))))

    def __rsub__(self, other):
        return Sum((_as_expr(other), Product((Constant(-1.0), self))))

    def __mul__(self, other):
        return Product((self, _as_expr(other)))

    def __rmul__(self, other):
        return Product((_as_expr(other), self))

    def __truediv__(self, other):
        return Quotient(self, _as_expr(other))

    def __rtruediv__(self, other):
        return Quotient(_as_expr(other), self)

    def __pow__(self, exponent):
        return Power(self, float(exponent))

    def __neg__(self):
        return Product((Constant(-1.0), self))


def _as_expr(value) -> FeatureExpr:
    if isinstance(value, FeatureExpr):
        return value
    if isinstance(value, (int, float)):
        return Constant(float(value))
    raise TypeError(f"cannot treat {value!r} as an expression")


@dataclass(frozen=True)
class Constant(FeatureExpr):
    value: float

    def modules(self) -> frozenset[str]:
        return frozenset()


@dataclass(frozen=True)
class FeatureTerm(FeatureExpr):
    """``multiplier * <feature row of module> . x_module``: the selected
    component's feature value, scaled.  Zero if an optional module is
    unselected."""

    module: str
    feature: str
    multiplier: float = 1.0

    def modules(self) -> frozenset[str]:
        return frozenset({self.module})


@dataclass(frozen=True)
class SelectorTerm(FeatureExpr):
    """``multiplier * sum_{j in subset} [x_module]_j``; with the full catalog
    as subset this is the activation indicator of the module."""

    module: str
    components: tuple[str, ...]  # component names; empty = whole catalog
    multiplier: float = 1.0

    def modules(self) -> frozenset[str]:
        return frozenset({self.module})


@dataclass(frozen=True)
class Sum(FeatureExpr):
    terms: tuple[FeatureExpr, ...]

    def modules(self) -> frozenset[str]:
        return frozenset().union(*(t.modules() for t in self.terms)) if self.terms else frozenset()


@dataclass(frozen=True)
class Product(FeatureExpr):
    factors: tuple[FeatureExpr, ...]

    def modules(self) -> frozenset[str]:
        return frozenset().union(*(f.modules() for f in self.factors)) if self.factors else frozenset()


@dataclass(frozen=True)
class Quotient(FeatureExpr):
    numerator: FeatureExpr
    denominator: FeatureExpr

    def __post_init__(self):
        if isinstance(self.denominator, Constant) and self.denominator.value == 0.0:
            raise ValueError("quotient denominator is the constant zero")

    def modules(self) -> frozenset[str]:
        return self.numerator.modules() | self.denominator.modules()


@dataclass(frozen=True)
class Power(FeatureExpr):
    base: FeatureExpr
    exponent: float

    def modules(self) -> frozenset[str]:
        return self.base.modules()


@dataclass(frozen=True)
class Log(FeatureExpr):
    argument: FeatureExpr

    def modules(self) -> frozenset[str]:
        return self.argument.modules()


@dataclass(frozen=True)
class UnaryPerModule(FeatureExpr):
    """Named scalar function of one module's selected feature column."""

    module: str
    name: str
    fn: Callable = field(compare=False)

    def modules(self) -> frozenset[str]:
        return frozenset({self.module})


@dataclass(frozen=True)
class CrossTerm(FeatureExpr):
    """Named scalar function of the selected columns of two or more modules."""

    module_list: tuple[str, ...]
    name: str
    fn: Callable = field(compare=False)

    def __post_init__(self):
        if len(self.module_list) < 2 or len(set(self.module_list)) != len(self.module_list):
            raise ValueError("cross term needs at least two distinct modules")

    def modules(self) -> frozenset[str]:
        return frozenset(self.module_list)


# ---------------------------------------------------------------------------
# Specification containers

Sense = Literal["<=", "="]


@dataclass(frozen=True)
class Constraint:
    """``lhs sense rhs`` with a label for diagnostics and provenance."""

    lhs: FeatureExpr
    sense: Sense
    rhs: float
    kind: Literal["system", "implicit"] = "system"
    label: str = ""
    # Conservative linear(izable) replacement used by the lowering pass when
    # the exact lhs is out of reach; satisfying the surrogate must imply
    # satisfying the exact constraint.
    surrogate_lhs: FeatureExpr | None = None
    surrogate_rhs: float | None = None

    def __post_init__(self):
        if self.sense not in ("<=", "="):
            raise ValueError(f"constraint sense must be '<=' or '=', got {self.sense!r}")


@dataclass(frozen=True)
class Objective:
    """One lexicographic level, always maximized.  ``surrogate`` is an
    optional linear lower bound used for lowering in place of ``exact``."""

    exact: FeatureExpr
    label: str = ""
    surrogate: FeatureExpr | None = None

    @property
    def lowered_expr(self) -> FeatureExpr:
        return self.surrogate if self.surrogate is not None else self.exact


@dataclass(frozen=True)
class CompatRule:
    """Choosing ``component`` of ``module_a`` restricts (or forbids) the
    choice of ``module_b`` to the given subset."""

    module_a: str
    component: str
    module_b: str
    subset: tuple[str, ...]
    polarity: Literal["compatible", "incompatible"]

    def label(self) -> str:
        rel = "->" if self.polarity == "compatible" else "!>"
        return f"compat:{self.module_a}[{self.component}]{rel}{self.module_b}{{{','.join(self.subset)}}}"


@dataclass(frozen=True)
class DesignSpec:
    """Full co-design problem: design space, lexicographic objectives
    (maximize), constraints, and pairwise compatibility rules."""

    space: DesignSpace
    objectives: tuple[Objective, ...]
    constraints: tuple[Constraint, ...] = ()
    compat_rules: tuple[CompatRule, ...] = ()
    # Named expressions reported by sweeps (e.g. "cost"); not constraints.
    report_exprs: Mapping[str, FeatureExpr] = field(default_factory=dict)

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("specification needs at least one objective")
        known = set(self.space.module_ids)
        for obj in self.objectives:
            for expr in (obj.exact, obj.surrogate):
                if expr is not None and not expr.modules() <= known:
                    raise ValueError(
                        f"objective {obj.label!r} references unknown modules "
                        f"{sorted(expr.modules() - known)}"
                    )
        for con in self.constraints:
            for expr in (con.lhs, con.surrogate_lhs):
                if expr is not None and not expr.modules() <= known:
                    raise ValueError(
                        f"constraint {con.label!r} references unknown modules "
                        f"{sorted(expr.modules() - known)}"
                    )
        for rule in self.compat_rules:
            a, b = self.space.module(rule.module_a), self.space.module(rule.module_b)
            a.component_index(rule.component)
            for name in rule.subset:
                b.component_index(name)


# ---------------------------------------------------------------------------
# Exact evaluation

SelectionMap = Mapping[str, "int | None"]


def _selected_column(space: DesignSpace, selections: SelectionMap, module: str):
    mod = space.module(module)
    if module not in selections:
        raise EvaluationError(f"module {module!r} not covered by this selection")
    sel = selections[module]
    if sel is None:
        if not mod.optional:
            raise EvaluationError(f"required module {module!r} is unselected")
        return None
    return mod.column(sel)


def evaluate_with_selection(expr: FeatureExpr, space: DesignSpace,
                            selections: SelectionMap) -> float:
    """Evaluate against a partial selection map (module id -> column index).

    Referencing a module missing from the map is an error, which is what
    makes this safe for column-wise precomputation of single-module terms.
    """
    if isinstance(expr, Constant):
        return expr.value
    if isinstance(expr, FeatureTerm):
        mod = space.module(expr.module)
        col = _selected_column(space, selections, expr.module)
        if col is None:
            return 0.0
        return expr.multiplier * col[mod.feature_index(expr.feature)]
    if isinstance(expr, SelectorTerm):
        mod = space.module(expr.module)
        if expr.module not in selections:
            raise EvaluationError(f"module {expr.module!r} not covered by this selection")
        sel = selections[expr.module]
        if sel is None:
            if not mod.optional:
                raise EvaluationError(f"required module {expr.module!r} is unselected")
            return 0.0
        subset = expr.components or mod.component_names
        hit = mod.component_names[sel] in subset
        return expr.multiplier * (1.0 if hit else 0.0)
    if isinstance(expr, Sum):
        return sum(evaluate_with_selection(t, space, selections) for t in expr.terms)
    if isinstance(expr, Product):
        out = 1.0
        for f in expr.factors:
            out *= evaluate_with_selection(f, space, selections)
        return out
    if isinstance(expr, Quotient):
        num = evaluate_with_selection(expr.numerator, space, selections)
        den = evaluate_with_selection(expr.denominator, space, selections)
        if den == 0.0:
            raise EvaluationError("division by zero")
        return num / den
    if isinstance(expr, Power):
        base = evaluate_with_selection(expr.base, space, selections)
        p = expr.exponent
        if base < 0.0 and p != round(p):
            raise EvaluationError(f"fractional power of negative value {base!r}")
        if base == 0.0 and p < 0.0:
            raise EvaluationError("zero raised to a negative power")
        return float(base) ** p
    if isinstance(expr, Log):
        arg = evaluate_with_selection(expr.argument, space, selections)
        if arg <= 0.0:
            raise EvaluationError(f"log of non-positive value {arg!r}")
        return math.log(arg)
    if isinstance(expr, UnaryPerModule):
        col = _selected_column(space, selections, expr.module)
        if col is None:
            raise EvaluationError(
                f"function {expr.name!r} of unselected optional module {expr.module!r}"
            )
        return float(expr.fn(col))
    if isinstance(expr, CrossTerm):
        cols = []
        for module in expr.module_list:
            col = _selected_column(space, selections, module)
            if col is None:
                raise EvaluationError(
                    f"cross term {expr.name!r} over unselected optional module {module!r}"
                )
            cols.append(col)
        return float(expr.fn(*cols))
    raise TypeError(f"unknown expression node {type(expr).__name__}")


def evaluate(expr: FeatureExpr, x: DesignVector) -> float:
    """Exact nonlinear value of the expression at a concrete design."""
    selections = dict(zip(x.space.module_ids, x.selections))
    return evaluate_with_selection(expr, x.space, selections)


# ---------------------------------------------------------------------------
# Feasibility


@dataclass(frozen=True)
class ConstraintCheck:
    label: str
    satisfied: bool
    slack: float  # rhs - lhs; >= -tol when a <= constraint is satisfied
    error: str | None = None


@dataclass(frozen=True)
class FeasibilityReport:
    checks: tuple[ConstraintCheck, ...]

    @property
    def feasible(self) -> bool:
        return all(c.satisfied for c in self.checks)

    def violated(self) -> tuple[ConstraintCheck, ...]:
        return tuple(c for c in self.checks if not c.satisfied)


def compat_rule_holds(rule: CompatRule, x: DesignVector) -> bool:
    """Truth value of one compatibility rule at a concrete design."""
    sel_a = x.component_name(rule.module_a)
    if sel_a != rule.component:
        return True
    sel_b = x.component_name(rule.module_b)
    in_subset = sel_b is not None and sel_b in rule.subset
    return in_subset if rule.polarity == "compatible" else not in_subset


def check_feasible(spec: DesignSpec, x: DesignVector, *,
                   on_domain_error: Literal["raise", "mark"] = "raise",
                   tol: float = FEAS_TOL) -> FeasibilityReport:
    """Per-constraint satisfied/violated report with slack values.

    Domain errors while evaluating a constraint propagate by default with
    the constraint label attached; ``on_domain_error="mark"`` records the
    constraint as violated instead (used by exhaustive sweeps, where part
    of the design space may sit outside an expression's domain).
    """
    checks: list[ConstraintCheck] = []
    for i, con in enumerate(spec.constraints):
        label = con.label or f"constraint[{i}]"
        try:
            lhs = evaluate(con.lhs, x)
        except EvaluationError as exc:
            if on_domain_error == "raise":
                raise EvaluationError(f"{label}: {exc}") from exc
            checks.append(ConstraintCheck(label, False, math.nan, error=str(exc)))
            continue
        slack = con.rhs - lhs
        ok = slack >= -tol if con.sense == "<=" else abs(slack) <= tol
        checks.append(ConstraintCheck(label, ok, slack))
    for rule in spec.compat_rules:
        ok = compat_rule_holds(rule, x)
        checks.append(ConstraintCheck(rule.label(), ok, 0.0 if ok else -1.0))
    return FeasibilityReport(tuple(checks))


# ---------------------------------------------------------------------------
# Lexicographic comparison and the brute-force oracle


def lex_compare(a: Sequence[float], b: Sequence[float], tol: float = LEX_TOL) -> int:
    """-1, 0, +1 comparison of objective vectors, entry by entry in priority
    order; entries within ``tol`` count as equal."""
    if len(a) != len(b):
        raise ValueError("objective vectors differ in length")
    for va, vb in zip(a, b):
        if va > vb + tol:
            return 1
        if vb > va + tol:
            return -1
    return 0


@dataclass(frozen=True)
class OracleResult:
    """Outcome of exhaustive search under exact nonlinear semantics."""

    status: Literal["optimal", "infeasible"]
    design: DesignVector | None
    objective_values: tuple[float, ...]
    n_feasible: int
    n_enumerated: int

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


def brute_force_optimum(spec: DesignSpec, cap: int | None = None) -> OracleResult:
    """Enumerate the whole design space, evaluate the original nonlinear
    problem exactly, and return the lexicographically maximal feasible
    design.  Ties break toward the lowest component-index tuple (an
    unselected optional module sorts before component 0).

    Designs whose constraint evaluation hits a domain error are treated as
    infeasible; a domain error in an objective of an otherwise feasible
    design propagates.
    """
    best: DesignVector | None = None
    best_values: tuple[float, ...] = ()
    n_feasible = 0
    n_total = 0
    for x in enumerate_designs(spec.space, cap=cap):
        n_total += 1
        report = check_feasible(spec, x, on_domain_error="mark")
        if not report.feasible:
            continue
        n_feasible += 1
        values = tuple(evaluate(obj.exact, x) for obj in spec.objectives)
        if best is None:
            best, best_values = x, values
            continue
        cmp = lex_compare(values, best_values)
        if cmp > 0 or (cmp == 0 and x.index_tuple() < best.index_tuple()):
            best, best_values = x, values
    if best is None:
        return OracleResult("infeasible", None, (), 0, n_total)
    return OracleResult("optimal", best, best_values, n_feasible, n_total)


# ---------------------------------------------------------------------------
# Expression-string parsing (problem-file syntax)
#
# Infix strings over feat(module, feature), sel(module, {c1, c2}), log(...),
# ^ (power), * / + -, and numeric literals.  Identifiers may be quoted when
# they are not valid bare names.

_ALLOWED_CALLS = ("feat", "sel", "log")


def _name_of(node: _pyast.expr, what: str) -> str:
    if isinstance(node, _pyast.Name):
        return node.id
    if isinstance(node, _pyast.Constant) and isinstance(node.value, str):
        return node.value
    raise ExprSyntaxError(f"{what} must be an identifier or quoted string")


def _convert(node: _pyast.expr) -> FeatureExpr:
    if isinstance(node, _pyast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprSyntaxError(f"unsupported literal {node.value!r}")
        return Constant(float(node.value))
    if isinstance(node, _pyast.UnaryOp):
        operand = _convert(node.operand)
        if isinstance(node.op, _pyast.USub):
            return -operand
        if isinstance(node.op, _pyast.UAdd):
            return operand
        raise ExprSyntaxError("unsupported unary operator")
    if isinstance(node, _pyast.BinOp):
        if isinstance(node.op, _pyast.Pow):
            exponent = node.right
            neg = False
            if isinstance(exponent, _pyast.UnaryOp) and isinstance(exponent.op, _pyast.USub):
                neg, exponent = True, exponent.operand
            if not (isinstance(exponent, _pyast.Constant)
                    and isinstance(exponent.value, (int, float))):
                raise ExprSyntaxError("exponent must be a numeric literal")
            p = float(exponent.value)
            return Power(_convert(node.left), -p if neg else p)
        left, right = _convert(node.left), _convert(node.right)
        if isinstance(node.op, _pyast.Add):
            return left + right
        if isinstance(node.op, _pyast.Sub):
            return left - right
        if isinstance(node.op, _pyast.Mult):
            return left * right
        if isinstance(node.op, _pyast.Div):
            return left / right
        raise ExprSyntaxError("unsupported binary operator")
    if isinstance(node, _pyast.Call):
        if not isinstance(node.func, _pyast.Name) or node.func.id not in _ALLOWED_CALLS:
            raise ExprSyntaxError("only feat(...), sel(...) and log(...) calls are allowed")
        fn = node.func.id
        if fn == "log":
            if len(node.args) != 1:
                raise ExprSyntaxError("log takes exactly one argument")
            return Log(_convert(node.args[0]))
        if fn == "feat":
            if len(node.args) != 2:
                raise ExprSyntaxError("feat takes (module, feature)")
            return FeatureTerm(_name_of(node.args[0], "module"),
                               _name_of(node.args[1], "feature"))
        # sel(module, {c1, c2, ...}) or sel(module) for the whole catalog
        if len(node.args) == 1:
            return SelectorTerm(_name_of(node.args[0], "module"), ())
        if len(node.args) != 2 or not isinstance(node.args[1], _pyast.Set):
            raise ExprSyntaxError("sel takes (module, {component, ...})")
        comps = tuple(_name_of(el, "component") for el in node.args[1].elts)
        return SelectorTerm(_name_of(node.args[0], "module"), comps)
    raise ExprSyntaxError(f"unsupported syntax near {_pyast.dump(node)[:40]}")


def parse_expression(text: str) -> FeatureExpr:
    """Parse an infix expression string into a FeatureExpr tree."""
    try:
        tree = _pyast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExprSyntaxError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    return _convert(tree.body)


def parse_constraint(text: str, *, kind: Literal["system", "implicit"] = "system",
                     label: str = "") -> Constraint:
    """Parse ``"<expr> <= <expr>"`` (or >=, =, ==) into a Constraint.

    Both sides may be arbitrary expressions; the parsed form is normalized
    to ``lhs - rhs <sense> 0`` ... except that a constant side is kept as
    the numeric rhs, which reads better in reports.
    """
    for op, sense, flip in (("<=", "<=", False), (">=", "<=", True),
                            ("==", "=", False), ("=", "=", False)):
        if op in text:
            left_text, _, right_text = text.partition(op)
            break
    else:
        raise ExprSyntaxError(f"constraint {text!r} has no <=, >= or = operator")
    left, right = parse_expression(left_text), parse_expression(right_text)
    if flip:
        left, right = right, left
    if isinstance(right, Constant):
        lhs, rhs = left, right.value
    elif isinstance(left, Constant) and sense == "=":
        lhs, rhs = right, left.value
    else:
        lhs, rhs = left - right, 0.0
    return Constraint(lhs=lhs, sense=sense, rhs=rhs, kind=kind, label=label or text.strip())
