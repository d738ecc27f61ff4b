"""Lowering: compile a nonlinear specification to a binary linear program.

Every objective and constraint expression is rewritten into a linear row
over the one-hot selection variables through a cascade of cases, tried in
order of increasing cost:

  (a) linear passthrough   - sums of feature/selector terms;
  (b) column-wise          - sums of nonlinear functions of a single
                             module, precomputed on each catalog column;
  (c) log-rational         - products/quotients of positive per-module
                             factors, linearized by taking logarithms
                             (argmax-preserving, not value-preserving);
  (d) joint-choice lifting - anything else, via an auxiliary binary cell
                             per joint choice of the involved modules,
                             linked to the one-hot blocks by row/column
                             sum constraints.

Named conservative surrogates (drone template) plug in before (d); they
replace an intractable expression with a linear(izable) bound such that
surrogate-feasible designs stay feasible under the exact semantics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from . import expr as ex
from .catalog import DesignSpace

DEFAULT_LIFTING_CAP = 100_000

Transformation = Literal[
    "linear-passthrough",
    "columnwise",
    "log-rational",
    "lifted",
    "surrogate-lower-bound",
    "surrogate-upper-bound",
]
Exactness = Literal["exact-argmax-preserving", "conservative"]


class LoweringError(ValueError):
    """Expression cannot be lowered; message names the offender."""


class _NotThisCase(Exception):
    """Internal: expression does not match the attempted lowering case."""


# ---------------------------------------------------------------------------
# Lowered-program containers


@dataclass(frozen=True)
class Variable:
    name: str
    module: str | None = None  # one-hot selection variable
    component: str | None = None
    lift_key: tuple[str, ...] | None = None  # joint-choice cell
    lift_coords: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Block:
    """Contiguous variable range of one module's one-hot block."""

    module_id: str
    start: int
    size: int
    exactly_one: bool
    component_names: tuple[str, ...]

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class LiftedBlock:
    """Joint-choice cells of a tuple of modules, row-major over components."""

    key: tuple[str, ...]
    block_positions: tuple[int, ...]  # indices into BlpInstance.blocks
    shape: tuple[int, ...]
    start: int

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.n_cells


@dataclass(frozen=True)
class Row:
    coeffs: np.ndarray
    sense: Literal["<=", "="]
    rhs: float
    label: str
    transformation: str


@dataclass(frozen=True)
class LoweredObjective:
    """One lexicographic level (maximize).  The constant offset is kept for
    reporting but plays no role in the search."""

    coeffs: np.ndarray
    offset: float
    label: str
    transformation: Transformation
    exactness: Exactness


@dataclass(frozen=True)
class BlpInstance:
    variables: tuple[Variable, ...]
    blocks: tuple[Block, ...]
    lifted_blocks: tuple[LiftedBlock, ...]
    rows: tuple[Row, ...]
    objective_stack: tuple[LoweredObjective, ...]
    space: DesignSpace | None = None

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def block(self, module_id: str) -> Block:
        for b in self.blocks:
            if b.module_id == module_id:
                return b
        raise KeyError(module_id)

    def provenance(self) -> list[dict]:
        return [
            {"row": i, "label": r.label, "sense": r.sense, "rhs": r.rhs,
             "transformation": r.transformation}
            for i, r in enumerate(self.rows)
        ]


@dataclass(frozen=True)
class LoweringRecord:
    label: str
    target: Literal["objective", "constraint", "compat"]
    transformation: Transformation
    exactness: Exactness


@dataclass(frozen=True)
class LoweringReport:
    records: tuple[LoweringRecord, ...]

    @property
    def conservative(self) -> bool:
        """True when any expression was replaced by a conservative bound."""
        return any(r.exactness == "conservative" for r in self.records)

    def by_label(self, label: str) -> LoweringRecord:
        for r in self.records:
            if r.label == label:
                return r
        raise KeyError(label)


# ---------------------------------------------------------------------------
# Expression normalization (only what lowering needs: flatten sums, fold
# constants, push scalar multipliers into terms, distribute constants over
# sums)


def _normalize(e: ex.FeatureExpr) -> ex.FeatureExpr:
    if isinstance(e, (ex.Constant, ex.UnaryPerModule, ex.CrossTerm,
                      ex.FeatureTerm, ex.SelectorTerm)):
        return e
    if isinstance(e, ex.Sum):
        terms: list[ex.FeatureExpr] = []
        const = 0.0
        for t in map(_normalize, e.terms):
            if isinstance(t, ex.Constant):
                const += t.value
            elif isinstance(t, ex.Sum):
                terms.extend(t.terms)
            else:
                terms.append(t)
        if const != 0.0 or not terms:
            terms.append(ex.Constant(const))
        return terms[0] if len(terms) == 1 else ex.Sum(tuple(terms))
    if isinstance(e, ex.Product):
        factors: list[ex.FeatureExpr] = []
        scalar = 1.0
        for f in map(_normalize, e.factors):
            if isinstance(f, ex.Constant):
                scalar *= f.value
            elif isinstance(f, ex.Product):
                factors.extend(f.factors)
            else:
                factors.append(f)
        if scalar == 0.0:
            return ex.Constant(0.0)
        if not factors:
            return ex.Constant(scalar)
        if len(factors) == 1:
            only = factors[0]
            if isinstance(only, ex.FeatureTerm):
                return ex.FeatureTerm(only.module, only.feature, only.multiplier * scalar)
            if isinstance(only, ex.SelectorTerm):
                return ex.SelectorTerm(only.module, only.components, only.multiplier * scalar)
            if isinstance(only, ex.Sum):
                return _normalize(ex.Sum(tuple(
                    ex.Product((ex.Constant(scalar), t)) for t in only.terms)))
            if scalar == 1.0:
                return only
        if scalar != 1.0:
            factors.insert(0, ex.Constant(scalar))
        return factors[0] if len(factors) == 1 else ex.Product(tuple(factors))
    if isinstance(e, ex.Quotient):
        num, den = _normalize(e.numerator), _normalize(e.denominator)
        if isinstance(den, ex.Constant):
            if den.value == 0.0:
                raise LoweringError("quotient by constant zero")
            return _normalize(ex.Product((ex.Constant(1.0 / den.value), num)))
        return ex.Quotient(num, den)
    if isinstance(e, ex.Power):
        base = _normalize(e.base)
        if e.exponent == 1.0:
            return base
        if isinstance(base, ex.Constant):
            b, p = base.value, e.exponent
            if b > 0 or (b != 0 and p == round(p)) or (b == 0 and p > 0):
                return ex.Constant(float(b) ** p)
        return ex.Power(base, e.exponent)
    if isinstance(e, ex.Log):
        arg = _normalize(e.argument)
        if isinstance(arg, ex.Constant) and arg.value > 0:
            return ex.Constant(math.log(arg.value))
        return ex.Log(arg)
    raise TypeError(f"unknown expression node {type(e).__name__}")


def _additive_terms(e: ex.FeatureExpr) -> tuple[ex.FeatureExpr, ...]:
    e = _normalize(e)
    return e.terms if isinstance(e, ex.Sum) else (e,)


# ---------------------------------------------------------------------------
# Linear forms over blocks and lifted cells


@dataclass
class LinForm:
    block_coeffs: dict[str, np.ndarray] = field(default_factory=dict)
    cell_coeffs: dict[tuple[str, ...], np.ndarray] = field(default_factory=dict)
    offset: float = 0.0

    def add_block(self, module_id: str, coeffs: np.ndarray) -> None:
        if module_id in self.block_coeffs:
            self.block_coeffs[module_id] = self.block_coeffs[module_id] + coeffs
        else:
            self.block_coeffs[module_id] = np.asarray(coeffs, dtype=np.float64)

    def add_cells(self, key: tuple[str, ...], coeffs: np.ndarray) -> None:
        if key in self.cell_coeffs:
            self.cell_coeffs[key] = self.cell_coeffs[key] + coeffs
        else:
            self.cell_coeffs[key] = np.asarray(coeffs, dtype=np.float64)


def _linear_term_into(form: LinForm, space: DesignSpace, term: ex.FeatureExpr) -> bool:
    """Add a linear term to the form; False if the term is not linear."""
    if isinstance(term, ex.Constant):
        form.offset += term.value
        return True
    if isinstance(term, ex.FeatureTerm):
        mod = space.module(term.module)
        form.add_block(term.module, term.multiplier * mod.row(term.feature))
        return True
    if isinstance(term, ex.SelectorTerm):
        mod = space.module(term.module)
        coeffs = np.zeros(mod.size)
        subset = term.components or mod.component_names
        for name in subset:
            coeffs[mod.component_index(name)] = term.multiplier
        form.add_block(term.module, coeffs)
        return True
    return False


def _columnwise_term_into(form: LinForm, space: DesignSpace, term: ex.FeatureExpr) -> None:
    """Precompute a single-module nonlinear term on every catalog column."""
    (module_id,) = term.modules()
    mod = space.module(module_id)
    if mod.optional:
        raise LoweringError(
            f"nonlinear term over optional module {module_id!r} is ambiguous when unselected"
        )
    coeffs = np.zeros(mod.size)
    fname = term.name if isinstance(term, ex.UnaryPerModule) else type(term).__name__
    for j in range(mod.size):
        try:
            coeffs[j] = ex.evaluate_with_selection(term, space, {module_id: j})
        except ex.EvaluationError as exc:
            raise LoweringError(
                f"function {fname!r} undefined on module {module_id!r} "
                f"component {mod.component_names[j]!r}: {exc}"
            ) from exc
    form.add_block(module_id, coeffs)


def _lower_terms(space: DesignSpace, e: ex.FeatureExpr, *,
                 allow_columnwise: bool) -> LinForm:
    form = LinForm()
    for term in _additive_terms(e):
        if _linear_term_into(form, space, term):
            continue
        if not allow_columnwise:
            raise _NotThisCase
        if len(term.modules()) != 1:
            raise _NotThisCase
        _columnwise_term_into(form, space, term)
    return form


def _rational_factors(e: ex.FeatureExpr, weight: float = 1.0,
                      out: list | None = None) -> list[tuple[ex.FeatureExpr, float]]:
    """Multiplicative factorization with exponent weights: e = prod f_i^w_i."""
    if out is None:
        out = []
    if isinstance(e, ex.Product):
        for f in e.factors:
            _rational_factors(f, weight, out)
    elif isinstance(e, ex.Quotient):
        _rational_factors(e.numerator, weight, out)
        _rational_factors(e.denominator, -weight, out)
    elif isinstance(e, ex.Power):
        _rational_factors(e.base, weight * e.exponent, out)
    else:
        out.append((e, weight))
    return out


def _log_rational_form(space: DesignSpace, e: ex.FeatureExpr) -> LinForm:
    """Case (c): coefficients are signed logs of per-module factor values."""
    e = _normalize(e)
    if isinstance(e, ex.Sum):
        raise _NotThisCase
    factors = _rational_factors(e)
    if not any(isinstance(f, (ex.Product, ex.Quotient, ex.Power)) or f.modules()
               for f, _ in factors):
        raise _NotThisCase
    form = LinForm()
    for factor, weight in factors:
        mods = factor.modules()
        if len(mods) > 1:
            raise _NotThisCase
        if not mods:
            value = ex.evaluate_with_selection(factor, space, {})
            if value <= 0:
                raise LoweringError(
                    f"log transform refused: constant factor {value!r} is not positive")
            form.offset += weight * math.log(value)
            continue
        (module_id,) = mods
        mod = space.module(module_id)
        if mod.optional:
            raise LoweringError(
                f"log transform over optional module {module_id!r} is ambiguous when unselected")
        coeffs = np.zeros(mod.size)
        for j in range(mod.size):
            try:
                value = ex.evaluate_with_selection(factor, space, {module_id: j})
            except ex.EvaluationError as exc:
                raise LoweringError(
                    f"log transform undefined on module {module_id!r} component "
                    f"{mod.component_names[j]!r}: {exc}") from exc
            if value <= 0:
                raise LoweringError(
                    f"log transform refused: factor over module {module_id!r} is "
                    f"{value!r} on component {mod.component_names[j]!r}")
            coeffs[j] = weight * math.log(value)
        form.add_block(module_id, coeffs)
    return form


# ---------------------------------------------------------------------------
# Public single-expression entry points (used directly by tests and tools;
# lower() drives the same machinery through the case cascade)


def _dense(space: DesignSpace, form: LinForm) -> np.ndarray:
    out = np.zeros(space.total_dim)
    start = 0
    for mod in space.modules:
        if mod.module_id in form.block_coeffs:
            out[start:start + mod.size] = form.block_coeffs[mod.module_id]
        start += mod.size
    return out


def lower_linear(space: DesignSpace, e: ex.FeatureExpr) -> tuple[np.ndarray, float]:
    """Case (a).  Returns (coefficients over the one-hot variables, offset)."""
    try:
        form = _lower_terms(space, e, allow_columnwise=False)
    except _NotThisCase:
        raise LoweringError("expression is not a sum of linear terms") from None
    return _dense(space, form), form.offset


def lower_columnwise(space: DesignSpace, e: ex.FeatureExpr) -> tuple[np.ndarray, float]:
    """Case (b).  Nonlinear single-module terms are evaluated per column."""
    try:
        form = _lower_terms(space, e, allow_columnwise=True)
    except _NotThisCase:
        raise LoweringError(
            "expression has a term spanning several modules; column-wise "
            "precomputation needs one module per term") from None
    return _dense(space, form), form.offset


def lower_log_rational(space: DesignSpace, e: ex.FeatureExpr) -> tuple[np.ndarray, float]:
    """Case (c).  Coefficient (i, j) is the signed log of factor i evaluated
    on catalog column j; the offset collects logs of constant factors."""
    try:
        form = _log_rational_form(space, e)
    except _NotThisCase:
        raise LoweringError("expression is not a product/quotient of per-module factors") from None
    return _dense(space, form), form.offset


@dataclass(frozen=True)
class LiftedTerm:
    """Result of lifting one multi-module term to joint-choice cells."""

    module_ids: tuple[str, ...]
    shape: tuple[int, ...]
    cell_coeffs: np.ndarray  # shape == self.shape

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_linking_rows(self) -> int:
        # one row per component of each involved module
        return int(sum(self.shape))


def lift_cross_term(space: DesignSpace, e: ex.FeatureExpr,
                    cap: int = DEFAULT_LIFTING_CAP) -> LiftedTerm:
    """Case (d): precompute the term on every joint choice of its modules.

    The returned cells are row-major over the involved modules in design-
    space order; in the assembled program each cell is a binary variable
    whose axis sums are linked to the parent one-hot blocks.
    """
    mods = sorted(e.modules(), key=space.module_position)
    if len(mods) < 2:
        raise LoweringError("lifting needs a term spanning at least two modules")
    for module_id in mods:
        if space.module(module_id).optional:
            raise LoweringError(
                f"cannot lift over optional module {module_id!r}; gate it linearly instead")
    shape = tuple(space.module(m).size for m in mods)
    n_cells = int(np.prod(shape))
    if n_cells > cap:
        raise LoweringError(
            f"joint choice of {mods} needs {n_cells} cells, over the lifting cap "
            f"{cap}; consider a conservative surrogate instead")
    coeffs = np.zeros(shape)
    for coords in np.ndindex(shape):
        selections = dict(zip(mods, coords))
        try:
            coeffs[coords] = ex.evaluate_with_selection(e, space, selections)
        except ex.EvaluationError as exc:
            names = {m: space.module(m).component_names[j] for m, j in selections.items()}
            raise LoweringError(f"lifted term undefined at joint choice {names}: {exc}") from exc
    return LiftedTerm(tuple(mods), shape, coeffs)


def lower_compat(space: DesignSpace, rule: ex.CompatRule) -> tuple[np.ndarray, float, bool]:
    """Compatibility row over the one-hot variables.

    compatible:    x_a[j] <= sum_{j' in S} x_b[j']     (row: x_a[j] - sum <= 0)
    incompatible:  x_a[j] <= 1 - sum_{j' in S} x_b[j'] (row: x_a[j] + sum <= 1)

    Returns (coeffs, rhs, flagged) where ``flagged`` marks a compatible rule
    with an empty subset, unsatisfiable whenever a[j] is chosen.
    """
    coeffs = np.zeros(space.total_dim)
    start = 0
    offsets = {}
    for mod in space.modules:
        offsets[mod.module_id] = start
        start += mod.size
    mod_a = space.module(rule.module_a)
    mod_b = space.module(rule.module_b)
    coeffs[offsets[rule.module_a] + mod_a.component_index(rule.component)] = 1.0
    sign = -1.0 if rule.polarity == "compatible" else 1.0
    for name in rule.subset:
        coeffs[offsets[rule.module_b] + mod_b.component_index(name)] += sign
    rhs = 0.0 if rule.polarity == "compatible" else 1.0
    flagged = rule.polarity == "compatible" and not rule.subset
    return coeffs, rhs, flagged


def lower_restriction(space: DesignSpace, module: str,
                      subset: Sequence[str]) -> tuple[np.ndarray, float]:
    """Equality row restricting a module to a catalog subset: sum = 1."""
    if not subset:
        raise LoweringError(f"restriction subset for module {module!r} is empty")
    mod = space.module(module)
    coeffs = np.zeros(space.total_dim)
    start = 0
    for m in space.modules:
        if m.module_id == module:
            break
        start += m.size
    for name in subset:
        coeffs[start + mod.component_index(name)] = 1.0
    return coeffs, 1.0


# ---------------------------------------------------------------------------
# Conservative surrogates (drone template)

SurrogateKind = Literal["speed-lower-bound", "ic4-upper-bound", "flighttime-upper-bound"]


@dataclass(frozen=True)
class SurrogateResult:
    expr: ex.FeatureExpr
    rhs: float | None  # None for objective surrogates
    exactness: Exactness = "conservative"


def _require_positive_feature(space: DesignSpace, module: str, feature: str) -> None:
    row = space.module(module).row(feature)
    if np.any(row <= 0):
        j = int(np.argmin(row))
        raise LoweringError(
            f"surrogate needs strictly positive {feature!r} on module {module!r}; "
            f"component {space.module(module).component_names[j]!r} has {row[j]!r}")


def speed_bound_constant(rho: float, c_d: float, r_bar: float) -> float:
    """Scale of the linear lower bound on top speed.

    At any design with thrust/weight ratio at least r_bar, the top-speed
    expression is bounded below by
        ((64 (r_bar^2 - 1)) / (rho^2 c_d^2))^(1/4) * sqrt(T_m) / L_f,
    obtained by replacing the ratio-dependent bracket with its worst case
    r_bar^2 - 1.  This function returns that fourth root.
    """
    if r_bar <= 1:
        raise ValueError("thrust-weight ratio bound must exceed 1")
    return (64.0 * (r_bar**2 - 1.0) / (rho**2 * c_d**2)) ** 0.25


def apply_surrogate(e: ex.FeatureExpr, kind: SurrogateKind, *,
                    space: DesignSpace, params) -> SurrogateResult:
    """Build the named conservative replacement for a drone expression.

    ``params`` carries the drone scalar parameters (rho, c_d, g, r_bar,
    alpha, delta_u, d, flight time, per-module multiplicities).  The
    replacement is linearizable by the column-wise or log-rational case;
    surrogate-feasible implies exact-feasible for the constraint kinds, and
    the surrogate objective never exceeds the exact one at designs meeting
    the thrust-weight bound.
    """
    if kind == "speed-lower-bound":
        _require_positive_feature(space, "motor", "thrust")
        _require_positive_feature(space, "frame", "length")
        kappa = speed_bound_constant(params.rho, params.c_d, params.r_bar)
        surrogate = ex.Quotient(
            ex.Product((ex.Constant(kappa), ex.Power(ex.FeatureTerm("motor", "thrust"), 0.5))),
            ex.FeatureTerm("frame", "length"),
        )
        return SurrogateResult(surrogate, None)

    if kind == "flighttime-upper-bound":
        # All draw is charged to the motors: sum of currents <= 6 * motor
        # current, assuming camera+computer together never exceed two motors
        # and frame/battery draw nothing.  Sound only when the catalog obeys
        # that ordering, which the drone builder checks.
        _require_positive_feature(space, "motor", "current")
        _require_positive_feature(space, "battery", "capacity")
        hours = params.flight_time_hours
        if hours <= 0:
            raise LoweringError("minimum flight time must be positive")
        surrogate = ex.Sum((
            ex.Log(ex.Product((ex.Constant(6.0), ex.FeatureTerm("motor", "current")))),
            ex.Product((ex.Constant(-1.0),
                        ex.Log(ex.Product((ex.Constant(params.alpha),
                                           ex.FeatureTerm("battery", "capacity")))))),
        ))
        return SurrogateResult(surrogate, -math.log(hours))

    if kind == "ic4-upper-bound":
        # Tracking-rate constraint, linearized: raise to the 4th power, take
        # logs, drop the -1 inside the thrust/weight bracket, and spread the
        # log of the weight sum with the arithmetic-geometric mean bound.
        # The camera focal length stays on the camera column (it is a
        # catalog feature, not a constant).
        for module, feat in (("motor", "thrust"), ("frame", "length"),
                             ("camera", "fps"), ("camera", "focal_length")):
            _require_positive_feature(space, module, feat)
        n_modules = len(space.modules)
        terms: list[ex.FeatureExpr] = [
            ex.Product((ex.Constant(4.0),
                        ex.Log(ex.Product((ex.Constant(4.0), ex.FeatureTerm("motor", "thrust")))))),
            ex.Product((ex.Constant(-4.0), ex.Log(ex.FeatureTerm("frame", "length")))),
        ]
        for mod in space.modules:
            _require_positive_feature(space, mod.module_id, "weight")
            w = params.multiplicity(mod.module_id)
            terms.append(ex.Product((
                ex.Constant(-2.0 / n_modules),
                ex.Log(ex.Product((ex.Constant(params.g * w),
                                   ex.FeatureTerm(mod.module_id, "weight")))),
            )))
        terms.append(ex.Product((ex.Constant(-4.0), ex.Log(ex.FeatureTerm("camera", "fps")))))
        terms.append(ex.Product((ex.Constant(4.0),
                                 ex.Log(ex.FeatureTerm("camera", "focal_length")))))
        constant = (math.log(4.0 / (params.delta_u**4 * params.d**4
                                    * params.rho**2 * params.c_d**2))
                    - 2.0 * math.log(n_modules))
        terms.append(ex.Constant(constant))
        return SurrogateResult(ex.Sum(tuple(terms)), 0.0)

    raise LoweringError(f"unknown surrogate kind {kind!r}")


# ---------------------------------------------------------------------------
# Whole-specification lowering


class _Builder:
    def __init__(self, space: DesignSpace, lifting_cap: int):
        self.space = space
        self.lifting_cap = lifting_cap
        self.lift_terms: dict[tuple[str, ...], LiftedBlock] = {}
        self.lift_shapes: dict[tuple[str, ...], tuple[int, ...]] = {}
        self.pending_rows: list[tuple[LinForm, str, float, str, str]] = []
        self.pending_objectives: list[tuple[LinForm, str, str, str]] = []
        self.records: list[LoweringRecord] = []

    def lower_expr(self, e: ex.FeatureExpr, label: str) -> tuple[LinForm, Transformation]:
        """Cases (a), (b), (d):  every additive term is linear, single-module
        column-wise, or lifted on its own module set."""
        form = LinForm()
        transformation: Transformation = "linear-passthrough"
        for term in _additive_terms(e):
            if _linear_term_into(form, self.space, term):
                continue
            mods = term.modules()
            if len(mods) == 1:
                _columnwise_term_into(form, self.space, term)
                if transformation == "linear-passthrough":
                    transformation = "columnwise"
            elif len(mods) >= 2:
                lifted = lift_cross_term(self.space, term, self.lifting_cap)
                self._register_lift(lifted.module_ids, lifted.shape)
                form.add_cells(lifted.module_ids, lifted.cell_coeffs)
                transformation = "lifted"
            else:
                raise LoweringError(f"{label}: cannot lower term {term!r}")
        return form, transformation

    def lower_expr_preferring_logs(self, e: ex.FeatureExpr, label: str,
                                   rhs: float | None) -> tuple[LinForm, float | None, Transformation]:
        """Full cascade: (a) -> (b) -> (c) -> (d).  For constraints (rhs not
        None) the log-rational route rewrites the rhs to its log."""
        try:
            form = _lower_terms(self.space, e, allow_columnwise=False)
            return form, rhs, "linear-passthrough"
        except (_NotThisCase, LoweringError):
            pass
        try:
            form = _lower_terms(self.space, e, allow_columnwise=True)
            return form, rhs, "columnwise"
        except _NotThisCase:
            pass
        try:
            if rhs is None:
                form = _log_rational_form(self.space, e)
                return form, None, "log-rational"
            if rhs > 0:
                form = _log_rational_form(self.space, e)
                return form, math.log(rhs), "log-rational"
        except (_NotThisCase, LoweringError):
            pass
        form, transformation = self.lower_expr(e, label)
        return form, rhs, transformation

    def _register_lift(self, key: tuple[str, ...], shape: tuple[int, ...]) -> None:
        if key not in self.lift_shapes:
            self.lift_shapes[key] = shape

    def assemble(self, spec: ex.DesignSpec) -> tuple[BlpInstance, LoweringReport]:
        space = self.space
        variables: list[Variable] = []
        blocks: list[Block] = []
        for mod in space.modules:
            blocks.append(Block(mod.module_id, len(variables), mod.size,
                                exactly_one=not mod.optional,
                                component_names=mod.component_names))
            for comp in mod.component_names:
                variables.append(Variable(f"x[{mod.module_id}={comp}]",
                                          module=mod.module_id, component=comp))
        lifted_blocks: list[LiftedBlock] = []
        block_pos = {b.module_id: i for i, b in enumerate(blocks)}
        for key, shape in self.lift_shapes.items():
            lb = LiftedBlock(key, tuple(block_pos[m] for m in key), shape, len(variables))
            lifted_blocks.append(lb)
            self.lift_terms[key] = lb
            for coords in np.ndindex(shape):
                comp = ",".join(space.module(m).component_names[j]
                                for m, j in zip(key, coords))
                variables.append(Variable(f"z[{'*'.join(key)}]({comp})",
                                          lift_key=key, lift_coords=coords))
        n_vars = len(variables)

        def densify(form: LinForm) -> np.ndarray:
            out = np.zeros(n_vars)
            for module_id, coeffs in form.block_coeffs.items():
                b = blocks[block_pos[module_id]]
                out[b.start:b.stop] += coeffs
            for key, cells in form.cell_coeffs.items():
                lb = self.lift_terms[key]
                out[lb.start:lb.stop] += cells.ravel()
            return out

        rows: list[Row] = []
        for b, mod in zip(blocks, space.modules):
            coeffs = np.zeros(n_vars)
            coeffs[b.start:b.stop] = 1.0
            sense: Literal["<=", "="] = "=" if b.exactly_one else "<="
            rows.append(Row(coeffs, sense, 1.0, f"one-hot:{mod.module_id}", "structural"))
        sos_keys = {(r.coeffs.tobytes(), r.sense, r.rhs) for r in rows}
        for lb in lifted_blocks:
            # axis sums of the cell grid must match the parent one-hot blocks
            grid = np.arange(lb.n_cells).reshape(lb.shape) + lb.start
            for axis, module_id in enumerate(lb.key):
                b = blocks[block_pos[module_id]]
                for j in range(lb.shape[axis]):
                    coeffs = np.zeros(n_vars)
                    cell_idx = np.take(grid, j, axis=axis).ravel()
                    coeffs[cell_idx] = 1.0
                    coeffs[b.start + j] = -1.0
                    rows.append(Row(coeffs, "=", 0.0,
                                    f"link:{'*'.join(lb.key)}:{module_id}[{j}]", "structural"))
        for form, sense, rhs, label, transformation in self.pending_rows:
            coeffs = densify(form)
            rhs_adj = rhs - form.offset
            if (coeffs.tobytes(), sense, rhs_adj) in sos_keys:
                continue  # restriction duplicating a one-hot row
            rows.append(Row(coeffs, sense, rhs_adj, label, transformation))

        objective_stack: list[LoweredObjective] = []
        for form, label, transformation, exactness in self.pending_objectives:
            objective_stack.append(LoweredObjective(densify(form), form.offset,
                                                    label, transformation, exactness))
        instance = BlpInstance(tuple(variables), tuple(blocks), tuple(lifted_blocks),
                               tuple(rows), tuple(objective_stack), space=space)
        return instance, LoweringReport(tuple(self.records))


def lower(spec: ex.DesignSpec, *,
          lifting_cap: int = DEFAULT_LIFTING_CAP) -> tuple[BlpInstance, LoweringReport]:
    """Compile a specification into a binary linear program.

    Raises LoweringError naming the first objective or constraint that fits
    none of the cases (and has no surrogate attached).
    """
    builder = _Builder(spec.space, lifting_cap)
    for i, obj in enumerate(spec.objectives):
        label = obj.label or f"objective[{i}]"
        target = obj.lowered_expr
        try:
            form, _, transformation = builder.lower_expr_preferring_logs(target, label, None)
        except LoweringError as exc:
            raise LoweringError(f"objective {label!r}: {exc}") from exc
        if obj.surrogate is not None:
            transformation, exactness = "surrogate-lower-bound", "conservative"
        else:
            exactness = "exact-argmax-preserving"
        builder.pending_objectives.append((form, label, transformation, exactness))
        builder.records.append(LoweringRecord(label, "objective", transformation, exactness))

    for i, con in enumerate(spec.constraints):
        label = con.label or f"constraint[{i}]"
        if con.surrogate_lhs is not None:
            lhs = con.surrogate_lhs
            rhs = con.rhs if con.surrogate_rhs is None else con.surrogate_rhs
        else:
            lhs, rhs = con.lhs, con.rhs
        try:
            form, rhs_out, transformation = builder.lower_expr_preferring_logs(lhs, label, rhs)
        except LoweringError as exc:
            raise LoweringError(f"constraint {label!r}: {exc}") from exc
        if con.surrogate_lhs is not None:
            transformation, exactness = "surrogate-upper-bound", "conservative"
        else:
            exactness = "exact-argmax-preserving"
        builder.pending_rows.append((form, con.sense, float(rhs_out), label, transformation))
        builder.records.append(LoweringRecord(label, "constraint", transformation, exactness))

    for rule in spec.compat_rules:
        coeffs, rhs, flagged = lower_compat(spec.space, rule)
        form = LinForm()
        start = 0
        for mod in spec.space.modules:
            seg = coeffs[start:start + mod.size]
            if np.any(seg):
                form.add_block(mod.module_id, seg.copy())
            start += mod.size
        label = rule.label()
        builder.pending_rows.append((form, "<=", rhs, label, "linear-passthrough"))
        exactness: Exactness = "exact-argmax-preserving"
        builder.records.append(LoweringRecord(
            label + (" [unsatisfiable-if-selected]" if flagged else ""),
            "compat", "linear-passthrough", exactness))

    return builder.assemble(spec)


# ---------------------------------------------------------------------------
# Text export


def export_lp(instance: BlpInstance) -> str:
    """Fixed-form LP text (maximize first objective; rows; binary section).

    Secondary lexicographic levels are emitted as comments, since the plain
    LP format carries a single objective.
    """
    names = [v.name.replace(" ", "_") for v in instance.variables]
    safe = [n.translate(str.maketrans("[]()=*,", "_______")) for n in names]

    def lincomb(coeffs: np.ndarray) -> str:
        parts = []
        for j, c in enumerate(coeffs):
            if c == 0:
                continue
            sign = "+" if c >= 0 else "-"
            parts.append(f"{sign} {abs(c):.17g} {safe[j]}")
        if not parts:
            return "0"
        first = parts[0]
        first = first[2:] if first.startswith("+ ") else "-" + first[2:]
        return " ".join([first] + parts[1:])

    out = ["\\ lowered co-design program"]
    top = instance.objective_stack[0] if instance.objective_stack else None
    out.append("Maximize")
    out.append(f" obj: {lincomb(top.coeffs) if top is not None else '0'}")
    for k, obj in enumerate(instance.objective_stack[1:], start=2):
        out.append(f"\\ level {k} ({obj.label}): {lincomb(obj.coeffs)}")
    out.append("Subject To")
    for i, row in enumerate(instance.rows):
        op = "<=" if row.sense == "<=" else "="
        out.append(f" r{i}: {lincomb(row.coeffs)} {op} {row.rhs:.17g}")
    out.append("Binary")
    for n in safe:
        out.append(f" {n}")
    out.append("End")
    return "\n".join(out) + "\n"


def provenance_json(instance: BlpInstance, report: LoweringReport | None = None) -> str:
    doc: dict = {"rows": instance.provenance()}
    if report is not None:
        doc["expressions"] = [
            {"label": r.label, "target": r.target, "transformation": r.transformation,
             "exactness": r.exactness}
            for r in report.records
        ]
    return json.dumps(doc, indent=2, sort_keys=True)
