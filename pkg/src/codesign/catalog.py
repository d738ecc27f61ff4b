"""Module catalogs, feature matrices, and the binary design space.

A robot design is assembled by picking one component per module (motor,
frame, camera, ...) out of per-module catalogs.  Each catalog is stored as a
feature matrix: rows are named technical features (weight, cost, thrust,
...), columns are the candidate components.  The stacked one-hot selection
over all modules is the design vector; this module owns that data model,
the problem-file loader, and exhaustive enumeration of the design space.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

try:  # stdlib on 3.11+
    import tomllib as _toml
except ImportError:  # pragma: no cover
    import tomli as _toml

DEFAULT_ENUM_CAP = 10_000_000
ENUM_CAP_ENV_VAR = "CODESIGN_ENUM_CAP"


class CatalogError(ValueError):
    """Problem-file or catalog validation failure, with a location hint."""

    def __init__(self, message: str, *, module: str | None = None, feature: str | None = None):
        loc = ""
        if module is not None:
            loc = f" (module {module!r}"
            loc += f", feature {feature!r})" if feature is not None else ")"
        super().__init__(message + loc)
        self.module = module
        self.feature = feature


class EnumerationCapExceeded(RuntimeError):
    """Design space too large to enumerate under the configured cap."""


def _split_unit(name: str) -> tuple[str, str]:
    """Split ``"thrust [N]"`` into ``("thrust", "N")``; unit is optional."""
    name = name.strip()
    if name.endswith("]") and "[" in name:
        base, _, unit = name.rpartition("[")
        return base.strip(), unit[:-1].strip()
    return name, ""


@dataclass(frozen=True)
class FeatureMatrix:
    """Catalog of one module: named feature rows x candidate components.

    ``values[r, c]`` is feature ``feature_names[r]`` of component
    ``component_names[c]``.  Units are opaque annotations, never checked.
    Modules marked ``optional`` admit the empty selection (at most one
    component instead of exactly one).
    """

    module_id: str
    feature_names: tuple[str, ...]
    feature_units: tuple[str, ...]
    component_names: tuple[str, ...]
    values: np.ndarray  # shape (n_features, n_components), float64, read-only
    optional: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2:
            raise CatalogError("feature values must be 2-D", module=self.module_id)
        n_feat, n_comp = vals.shape
        if n_comp == 0:
            raise CatalogError("catalog is empty", module=self.module_id)
        if n_feat != len(self.feature_names):
            raise CatalogError(
                f"feature count mismatch: {n_feat} rows vs {len(self.feature_names)} names",
                module=self.module_id,
            )
        if n_comp != len(self.component_names):
            raise CatalogError(
                f"component count mismatch: {n_comp} columns vs {len(self.component_names)} names",
                module=self.module_id,
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise CatalogError("duplicate feature names", module=self.module_id)
        if len(set(self.component_names)) != len(self.component_names):
            raise CatalogError("duplicate component names", module=self.module_id)
        if len(self.feature_units) != len(self.feature_names):
            raise CatalogError("unit list length mismatch", module=self.module_id)
        if not np.all(np.isfinite(vals)):
            r, c = np.argwhere(~np.isfinite(vals))[0]
            raise CatalogError(
                f"non-finite value for component {self.component_names[c]!r}",
                module=self.module_id,
                feature=self.feature_names[r],
            )

    @classmethod
    def from_columns(
        cls,
        module_id: str,
        feature_names: Sequence[str],
        components: Sequence[tuple[str, Sequence[float]]],
        *,
        optional: bool = False,
    ) -> "FeatureMatrix":
        """Build from (component_name, feature_values) pairs, one per column."""
        names, units = [], []
        for raw in feature_names:
            n, u = _split_unit(str(raw))
            names.append(n)
            units.append(u)
        comp_names = []
        cols = []
        for comp_name, vals in components:
            comp_names.append(str(comp_name))
            if len(vals) != len(names):
                raise CatalogError(
                    f"component {comp_name!r} has {len(vals)} values, expected {len(names)}",
                    module=module_id,
                )
            cols.append([float(v) for v in vals])
        values = np.array(cols, dtype=np.float64).T if cols else np.zeros((len(names), 0))
        return cls(
            module_id=module_id,
            feature_names=tuple(names),
            feature_units=tuple(units),
            component_names=tuple(comp_names),
            values=values,
            optional=optional,
        )

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @property
    def n_choices(self) -> int:
        """Catalog size plus one for the empty selection of optional modules."""
        return self.size + (1 if self.optional else 0)

    def feature_index(self, feature: str) -> int:
        try:
            return self.feature_names.index(feature)
        except ValueError:
            raise CatalogError("unknown feature", module=self.module_id, feature=feature) from None

    def component_index(self, component: str) -> int:
        try:
            return self.component_names.index(component)
        except ValueError:
            raise CatalogError(
                f"unknown component {component!r}", module=self.module_id
            ) from None

    def row(self, feature: str) -> np.ndarray:
        """Feature row across all components (read-only view)."""
        return self.values[self.feature_index(feature)]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]


@dataclass(frozen=True)
class DesignSpace:
    """Ordered collection of module catalogs; immutable once built."""

    modules: tuple[FeatureMatrix, ...]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [m.module_id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise CatalogError("duplicate module ids in design space")
        object.__setattr__(self, "_index", {mid: i for i, mid in enumerate(ids)})

    @property
    def total_dim(self) -> int:
        """Dimension of the design space: sum of catalog sizes."""
        return sum(m.size for m in self.modules)

    @property
    def module_ids(self) -> tuple[str, ...]:
        return tuple(m.module_id for m in self.modules)

    def module(self, module_id: str) -> FeatureMatrix:
        try:
            return self.modules[self._index[module_id]]
        except KeyError:
            raise CatalogError(f"unknown module {module_id!r}") from None

    def module_position(self, module_id: str) -> int:
        try:
            return self._index[module_id]
        except KeyError:
            raise CatalogError(f"unknown module {module_id!r}") from None

    def n_designs(self) -> int:
        """Number of admissible designs (optional modules add the empty choice)."""
        return math.prod(m.n_choices for m in self.modules)


@dataclass(frozen=True)
class DesignVector:
    """One selection per module: component index, or None for an unselected
    optional module.  Equivalent to the stacked one-hot binary vector."""

    space: DesignSpace
    selections: tuple[int | None, ...]

    def __post_init__(self):
        if len(self.selections) != len(self.space.modules):
            raise ValueError("selection count does not match module count")
        for mod, sel in zip(self.space.modules, self.selections):
            if sel is None:
                if not mod.optional:
                    raise ValueError(f"required module {mod.module_id!r} left unselected")
            elif not 0 <= sel < mod.size:
                raise ValueError(f"component index {sel} out of range for {mod.module_id!r}")

    @classmethod
    def from_blocks(cls, space: DesignSpace, blocks: Sequence[Sequence[int]]) -> "DesignVector":
        """Build from per-module binary blocks, validating X membership."""
        if len(blocks) != len(space.modules):
            raise ValueError("block count does not match module count")
        selections: list[int | None] = []
        for mod, block in zip(space.modules, blocks):
            if len(block) != mod.size:
                raise ValueError(f"block length mismatch for module {mod.module_id!r}")
            ones = [j for j, v in enumerate(block) if v == 1]
            if any(v not in (0, 1) for v in block):
                raise ValueError(f"non-binary entry in block for {mod.module_id!r}")
            if len(ones) == 1:
                selections.append(ones[0])
            elif len(ones) == 0 and mod.optional:
                selections.append(None)
            else:
                kind = "at most" if mod.optional else "exactly"
                raise ValueError(
                    f"block for {mod.module_id!r} must have {kind} one entry set, got {len(ones)}"
                )
        return cls(space, tuple(selections))

    @property
    def blocks(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for mod, sel in zip(self.space.modules, self.selections):
            block = [0] * mod.size
            if sel is not None:
                block[sel] = 1
            out.append(tuple(block))
        return tuple(out)

    def selection(self, module_id: str) -> int | None:
        return self.selections[self.space.module_position(module_id)]

    def component_name(self, module_id: str) -> str | None:
        sel = self.selection(module_id)
        if sel is None:
            return None
        return self.space.module(module_id).component_names[sel]

    def index_tuple(self) -> tuple[int, ...]:
        """Deterministic sort key; the empty choice sorts before component 0."""
        return tuple(-1 if s is None else s for s in self.selections)

    def as_dict(self) -> dict[str, str | None]:
        return {mid: self.component_name(mid) for mid in self.space.module_ids}


def feature_row(space: DesignSpace, module: str, feature: str) -> np.ndarray:
    """Row of the module's feature matrix; dotting it with a one-hot block
    yields the selected component's value of that feature."""
    return space.module(module).row(feature)


def enumeration_cap(cap: int | None = None) -> int:
    """Effective enumeration cap: explicit argument, else env override, else default."""
    if cap is not None:
        return cap
    env = os.environ.get(ENUM_CAP_ENV_VAR)
    if env:
        return int(env)
    return DEFAULT_ENUM_CAP


def enumerate_designs(space: DesignSpace, cap: int | None = None) -> Iterator[DesignVector]:
    """Yield every admissible design exactly once, in lexicographic order of
    per-module choice (the empty choice of an optional module comes first).

    Raises EnumerationCapExceeded before yielding anything if the design
    count exceeds the cap (default 1e7, env CODESIGN_ENUM_CAP).
    """
    limit = enumeration_cap(cap)
    total = space.n_designs()
    if total > limit:
        raise EnumerationCapExceeded(
            f"design space has {total} combinations, enumeration cap is {limit}"
        )
    choice_lists: list[list[int | None]] = []
    for mod in space.modules:
        choices: list[int | None] = list(range(mod.size))
        if mod.optional:
            choices.insert(0, None)
        choice_lists.append(choices)
    for combo in itertools.product(*choice_lists):
        yield DesignVector(space, tuple(combo))


def design_from_flat_index(space: DesignSpace, flat: int) -> DesignVector:
    """Design at position ``flat`` of the enumerate_designs order (mixed radix,
    last module fastest)."""
    radices = [m.n_choices for m in space.modules]
    digits = []
    for radix in reversed(radices):
        digits.append(flat % radix)
        flat //= radix
    digits.reverse()
    selections: list[int | None] = []
    for mod, digit in zip(space.modules, digits):
        if mod.optional:
            selections.append(None if digit == 0 else digit - 1)
        else:
            selections.append(digit)
    return DesignVector(space, tuple(selections))


# ---------------------------------------------------------------------------
# Problem-file ingestion (TOML tables, optional CSV sidecars)


def _components_from_csv(path: Path, module_id: str) -> tuple[list[str], list[tuple[str, list[float]]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read CSV sidecar {path}: {exc}", module=module_id) from exc
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise CatalogError("CSV sidecar needs a header row and at least one component",
                           module=module_id)
    features = [cell.strip() for cell in rows[0][1:]]
    components = []
    for r in rows[1:]:
        name = r[0].strip()
        try:
            vals = [float(cell) for cell in r[1:]]
        except ValueError as exc:
            raise CatalogError(f"non-numeric value in CSV row {name!r}: {exc}",
                               module=module_id) from exc
        components.append((name, vals))
    return features, components


def _module_from_table(module_id: str, table: Mapping, base_dir: Path) -> FeatureMatrix:
    if not isinstance(table, Mapping):
        raise CatalogError("module entry must be a table", module=module_id)
    optional = bool(table.get("optional", False))
    if "csv" in table:
        features, components = _components_from_csv(base_dir / table["csv"], module_id)
    else:
        try:
            features = table["features"]
            raw_components = table["components"]
        except KeyError as exc:
            raise CatalogError(f"missing key {exc.args[0]!r}", module=module_id) from None
        components = []
        for row in raw_components:
            if not isinstance(row, Sequence) or len(row) < 1 or isinstance(row, (str, bytes)):
                raise CatalogError("component rows must be [name, v1, v2, ...]", module=module_id)
            name, *vals = row
            for v in vals:
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise CatalogError(
                        f"non-numeric feature value {v!r} for component {name!r}",
                        module=module_id,
                    )
            components.append((str(name), [float(v) for v in vals]))
    return FeatureMatrix.from_columns(module_id, features, components, optional=optional)


def parse_problem_document(source: str | Path) -> dict:
    """Parse a problem file (path or literal TOML text) into a plain dict."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith(".toml")):
        path = Path(source)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise CatalogError(f"cannot read problem file {path}: {exc}") from exc
        base_dir = path.parent
    else:
        raw = str(source).encode("utf-8")
        base_dir = Path.cwd()
    try:
        doc = _toml.loads(raw.decode("utf-8"))
    except (_toml.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise CatalogError(f"problem file is not valid TOML: {exc}") from exc
    doc["__base_dir__"] = base_dir
    return doc


def design_space_from_document(doc: Mapping) -> DesignSpace:
    tables = doc.get("module")
    if not tables:
        raise CatalogError("problem file declares no [module.<id>] tables")
    base_dir = doc.get("__base_dir__", Path.cwd())
    modules = [
        _module_from_table(module_id, table, base_dir) for module_id, table in tables.items()
    ]
    return DesignSpace(tuple(modules))


def load_design_space(source: str | Path) -> DesignSpace:
    """Load and validate the design space from a problem file.

    Accepts a path to a .toml file or literal TOML text.  Catalogs may be
    inline (``components = [["name", v, ...], ...]``) or CSV sidecars
    (``csv = "file.csv"``, header row = feature names, first column =
    component names).
    """
    return design_space_from_document(parse_problem_document(source))


def _toml_escape(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_design_space(space: DesignSpace) -> str:
    """Serialize catalogs back to problem-file TOML; load(dump(s)) == s."""
    out: list[str] = []
    for mod in space.modules:
        out.append(f"[module.{mod.module_id}]")
        if mod.optional:
            out.append("optional = true")
        names = []
        for name, unit in zip(mod.feature_names, mod.feature_units):
            names.append(_toml_escape(f"{name} [{unit}]" if unit else name))
        out.append(f"features = [{', '.join(names)}]")
        out.append("components = [")
        for j, comp in enumerate(mod.component_names):
            vals = ", ".join(repr(float(v)) for v in mod.values[:, j])
            out.append(f"    [{_toml_escape(comp)}, {vals}],")
        out.append("]")
        out.append("")
    return "\n".join(out)
