"""
Variable declarations and the mixed-type dataset container.

Every observed variable is tied to a latent Gaussian row:

* continuous rows are observed directly,
* ordinal and binary rows are observed through fixed thresholds,
* nominal variables with ``P`` levels become ``P - 1`` binary rows,
* count rows are Poisson with log-rate equal to the latent value.

After expansion the latent rows are ordered continuous, categorical, count.
Those three row groups are called the alpha, beta and gamma blocks.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

KINDS = ("continuous", "ordinal", "binary", "nominal", "count")
CATEGORICAL = ("ordinal", "binary", "nominal")
_BLOCK = {"continuous": 0, "ordinal": 1, "binary": 1, "nominal": 1, "count": 2}


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("ordinal", "nominal"):
            if self.levels is None or int(self.levels) < 2:
                raise ValidationError(f"variable {self.name!r}: {self.kind} needs levels >= 2")
            object.__setattr__(self, "levels", int(self.levels))
        elif self.kind == "binary":
            object.__setattr__(self, "levels", 2)
        else:
            object.__setattr__(self, "levels", None)

    @property
    def block(self):
        return _BLOCK[self.kind]


@dataclass(frozen=True)
class Schema:
    """Ordered variable declarations; one latent row per variable once expanded."""

    variables: tuple = field(default_factory=tuple)

    def __post_init__(self):
        variables = tuple(self.variables)
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ValidationError("variable names must be unique")
        object.__setattr__(self, "variables", variables)

    @classmethod
    def from_list(cls, items):
        """Build from ``[{"name": ..., "kind": ..., "levels": ...}, ...]``."""
        return cls(tuple(VariableSpec(d["name"], d["kind"], d.get("levels")) for d in items))

    def to_list(self):
        out = []
        for v in self.variables:
            d = {"name": v.name, "kind": v.kind}
            if v.kind in ("ordinal", "nominal"):
                d["levels"] = v.levels
            out.append(d)
        return out

    @property
    def J(self):
        return len(self.variables)

    @property
    def names(self):
        return [v.name for v in self.variables]

    def _rows(self, block):
        return np.array([j for j, v in enumerate(self.variables) if v.block == block], dtype=int)

    @property
    def alpha(self):
        return self._rows(0)

    @property
    def beta(self):
        return self._rows(1)

    @property
    def gamma(self):
        return self._rows(2)

    @property
    def has_nominal(self):
        return any(v.kind == "nominal" for v in self.variables)

    @property
    def is_canonical(self):
        blocks = [v.block for v in self.variables]
        return blocks == sorted(blocks)

    @property
    def is_latent_ready(self):
        return self.is_canonical and not self.has_nominal

    def expanded(self):
        """Latent-row schema and, per latent row, ``(source index, level)``.

        ``level`` is ``None`` except for nominal indicator rows, where it is the
        observed level (2..P) whose presence the row encodes.
        """
        rows = []
        for block in (0, 1, 2):
            for j, v in enumerate(self.variables):
                if v.block != block:
                    continue
                if v.kind == "nominal":
                    for level in range(2, v.levels + 1):
                        rows.append((VariableSpec(f"{v.name}[{level}]", "binary"), j, level))
                else:
                    rows.append((v, j, None))
        schema = Schema(tuple(r[0] for r in rows))
        return schema, [(r[1], r[2]) for r in rows]


@dataclass(frozen=True, eq=False)
class MixedDataset:
    """``N`` observed ``J x T`` matrices sharing one schema.

    ``values`` stores reals for continuous rows and integer codes (as floats)
    for every other kind: ``1..levels`` for ordinal and nominal, ``{1, 2}`` for
    binary and non-negative integers for counts.
    """

    schema: Schema
    values: np.ndarray
    units: tuple = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise ShapeError(f"values must be (N, J, T), got shape {values.shape}")
        if values.shape[1] != self.schema.J:
            raise ShapeError(f"values have {values.shape[1]} rows, schema declares {self.schema.J}")
        units = self.units
        if units is None:
            units = tuple(str(i + 1) for i in range(values.shape[0]))
        units = tuple(str(u) for u in units)
        if len(units) != values.shape[0]:
            raise ShapeError("one unit identifier per matrix is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "units", units)
        self.validate()

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def J(self):
        return self.values.shape[1]

    @property
    def T(self):
        return self.values.shape[2]

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("dataset contains missing or non-finite entries")
        for j, v in enumerate(self.schema.variables):
            x = self.values[:, j, :]
            if v.kind == "continuous":
                continue
            if np.any(x != np.round(x)):
                raise ValidationError(f"variable {v.name!r} must hold integer codes")
            if v.kind == "count":
                if np.any(x < 0):
                    raise ValidationError(f"variable {v.name!r}: counts must be non-negative")
            elif np.any(x < 1) or np.any(x > v.levels):
                raise ValidationError(f"variable {v.name!r}: codes must lie in 1..{v.levels}")

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return MixedDataset(self.schema, self.values[idx], tuple(self.units[i] for i in idx))

    def __eq__(self, other):
        if not isinstance(other, MixedDataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.units == other.units
            and np.array_equal(self.values, other.values)
        )


def expand_nominal(ds):
    """Replace nominal variables by indicator rows and put rows in block order.

    Level 1 is the reference level: indicator row for level ``p`` reads 2 when
    the observed level is ``p`` and 1 otherwise.
    """
    ds.validate()
    if ds.schema.is_latent_ready:
        return ds
    latent, sources = ds.schema.expanded()
    out = np.empty((ds.N, latent.J, ds.T))
    for r, (j, level) in enumerate(sources):
        if level is None:
            out[:, r, :] = ds.values[:, j, :]
        else:
            out[:, r, :] = np.where(ds.values[:, j, :] == level, 2.0, 1.0)
    return MixedDataset(latent, out, ds.units)


def thresholds_for(v):
    """Cut points ``(-inf, ..., inf)`` of length ``levels + 1`` for a categorical row."""
    if v.kind == "ordinal":
        inner = np.arange(1, v.levels) + 0.5
    elif v.kind == "binary":
        inner = np.array([0.0])
    else:
        raise ValidationError(f"variable {v.name!r} of kind {v.kind!r} has no thresholds")
    return np.concatenate(([-np.inf], inner, [np.inf]))


def discretize(z, thresholds):
    """Category ``c`` (1-based) with ``thresholds[c-1] < z <= thresholds[c]``.

    Accepts a scalar or an array of latent values.
    """
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)):
        raise ValidationError("latent value must be finite")
    c = np.searchsorted(np.asarray(thresholds, dtype=float), z_arr, side="left")
    return int(c) if c.ndim == 0 else c


def latent_init_view(ds):
    """Real-valued stand-in for the latent matrices, used by initialisation.

    Continuous values and categorical codes are kept, counts become ``log(y + 1)``.
    """
    if not ds.schema.is_latent_ready:
        raise ValidationError("latent_init_view needs an expanded dataset (see expand_nominal)")
    out = ds.values.copy()
    g = ds.schema.gamma
    if g.size:
        out[:, g, :] = np.log1p(ds.values[:, g, :])
    return out


def category_bounds(ds):
    """Latent interval ``(lower, upper]`` implied by each categorical entry.

    Returns two ``(N, O, T)`` arrays for the beta rows of an expanded dataset.
    """
    if not ds.schema.is_latent_ready:
        raise ValidationError("category_bounds needs an expanded dataset")
    b = ds.schema.beta
    lower = np.empty((ds.N, b.size, ds.T))
    upper = np.empty_like(lower)
    for r, j in enumerate(b):
        thr = thresholds_for(ds.schema.variables[j])
        codes = ds.values[:, j, :].astype(int)
        lower[:, r, :] = thr[codes - 1]
        upper[:, r, :] = thr[codes]
    return lower, upper
