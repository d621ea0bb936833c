"""Shared immutable data types for simulated and ingested datasets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

INTERCEPT = "intercept"


def _frozen(values: np.ndarray | Sequence[float], dtype: type = float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SemParams:
    """Standardized coefficients of the two-period neighborhood/behavior/arrest SEM.

    ``sigma_u`` is the residual sd of the latent behavior given ``x`` and
    ``sigma_y`` the residual sd of the proxy given ``x`` and the latent.
    ``delta`` is the residual covariance of the two latents, ``eta * sigma_u**2``.
    """

    beta: float
    alpha: float
    gamma: float
    eta: float
    sigma_x: float
    sigma_u: float
    sigma_y: float
    delta: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SemDataset:
    """Rows ``(x, u0, u1, y0, y1)`` drawn from the SEM."""

    x: np.ndarray
    u0: np.ndarray
    u1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    seed: int
    params: Optional[SemParams] = None

    def __post_init__(self) -> None:
        columns = {}
        for name in ("x", "u0", "u1", "y0", "y1"):
            column = _frozen(getattr(self, name))
            if column.ndim != 1:
                raise ValueError(f"column {name} must be one-dimensional")
            if not np.all(np.isfinite(column)):
                raise ValueError(f"column {name} contains non-finite values")
            columns[name] = column
        lengths = {column.shape[0] for column in columns.values()}
        if len(lengths) != 1:
            raise ValueError("SEM columns must have equal length")
        if lengths.pop() < 2:
            raise ValueError("a SEM dataset needs at least two rows")
        for name, column in columns.items():
            object.__setattr__(self, name, column)

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    def subset(self, rows: np.ndarray) -> "SemDataset":
        """Return the dataset restricted to ``rows`` (index or mask)."""

        return SemDataset(
            x=self.x[rows],
            u0=self.u0[rows],
            u1=self.u1[rows],
            y0=self.y0[rows],
            y1=self.y1[rows],
            seed=self.seed,
            params=self.params,
        )


@dataclass(frozen=True)
class ThresholdSpec:
    """Diagnosis thresholds of the threshold measurement model.

    Diagnosis happens iff ``u1 >= tau(group) + e`` with ``e`` half-normal with
    scale ``e_scale``; every ``tau`` is stored non-negative.
    """

    base_alpha: float
    tau_by_group: Mapping[str, float]
    e_scale: float = 0.1

    def __post_init__(self) -> None:
        if not self.e_scale > 0:
            raise ValueError("e_scale must be positive")
        taus = {str(group): float(tau) for group, tau in self.tau_by_group.items()}
        negative = sorted(group for group, tau in taus.items() if tau < 0)
        if negative:
            raise ValueError(f"thresholds must be non-negative: {', '.join(negative)}")
        object.__setattr__(self, "tau_by_group", taus)

    @property
    def groups(self) -> Tuple[str, ...]:
        return tuple(self.tau_by_group)

    def to_dict(self) -> Dict[str, object]:
        return {
            "base_alpha": self.base_alpha,
            "tau_by_group": dict(self.tau_by_group),
            "e_scale": self.e_scale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "ThresholdSpec":
        try:
            return cls(
                base_alpha=float(data["base_alpha"]),  # type: ignore[arg-type]
                tau_by_group=dict(data["tau_by_group"]),  # type: ignore[call-overload]
                e_scale=float(data.get("e_scale", 0.1)),  # type: ignore[arg-type]
            )
        except KeyError as exc:
            raise ValueError(f"threshold spec is missing {exc.args[0]!r}") from exc

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        path.write_text(payload + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "ThresholdSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class CovariateSpec:
    """Layout of the synthetic diagnosis covariates.

    Columns are ordered intercept, group indicator (when ``group_in_design``),
    then ``n_continuous`` standard-normal covariates.
    """

    uninsured_rate: float = 0.15
    n_continuous: int = 2
    group_in_design: bool = True
    group_labels: Tuple[str, str] = ("insured", "uninsured")

    def __post_init__(self) -> None:
        if not 0.0 <= self.uninsured_rate <= 1.0:
            raise ValueError("uninsured_rate must lie in [0, 1]")
        if self.n_continuous < 0:
            raise ValueError("n_continuous must be non-negative")

    @property
    def column_names(self) -> Tuple[str, ...]:
        names = [INTERCEPT]
        if self.group_in_design:
            names.append(self.group_labels[1])
        names.extend(f"x{i + 1}" for i in range(self.n_continuous))
        return tuple(names)


@dataclass(frozen=True, eq=False)
class ThresholdDataset:
    """Binary-proxy view: design ``X``, group label per row, proxy ``y``.

    ``u3`` (true binary outcome) and ``u1`` (latent severity) are present for
    simulated data and optional otherwise.
    """

    X: np.ndarray
    group: np.ndarray
    y: np.ndarray
    u3: Optional[np.ndarray] = None
    u1: Optional[np.ndarray] = None
    column_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        X = _frozen(self.X)
        if X.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        n = X.shape[0]
        group = np.array(self.group, dtype=object)
        group.setflags(write=False)
        y = _frozen(self.y)
        if group.shape != (n,) or y.shape != (n,):
            raise ValueError("group and proxy columns must match the design rows")
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("proxy labels must be binary")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "y", y)
        if self.u3 is not None:
            u3 = _frozen(self.u3)
            if u3.shape != (n,) or not np.all(np.isin(u3, (0.0, 1.0))):
                raise ValueError("true outcome must be a binary column matching the design")
            if np.any(y > u3):
                raise ValueError("proxy exceeds true outcome; the model assumes no false positives")
            object.__setattr__(self, "u3", u3)
        if self.u1 is not None:
            object.__setattr__(self, "u1", _frozen(self.u1))
        if not self.column_names:
            object.__setattr__(self, "column_names", tuple(f"c{i}" for i in range(X.shape[1])))

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def subset(self, rows: np.ndarray) -> "ThresholdDataset":
        return ThresholdDataset(
            X=self.X[rows],
            group=self.group[rows],
            y=self.y[rows],
            u3=None if self.u3 is None else self.u3[rows],
            u1=None if self.u1 is None else self.u1[rows],
            column_names=self.column_names,
        )

    def without_columns(self, names: Sequence[str]) -> "ThresholdDataset":
        """Drop design columns by name (e.g. the group indicator)."""

        keep = [i for i, name in enumerate(self.column_names) if name not in set(names)]
        return ThresholdDataset(
            X=self.X[:, keep],
            group=self.group,
            y=self.y,
            u3=self.u3,
            u1=self.u1,
            column_names=tuple(self.column_names[i] for i in keep),
        )


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles read from the JSON sidecar next to a CSV file."""

    covariates: Tuple[str, ...]
    proxy: str
    truth: Optional[str] = None
    group: Optional[str] = None
    group_labels: Mapping[str, str] = field(default_factory=dict)

    @property
    def declared(self) -> Tuple[str, ...]:
        names = list(self.covariates) + [self.proxy]
        names.extend(name for name in (self.truth, self.group) if name)
        return tuple(names)

    def label_for(self, code: float) -> str:
        key = str(int(code)) if float(code).is_integer() else str(code)
        return str(self.group_labels.get(key, key))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-named real matrix with role assignments."""

    columns: Tuple[str, ...]
    values: np.ndarray
    schema: DatasetSchema

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ValueError("values must be a matrix with one column per name")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    @property
    def proxy(self) -> np.ndarray:
        return self.column(self.schema.proxy)

    @property
    def truth(self) -> Optional[np.ndarray]:
        return self.column(self.schema.truth) if self.schema.truth else None

    def design(self, include_group: bool = False) -> Tuple[np.ndarray, Tuple[str, ...]]:
        """Intercept first, then the declared covariates, then the group indicator."""

        names = [INTERCEPT, *self.schema.covariates]
        if include_group and self.schema.group and self.schema.group not in names:
            names.append(self.schema.group)
        return np.column_stack([self.column(name) for name in names]), tuple(names)

    def group_labels(self) -> np.ndarray:
        if not self.schema.group:
            return np.full(self.n, "all", dtype=object)
        codes = self.column(self.schema.group)
        return np.array([self.schema.label_for(code) for code in codes], dtype=object)

    def to_threshold_dataset(self, include_group: bool = True) -> ThresholdDataset:
        X, names = self.design(include_group=include_group)
        return ThresholdDataset(
            X=X,
            group=self.group_labels(),
            y=self.proxy,
            u3=self.truth,
            column_names=names,
        )


_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Normal or half-normal prior; ``scale == 0`` pins the parameter at ``loc``."""

    family: Literal["normal", "half_normal"] = "normal"
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.scale < 0:
            raise ValueError("prior scale must be non-negative")
        if self.family not in ("normal", "half_normal"):
            raise ValueError(f"unsupported prior family {self.family!r}")

    @property
    def is_point_mass(self) -> bool:
        return self.scale == 0

    def logpdf(self, value: float) -> float:
        z = (value - self.loc) / self.scale
        density = -0.5 * z * z - math.log(self.scale) - 0.5 * _LOG_2PI
        if self.family == "half_normal":
            return density + math.log(2.0) if value >= self.loc else -math.inf
        return density
