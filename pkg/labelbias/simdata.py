"""Data generation for the stylized SEM and the diagnosis threshold model, plus CSV ingestion."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pandas as pd

from .models import (
    INTERCEPT,
    CovariateSpec,
    Dataset,
    DatasetSchema,
    SemDataset,
    SemParams,
    ThresholdDataset,
    ThresholdSpec,
)

log = logging.getLogger(__name__)

# Variances within this distance of zero are treated as exactly zero.
_VARIANCE_ATOL = 1e-12

SEM_STREAM = 0
THRESHOLD_STREAM = 1


class InfeasibleStandardization(ValueError):
    """Raised when no exogenous variances standardize the SEM."""

    def __init__(self, message: str, *, variance: str = "") -> None:
        super().__init__(message)
        self.variance = variance


class DatasetError(ValueError):
    """Base class for CSV ingestion failures."""


class MissingColumn(DatasetError):
    def __init__(self, column: str, path: Path) -> None:
        super().__init__(f"{path}: declared column {column!r} not found in header")
        self.column = column
        self.path = path


class NonNumericCell(DatasetError):
    def __init__(self, path: Path, row: int, column: str, value: object) -> None:
        super().__init__(f"{path}: row {row}, column {column!r}: non-numeric value {value!r}")
        self.path = path
        self.row = row
        self.column = column
        self.value = value


class EmptyFile(DatasetError):
    def __init__(self, path: Path) -> None:
        super().__init__(f"{path}: no header or no data rows")
        self.path = path


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; identical inputs give identical streams."""

    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)]))


def standardize_sem(beta: float, alpha: float, gamma: float, eta: float) -> SemParams:
    """Pick residual scales so that ``x``, the latents and the proxies all have unit variance."""

    if not abs(beta) < 1:
        raise InfeasibleStandardization(f"|beta| must be < 1, got {beta}", variance="sigma_u")
    if not abs(eta) < 1:
        raise InfeasibleStandardization(f"|eta| must be < 1, got {eta}", variance="delta")

    sigma_u2 = 1.0 - beta**2
    sigma_y2 = 1.0 - alpha**2 - gamma**2 - 2.0 * alpha * gamma * beta
    if abs(sigma_y2) < _VARIANCE_ATOL:
        sigma_y2 = 0.0
    if sigma_y2 < 0:
        raise InfeasibleStandardization(
            f"proxy residual variance {sigma_y2:.6g} < 0"
            f" for alpha={alpha}, gamma={gamma}, beta={beta}",
            variance="sigma_y",
        )

    return SemParams(
        beta=float(beta),
        alpha=float(alpha),
        gamma=float(gamma),
        eta=float(eta),
        sigma_x=1.0,
        sigma_u=math.sqrt(sigma_u2),
        sigma_y=math.sqrt(sigma_y2),
        delta=float(eta) * sigma_u2,
    )


def implied_moments(params: SemParams) -> Dict[str, float]:
    """Population variances of the latents/proxies and the latent autocorrelation."""

    var_u = params.beta**2 * params.sigma_x**2 + params.sigma_u**2
    var_y = (
        params.alpha**2
        + params.gamma**2 * var_u
        + 2.0 * params.alpha * params.gamma * params.beta
        + params.sigma_y**2
    )
    return {
        "var_x": params.sigma_x**2,
        "var_u": var_u,
        "var_y": var_y,
        "corr_u": (params.beta**2 + params.delta) / var_u,
    }


def simulate_sem(params: SemParams, n: int, seed: int, *, stream: int = SEM_STREAM) -> SemDataset:
    """Draw ``n`` i.i.d. rows of the SEM."""

    if n < 2:
        raise ValueError("n must be at least 2")
    rng = rng_for(seed, stream)
    z = rng.standard_normal((n, 5))

    x = params.sigma_x * z[:, 0]
    r0 = params.sigma_u * z[:, 1]
    r1 = params.sigma_u * (params.eta * z[:, 1] + math.sqrt(1.0 - params.eta**2) * z[:, 2])
    u0 = params.beta * x + r0
    u1 = params.beta * x + r1
    y0 = params.alpha * x + params.gamma * u0 + params.sigma_y * z[:, 3]
    y1 = params.alpha * x + params.gamma * u1 + params.sigma_y * z[:, 4]
    return SemDataset(x=x, u0=u0, u1=u1, y0=y0, y1=y1, seed=seed, params=params)


def simulate_threshold_dgp(
    coefs: Sequence[float],
    spec: ThresholdSpec,
    n: int,
    seed: int,
    covariate_spec: CovariateSpec | None = None,
    *,
    with_slack: bool = True,
    stream: int = THRESHOLD_STREAM,
) -> ThresholdDataset:
    """Simulate latent severity, true status and diagnosis for ``n`` people.

    ``u1 ~ logistic(X coefs, 1)``, ``u3 = [u1 >= 0]`` and ``y = [u1 >= tau(group) + e]``
    with ``e = |e_scale * z|``.
    """

    if n < 2:
        raise ValueError("n must be at least 2")
    covariate_spec = covariate_spec or CovariateSpec()
    coefs = np.asarray(coefs, dtype=float)
    names = covariate_spec.column_names
    if coefs.shape != (len(names),):
        raise ValueError(
            f"expected {len(names)} coefficients for columns {names}, got {coefs.shape}"
        )
    missing = [label for label in covariate_spec.group_labels if label not in spec.tau_by_group]
    if missing:
        raise ValueError(f"threshold spec has no entry for {', '.join(missing)}")

    rng = rng_for(seed, stream)
    uninsured = rng.random(n) < covariate_spec.uninsured_rate
    columns = [np.ones(n)]
    if covariate_spec.group_in_design:
        columns.append(uninsured.astype(float))
    if covariate_spec.n_continuous:
        columns.extend(rng.standard_normal((covariate_spec.n_continuous, n)))
    X = np.column_stack(columns)

    u1 = X @ coefs + rng.logistic(0.0, 1.0, size=n)
    slack = np.abs(spec.e_scale * rng.standard_normal(n))
    if not with_slack:
        slack = np.zeros(n)
    labels = np.array(covariate_spec.group_labels, dtype=object)[uninsured.astype(int)]
    tau = np.where(
        uninsured,
        spec.tau_by_group[covariate_spec.group_labels[1]],
        spec.tau_by_group[covariate_spec.group_labels[0]],
    )
    y = (u1 >= tau + slack).astype(float)
    u3 = (u1 >= 0).astype(float)
    return ThresholdDataset(X=X, group=labels, y=y, u3=u3, u1=u1, column_names=names)


def load_schema(path: Path) -> DatasetSchema:
    """Read the JSON sidecar ``{covariates: [...], proxy, truth, group, group_labels}``."""

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid schema JSON: {exc}") from exc
    if not isinstance(raw, dict) or "proxy" not in raw:
        raise DatasetError(f"{path}: schema must be an object with at least a 'proxy' entry")
    return DatasetSchema(
        covariates=tuple(raw.get("covariates", ())),
        proxy=str(raw["proxy"]),
        truth=raw.get("truth"),
        group=raw.get("group"),
        group_labels={str(k): str(v) for k, v in (raw.get("group_labels") or {}).items()},
    )


def load_csv(path: Path, schema: DatasetSchema) -> Dataset:
    """Load a UTF-8 CSV with a header row and append an intercept column."""

    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise EmptyFile(path) from exc
    if frame.empty:
        raise EmptyFile(path)
    frame.columns = [str(name).strip() for name in frame.columns]

    for name in schema.declared:
        if name not in frame.columns:
            raise MissingColumn(name, path)

    numeric = {}
    for name in frame.columns:
        text = frame[name].str.strip()
        parsed = pd.to_numeric(text, errors="coerce")
        bad = parsed.isna().to_numpy()
        if bad.any():
            if name not in schema.declared:
                log.debug("Skipping non-numeric undeclared column %s", name)
                continue
            row = int(np.flatnonzero(bad)[0])
            # header is line 1, first data row is line 2
            raise NonNumericCell(path, row + 2, name, frame[name].iloc[row])
        numeric[name] = parsed.to_numpy(dtype=float)

    columns = tuple(numeric) + (INTERCEPT,)
    values = np.column_stack([*numeric.values(), np.ones(len(frame))])
    log.info("Loaded %d rows x %d columns from %s", values.shape[0], values.shape[1] - 1, path)
    return Dataset(columns=columns, values=values, schema=schema)


def _format_cell(value: float) -> str:
    return np.format_float_positional(value, trim="-") if np.isfinite(value) else str(value)


def write_csv(dataset: Dataset, path: Path) -> None:
    """Write the non-intercept columns with the shortest round-trip float text."""

    names = [name for name in dataset.columns if name != INTERCEPT]
    frame = pd.DataFrame(
        {name: [_format_cell(v) for v in dataset.column(name)] for name in names}
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
