"""Long-format CSV export/ingestion and run manifests.

One row per (patient, time); irregular sampling is represented by absent rows
in observed-only views and by the ``observed`` flag otherwise.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .sim import TrajectoryRecord


class DataIoError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    n_covariates: int
    n_treatments: int
    has_confounder: bool
    has_observed: bool

    @property
    def columns(self) -> list[str]:
        cols = ["patient_id", "t"]
        cols += [f"x_{i}" for i in range(self.n_covariates)]
        cols += [f"a_{i}" for i in range(self.n_treatments)]
        cols.append("y")
        if self.has_confounder:
            cols.append("z")
        if self.has_observed:
            cols.append("observed")
        return cols


def schema_for(dataset: Sequence[TrajectoryRecord], observed_only: bool) -> CsvSchema:
    first = dataset[0]
    return CsvSchema(
        n_covariates=first.covariates.shape[1],
        n_treatments=first.treatments.shape[1],
        has_confounder=all(r.true_confounder is not None for r in dataset),
        has_observed=not observed_only,
    )


def export_csv(
    dataset: Sequence[TrajectoryRecord], path: str | Path, observed_only: bool = False
) -> CsvSchema:
    """Write the dataset in long format; observed-only views drop masked rows."""
    if len(dataset) == 0:
        raise DataIoError("refusing to export an empty dataset")
    schema = schema_for(dataset, observed_only)
    frames = []
    for rec in dataset:
        sel = rec.observed_mask if observed_only else np.ones(len(rec), dtype=bool)
        data = {"patient_id": rec.patient_id, "t": rec.times[sel]}
        for i in range(schema.n_covariates):
            data[f"x_{i}"] = rec.covariates[sel, i]
        for i in range(schema.n_treatments):
            data[f"a_{i}"] = rec.treatments[sel, i].astype(int)
        data["y"] = rec.outcome[sel]
        if schema.has_confounder:
            data["z"] = rec.true_confounder[sel]
        if schema.has_observed:
            data["observed"] = rec.observed_mask[sel].astype(int)
        frames.append(pd.DataFrame(data))
    table = pd.concat(frames, ignore_index=True)[schema.columns]
    table.to_csv(path, index=False)
    return schema


def _contiguous_indexed(columns: list[str], prefix: str) -> int:
    idx = sorted(
        int(c[len(prefix):]) for c in columns
        if c.startswith(prefix) and c[len(prefix):].isdigit()
    )
    if idx != list(range(len(idx))):
        raise DataIoError(f"{prefix}* columns must be contiguous from {prefix}0, got {idx}")
    return len(idx)


def ingest_csv(path: str | Path, schema: CsvSchema | None = None) -> list[TrajectoryRecord]:
    """Read a long-format CSV into trajectory records.

    Rows absent from the file are simply unobserved times; an optional
    ``observed`` column marks retained-but-masked rows, and an optional ``z``
    column populates the true confounder.
    """
    try:
        table = pd.read_csv(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataIoError(f"cannot read CSV {path}: {exc}") from exc
    cols = list(table.columns)
    for required in ("patient_id", "t", "y"):
        if required not in cols:
            raise DataIoError(f"missing required column '{required}' in {path}")
    k = _contiguous_indexed(cols, "x_")
    j = _contiguous_indexed(cols, "a_")
    if k == 0 or j == 0:
        raise DataIoError("need at least one x_* and one a_* column")
    inferred = CsvSchema(
        n_covariates=k, n_treatments=j,
        has_confounder="z" in cols, has_observed="observed" in cols,
    )
    if schema is not None and schema != inferred:
        raise DataIoError(f"CSV schema {inferred} does not match expected {schema}")
    if not inferred.has_confounder:
        warnings.warn(
            "no z column: true confounders unavailable, CovSim will be disabled",
            stacklevel=2,
        )

    records = []
    for pid, group in table.groupby("patient_id", sort=False):
        times = group["t"].to_numpy(dtype=float)
        if len(np.unique(times)) != len(times):
            raise DataIoError(f"duplicate (patient_id, t) rows for patient {pid!r}")
        if np.any(np.diff(times) <= 0):
            raise DataIoError(f"timestamps not strictly increasing for patient {pid!r}")
        treatments = group[[f"a_{i}" for i in range(j)]].to_numpy(dtype=float)
        if not np.isin(treatments, (0.0, 1.0)).all():
            raise DataIoError(f"non-binary treatment values for patient {pid!r}")
        observed = (
            group["observed"].to_numpy(dtype=float) > 0.5
            if inferred.has_observed
            else np.ones(len(times), dtype=bool)
        )
        records.append(
            TrajectoryRecord(
                patient_id=str(pid),
                times=times,
                covariates=group[[f"x_{i}" for i in range(k)]].to_numpy(dtype=float),
                treatments=treatments,
                outcome=group["y"].to_numpy(dtype=float),
                true_confounder=(
                    group["z"].to_numpy(dtype=float) if inferred.has_confounder else None
                ),
                observed_mask=observed,
            )
        )
    if not records:
        raise DataIoError(f"no rows in {path}")
    return records


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    code_version: str
    seed_list: list[int]
    created_at: str
    files: list[str]

    @classmethod
    def create(cls, run_id: str, config_hash: str, seeds: Sequence[int], files: Sequence[str]):
        from . import __version__

        return cls(
            run_id=run_id,
            config_hash=config_hash,
            code_version=__version__,
            seed_list=list(seeds),
            created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
            files=sorted(files),
        )


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file and rename so readers never see partial content."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    write_atomic(path, json.dumps(asdict(manifest), sort_keys=True, indent=2) + "\n")
    return path


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
