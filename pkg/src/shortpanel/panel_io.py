"""Panel containers, CSV ingestion and JSON result documents."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SCHEMA = "shortpanel-fa/1"


@dataclass(frozen=True)
class Panel:
    """Balanced ``T x n`` panel with a block assignment for every unit.

    Attributes
    ----------
    Y : ndarray, shape (T, n)
        Observation ``y_{i,t}`` in row ``t``, column ``i``.
    blocks : ndarray of int, shape (n,)
        Block index (0-based, contiguous) of each unit. Errors may be
        correlated within a block and are independent across blocks.
    unit_ids, period_labels : tuple of str
    block_labels : tuple of str
        Original block codes, indexed by the values in ``blocks``.
    """

    Y: np.ndarray
    blocks: np.ndarray
    unit_ids: tuple = ()
    period_labels: tuple = ()
    block_labels: tuple = ()

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise ValueError("panel must be a T x n matrix")
        if not np.all(np.isfinite(Y)):
            t, i = np.argwhere(~np.isfinite(Y))[0]
            raise ValueError(f"non-finite value at period {t}, unit {i}")
        blocks = np.asarray(self.blocks)
        if blocks.shape != (Y.shape[1],):
            raise ValueError("one block id per unit is required")
        blocks = _compact_labels(blocks)
        Y.setflags(write=False)
        blocks.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "blocks", blocks)
        T, n = Y.shape
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(f"u{i + 1}" for i in range(n)))
        if not self.period_labels:
            object.__setattr__(self, "period_labels", tuple(str(t + 1) for t in range(T)))
        if len(self.unit_ids) != n or len(self.period_labels) != T:
            raise ValueError("label lengths do not match the panel")

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    @property
    def n_blocks(self) -> int:
        return int(self.blocks.max()) + 1 if self.n else 0


def _compact_labels(blocks):
    _, inv = np.unique(blocks, return_inverse=True)
    return inv.astype(np.intp)


def make_panel(Y, blocks=None, **labels) -> Panel:
    """Build a :class:`Panel`; every unit is its own block by default."""
    Y = np.asarray(Y, dtype=float)
    if blocks is None:
        blocks = np.arange(Y.shape[1])
    return Panel(Y, blocks, **labels)


@dataclass(frozen=True)
class ObservedFactorData:
    """Portfolio weights ``z[i, t, :]`` (n x T x kO) and risk-free rates (T,)."""

    z: np.ndarray
    risk_free: np.ndarray

    @property
    def k_obs(self) -> int:
        return self.z.shape[2]


def demean(p: Panel | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-sectional mean and centered panel.

    Returns
    -------
    ybar : ndarray, shape (T,)
    Ytilde : ndarray, shape (T, n)
        Columns ``y_i - ybar``.
    """
    Y = p.Y if isinstance(p, Panel) else np.asarray(p, dtype=float)
    if Y.shape[1] < 2:
        raise ValueError("at least two units are needed")
    ybar = Y.mean(axis=1)
    return ybar, Y - ybar[:, None]


def sample_cov(p: Panel | np.ndarray) -> np.ndarray:
    """``Ytilde Ytilde' / n``."""
    _, Yt = demean(p)
    return Yt @ Yt.T / Yt.shape[1]


# ---------------------------------------------------------------- CSV input


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    return rows


def _parse_float(cell, where):
    try:
        x = float(cell)
    except ValueError:
        raise ValueError(f"{where}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(x):
        raise ValueError(f"{where}: missing or non-finite value {cell!r}")
    return x


def load_panel(csv_path, block_path=None) -> Panel:
    """Read ``panel.csv`` (header ``period,unit1,...``) and ``blocks.csv``.

    Parameters
    ----------
    csv_path : path
        One row per period; first column holds period labels.
    block_path : path, optional
        Two columns ``unit,block``. Without it every unit is a singleton
        block.

    Raises
    ------
    ValueError
        On ragged rows, missing or non-numeric cells, units without a block,
        or block entries naming unknown units.
    """
    rows = _read_rows(csv_path)
    header = [h.strip() for h in rows[0]]
    units = header[1:]
    if len(units) < 1:
        raise ValueError(f"{csv_path}: no unit columns")
    if len(set(units)) != len(units):
        raise ValueError(f"{csv_path}: duplicated unit ids")
    periods, data = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{csv_path}: row {r} has {len(row)} cells, expected {len(header)}")
        periods.append(row[0].strip())
        data.append([_parse_float(c, f"{csv_path}: row {r}, unit {units[j]}")
                     for j, c in enumerate(row[1:])])
    Y = np.array(data, dtype=float)

    if block_path is None:
        codes = list(units)
    else:
        brows = _read_rows(block_path)
        bh = [h.strip().lower() for h in brows[0]]
        if bh[:2] != ["unit", "block"]:
            raise ValueError(f"{block_path}: header must be 'unit,block'")
        mapping = {}
        for r, row in enumerate(brows[1:], start=2):
            if len(row) < 2:
                raise ValueError(f"{block_path}: row {r} is incomplete")
            mapping[row[0].strip()] = row[1].strip()
        unknown = sorted(set(mapping) - set(units))
        if unknown:
            raise ValueError(f"{block_path}: unknown unit(s) {unknown[:5]}")
        missing = [u for u in units if u not in mapping]
        if missing:
            raise ValueError(f"{block_path}: no block for unit(s) {missing[:5]}")
        codes = [mapping[u] for u in units]
    labels, blocks = np.unique(np.array(codes, dtype=object).astype(str), return_inverse=True)
    return Panel(Y, blocks, unit_ids=tuple(units), period_labels=tuple(periods),
                 block_labels=tuple(labels))


def save_panel(p: Panel, csv_path, block_path=None) -> None:
    """Write a panel in the format read by :func:`load_panel`.

    Floats are written with ``repr`` so that a reload is bit-exact.
    """
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", *p.unit_ids])
        for t in range(p.T):
            w.writerow([p.period_labels[t], *(repr(float(x)) for x in p.Y[t])])
    if block_path is not None:
        labels = p.block_labels or tuple(str(b) for b in range(p.n_blocks))
        with open(block_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit", "block"])
            for u, b in zip(p.unit_ids, p.blocks):
                w.writerow([u, labels[b]])


def load_observed_factors(factors_path, riskfree_path, p: Panel) -> ObservedFactorData:
    """Read long-format weights ``unit,period,z1..zkO`` and ``period,rf``."""
    rows = _read_rows(factors_path)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["unit", "period"] or len(header) < 3:
        raise ValueError(f"{factors_path}: header must be 'unit,period,z1,...'")
    k_obs = len(header) - 2
    uidx = {u: i for i, u in enumerate(p.unit_ids)}
    tidx = {t: s for s, t in enumerate(p.period_labels)}
    z = np.full((p.n, p.T, k_obs), np.nan)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{factors_path}: row {r} is ragged")
        u, t = row[0].strip(), row[1].strip()
        if u not in uidx or t not in tidx:
            raise ValueError(f"{factors_path}: row {r} refers to unknown unit/period {u!r}/{t!r}")
        z[uidx[u], tidx[t]] = [_parse_float(c, f"{factors_path}: row {r}") for c in row[2:]]
    if np.isnan(z).any():
        i, t, _ = np.argwhere(np.isnan(z))[0]
        raise ValueError(f"{factors_path}: no weights for unit {p.unit_ids[i]}, period {p.period_labels[t]}")

    rf = np.full(p.T, np.nan)
    rrows = _read_rows(riskfree_path)
    for r, row in enumerate(rrows[1:], start=2):
        t = row[0].strip()
        if t not in tidx:
            raise ValueError(f"{riskfree_path}: unknown period {t!r}")
        rf[tidx[t]] = _parse_float(row[1], f"{riskfree_path}: row {r}")
    if np.isnan(rf).any():
        raise ValueError(f"{riskfree_path}: missing periods")
    return ObservedFactorData(z, rf)


# ---------------------------------------------------------------- JSON output


def to_jsonable(obj: Any) -> Any:
    """Convert numpy containers, dataclasses and floats to JSON-ready values."""
    from dataclasses import fields, is_dataclass

    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)
                if not f.name.startswith("_")}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def results_document(estimate: Any = None, tests: Sequence[Any] = (), **extra) -> dict:
    doc = {"schema": SCHEMA, "estimate": to_jsonable(estimate) if estimate is not None else {},
           "tests": [to_jsonable(t) for t in tests]}
    doc.update({k: to_jsonable(v) for k, v in extra.items()})
    return doc


def save_results(path, estimate: Any = None, tests: Sequence[Any] = (), **extra) -> dict:
    """Write a ``shortpanel-fa/1`` JSON document and return it."""
    doc = results_document(estimate, tests, **extra)
    text = json.dumps(doc, indent=2)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")
    return doc


def load_results(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported schema {doc.get('schema')!r}")
    return doc
