"""CSV schemas and a lossless writer/reader pair (floats go through ``repr``)."""

from __future__ import annotations

import csv
import io
import math

from metricmm.checkpoint import atomic_write_text
from metricmm.errors import ConfigurationError

CURVE_COLUMNS = (
    "epoch", "env_steps", "train_return", "eval_return_mean", "eval_return_std", "critic_loss",
    "actor_loss", "alpha", "repr_loss_total", "L_T", "L_plus", "L_minus", "L_inv",
)
EVAL_COLUMNS = (
    "estimator", "kind", "p", "K", "targets", "episodes", "seeds", "return_mean", "return_std",
)
METRIC_COLUMNS = (
    "checkpoint", "pairs", "spearman", "pearson", "adjacent_pairs", "adjacent_dev_mean",
    "adjacent_dev_max", "adjacent_dist_mean", "degenerate",
)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _fmt(v.item())
    return str(v)


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    atomic_write_text(path, buf.getvalue())


def _parse(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_csv(path, columns=None) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if columns is not None and header != tuple(columns):
            raise ConfigurationError(f"{path}: unexpected columns {header}")
        return [dict(zip(header, map(_parse, r))) for r in rd]


def rows_equal(a: list[dict], b: list[dict]) -> bool:
    """Equality treating NaN == NaN."""
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if ra.keys() != rb.keys():
            return False
        for k in ra:
            x, y = ra[k], rb[k]
            if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
    return True
