"""CSV schemas and deterministic number rendering for every CLI output."""

from __future__ import annotations

import csv
import io
import math
from typing import Iterable, Mapping

from gearkv.accounting import MemoryReport

SCHEMA_VERSION = 1

SCHEMAS: dict[str, tuple[str, ...]] = {
    "compress": ("cfg_id", "role", "bits", "sparsity", "rank", "backbone", "coverage_p", "rows", "cols",
                 "frobenius", "relative", "max_abs", "share_backbone", "share_lowrank", "share_outliers"),
    "sweep": ("bits", "sparsity", "rank_prefill", "rank_decode", "coverage_p", "buffer", "backbone",
              "key_relative", "value_relative", "relative", "kv_size_percent"),
    "deviate": ("step", "l2_dev", "cosine", "cfg_id"),
    "account": ("cfg_id", "n_prefill", "n_gen", "d", "heads") + MemoryReport.FIELDS,
    "dominance": ("seed", "role", "backbone_rel", "gear_l_rel", "gear_rel", "gear_l_ratio", "gear_ratio"),
}


def fmt(value) -> str:
    """Render one cell: integers verbatim, reals at 9 significant digits."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if value == 0:
            return "0"
        return format(value, ".9g")
    if hasattr(value, "item"):  # numpy scalar
        return fmt(value.item())
    return str(value)


def render_csv(schema: str, rows: Iterable[Mapping]) -> str:
    columns = SCHEMAS[schema]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise KeyError(f"{schema} row lacks columns {missing}")
        writer.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()
