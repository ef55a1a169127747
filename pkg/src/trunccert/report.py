"""CSV emission with fixed formatting (17 significant digits, lowercase booleans)."""

from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".16e")
    return str(x)


def render(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render(header, rows))


def iteration_rows(report):
    return [(rec.iteration, rec.v_norm_diff, rec.wall_time_ms) for rec in report]


ITERATION_HEADER = ("iter", "v_norm_diff", "wall_time_ms")


def field_rows(field):
    """t, s_1..s_d, regime, value for every node of a price field."""
    nodes = field.nodes().reshape(-1, field.d)
    vals = field.values.reshape(field.t_grid.size, nodes.shape[0], field.k)
    for n, t in enumerate(field.t_grid):
        for p, s in enumerate(nodes):
            for i in range(field.k):
                yield (float(t), *map(float, s), i, float(vals[n, p, i]))


def field_header(d: int):
    return ("t", *[f"s_{l + 1}" for l in range(d)], "regime", "value")
