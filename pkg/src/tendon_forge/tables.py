"""CSV output with fixed 17-significant-digit formatting."""

from __future__ import annotations

import csv

import numpy as np


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_markers(path, times, names, pos) -> None:
    """Marker trajectories as ``t, <name>.x, <name>.y[, <name>.z]``."""
    pos = np.asarray(pos, dtype=float)
    axes = "xyz"[: pos.shape[-1]]
    header = ["t"] + [f"{n}.{a}" for n in names for a in axes]
    rows = ([t] + list(p.reshape(-1)) for t, p in zip(times, pos))
    write_csv(path, header, rows)


def read_markers(path) -> tuple[np.ndarray, list[str], np.ndarray]:
    header, rows = read_csv(path)
    if not header or header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    cols = header[1:]
    names: list[str] = []
    axes: list[str] = []
    for c in cols:
        name, _, ax = c.rpartition(".")
        if not name or ax not in "xyz":
            raise ValueError(f"{path}: bad marker column {c!r}")
        if name not in names:
            names.append(name)
        if ax not in axes:
            axes.append(ax)
    dim = len(axes)
    if len(cols) != dim * len(names):
        raise ValueError(f"{path}: inconsistent marker columns")
    data = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(len(rows), -1)
    return data[:, 0], names, data[:, 1:].reshape(len(rows), len(names), dim)
