"""Shared CSV conventions: ``%.17g`` numbers and a ``# key=value`` tag line."""

import csv

import numpy as np


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer, str)):
        return str(v)
    return f"{float(v):.17g}"


def tag_line(tags):
    return "# " + " ".join(f"{k}={v}" for k, v in sorted(tags.items())) + "\n"


def write_rows(path, header, rows, tags=None):
    with open(path, "w", newline="") as fh:
        if tags:
            fh.write(tag_line(tags))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_rows(path):
    """Header and rows (as strings) of a file written by :func:`write_rows`."""
    with open(path) as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[0], rows[1:]
