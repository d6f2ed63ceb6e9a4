import csv
import json

import numpy as np


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    elif isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    elif isinstance(value, np.ndarray):
        return _plain(value.tolist())
    elif isinstance(value, np.integer):
        return int(value)
    elif isinstance(value, np.floating):
        return float(value)
    elif isinstance(value, np.bool_):
        return bool(value)
    else:
        return value


def dump_record(record):
    return json.dumps(_plain(record), sort_keys=True)


def write_jsonl(path, records):
    with open(str(path), "w") as f:
        for record in records:
            f.write(dump_record(record) + "\n")


def write_csv(path, rows, fields=None):
    rows = [_plain(row) for row in rows]
    if fields is None:
        fields = sorted({key for row in rows for key in row})
    with open(str(path), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row.get(key)) for key in fields})


def _cell(value):
    if value is None:
        return ""
    elif isinstance(value, list):
        return " ".join(str(v) for v in value)
    else:
        return value


def write_grid_csv(path, grid, fmt="{0}"):
    with open(str(path), "w") as f:
        for row in np.asarray(grid):
            f.write(",".join(fmt.format(v) for v in row) + "\n")


def write_pgm(path, grid, max_value):
    """
    Plain (P2) grayscale image of `grid` scaled so that `max_value` is
    white.
    """
    grid = np.asarray(grid, dtype=np.float64)
    levels = 255
    if max_value > 0:
        pixels = np.rint(np.clip(grid / max_value, 0.0, 1.0) * levels)
    else:
        pixels = np.zeros_like(grid)
    rows, cols = grid.shape
    with open(str(path), "w") as f:
        f.write("P2\n{0} {1}\n{2}\n".format(cols, rows, levels))
        for row in pixels.astype(np.int64):
            f.write(" ".join(str(v) for v in row) + "\n")
