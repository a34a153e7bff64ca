"""Straight-line reimplementations of the metrics over a dumped trace CSV.

These deliberately avoid numpy and the package's metric code: rows are read
with the csv module and every formula is written out in its textbook form.
"""

from __future__ import annotations

import csv
import io
import math

TIME_CAP = 20.0
DISTANCE_CAP = 200.0


def load_rows(text):
    """{actor: {step: (t, x, y, s, v)}} keyed by the integer sample number."""
    out = {}
    times = {}
    for row in csv.DictReader(io.StringIO(text)):
        t = float(row["t"])
        k = times.setdefault(row["t"], len(times))
        out.setdefault(row["actor"], {})[k] = (t, float(row["x"]), float(row["y"]), float(row["s"]), float(row["v"]))
    return out


def _common(rows, a, b):
    ks = sorted(set(rows[a]) & set(rows[b]))
    return [(rows[a][k], rows[b][k]) for k in ks]


def euclidean(rows, a, b):
    best = None
    for (t, xa, ya, _, _), (_, xb, yb, _, _) in _common(rows, a, b):
        d = math.sqrt((xa - xb) ** 2 + (ya - yb) ** 2)
        if best is None or d < best:
            best = d
    return DISTANCE_CAP if best is None or best >= DISTANCE_CAP else best


def wttc(rows, a, b, r_sum, accel_sum):
    best = None
    for (_, xa, ya, _, va), (_, xb, yb, _, vb) in _common(rows, a, b):
        g = math.sqrt((xa - xb) ** 2 + (ya - yb) ** 2) - r_sum
        v = va + vb
        if g <= 0:
            tau = 0.0
        elif accel_sum == 0:
            tau = g / v if v > 0 else None
        else:
            # 0.5*A*tau^2 + v*tau - g = 0, positive root
            qa, qb, qc = 0.5 * accel_sum, v, -g
            tau = (-qb + math.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
        if tau is not None and (best is None or tau < best):
            best = tau
    return TIME_CAP if best is None or best >= TIME_CAP else best


def gap_time(rows, a, b, entry_a, entry_b, eps=0.1):
    best = None
    for (_, _, _, sa, va), (_, _, _, sb, vb) in _common(rows, a, b):
        if sa < entry_a and sb < entry_b and va > eps and vb > eps:
            g = abs((entry_a - sa) / va - (entry_b - sb) / vb)
            if best is None or g < best:
                best = g
    return TIME_CAP if best is None or best >= TIME_CAP else best


def trajectory(rows, a, b, entry_a, exit_a, entry_b, exit_b):
    best = None
    for (_, _, _, sa, _), (_, _, _, sb, _) in _common(rows, a, b):
        if sa <= exit_a and sb <= exit_b:
            d = max(0.0, entry_a - sa) + max(0.0, entry_b - sb)
            if best is None or d < best:
                best = d
    return DISTANCE_CAP if best is None or best >= DISTANCE_CAP else best


def _occupancy(track, entry, exit_):
    inside = [t for (t, _, _, s, _) in track.values() if entry <= s <= exit_]
    return (min(inside), max(inside)) if inside else None


def pet(rows, a, b, entry_a, exit_a, entry_b, exit_b):
    ia = _occupancy(rows[a], entry_a, exit_a)
    ib = _occupancy(rows[b], entry_b, exit_b)
    if ia is None or ib is None:
        return TIME_CAP
    if ia[0] <= ib[1] and ib[0] <= ia[1]:
        return 0.0
    gap = ib[0] - ia[1] if ia[1] < ib[0] else ia[0] - ib[1]
    return TIME_CAP if gap >= TIME_CAP else gap


def all_metrics(rows, a, b, r_sum, accel_sum, bounds=None, collided=False):
    """Every metric for the pair; ``bounds`` is (entry_a, exit_a, entry_b, exit_b) or None."""
    out = {"euclidean": euclidean(rows, a, b), "wttc": wttc(rows, a, b, r_sum, accel_sum)}
    if bounds is None:
        out.update(trajectory=DISTANCE_CAP, gap_time=TIME_CAP, pet=TIME_CAP)
    else:
        ea, xa, eb, xb = bounds
        out.update(
            trajectory=trajectory(rows, a, b, ea, xa, eb, xb),
            gap_time=gap_time(rows, a, b, ea, eb),
            pet=pet(rows, a, b, ea, xa, eb, xb),
        )
    if collided:
        out.update(wttc=0.0, gap_time=0.0, pet=0.0)
    return out
