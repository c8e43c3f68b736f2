#!/usr/bin/env python3
"""Writes discovery_fixture.csv and prints the exhaustive parity count.

Every numeric column holds 18 distinct values whose global ranks place
exactly six records in each tercile, so the category of every cell is fixed
by construction:

  L -> ranks 0-5, M -> ranks 6-11, H -> ranks 12-17.

share_a drives the target unevenly; share_b gives identical conditional
target distributions in every task.
"""
from fractions import Fraction
from itertools import combinations
import csv
import sys

TASKS = {
    "district_a": {
        "y":       "LLMLMHHHM",
        "share_a": "LLLMMMHHH",
        "share_b": "LMLHMLMHH",
    },
    "district_b": {
        "y":       "MHLLMMHHL",
        "share_a": "LLLMMMHHH",
        "share_b": "LLLMMHMHH",
    },
}
BASE = {"y": (10, 1), "share_a": (0.05, 0.05), "share_b": (0.02, 0.05)}
EPSILON = Fraction(5, 100)
LEVELS = "LMH"


def numeric(column):
    start, step = BASE[column]
    counters = {lvl: LEVELS.index(lvl) * 6 for lvl in LEVELS}
    out = {}
    for task, cols in TASKS.items():
        vals = []
        for lvl in cols[column]:
            vals.append(round(start + step * counters[lvl], 4))
            counters[lvl] += 1
        out[task] = vals
    return out


def parity(var):
    within = total = skipped = 0
    lines = []
    for task, cols in TASKS.items():
        y, s = cols["y"], cols[var]
        for ylvl in LEVELS:
            cond = {}
            for slvl in LEVELS:
                members = [i for i, v in enumerate(s) if v == slvl]
                cond[slvl] = (Fraction(sum(y[i] == ylvl for i in members), len(members))
                              if members else None)
            for a, b in combinations(LEVELS, 2):
                total += 1
                if cond[a] is None or cond[b] is None:
                    skipped += 1
                    continue
                diff = abs(cond[a] - cond[b])
                ok = diff <= EPSILON
                within += ok
                lines.append(f"{task} y={ylvl} ({a},{b}) |{cond[a]} - {cond[b]}| = {diff} {'ok' if ok else ''}")
    return Fraction(within, total - skipped), within, total, skipped, lines


def main():
    cols = {c: numeric(c) for c in BASE}
    with open(sys.argv[1] if len(sys.argv) > 1 else "discovery_fixture.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["district", "share_a", "share_b", "incidents"])
        for task in TASKS:
            for i in range(9):
                w.writerow([task, cols["share_a"][task][i], cols["share_b"][task][i], cols["y"][task][i]])
    for var in ("share_a", "share_b"):
        r, n, total, skipped, lines = parity(var)
        print(f"{var}: r = {n}/{total - skipped} = {r} (total {total}, skipped {skipped})")
        for line in lines:
            print("   ", line)


if __name__ == "__main__":
    main()
