"""Average suite tables over seeds and print one line per setting.

Usage: python3 scripts/summarize.py RUNS_DIR
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path
from statistics import mean

COLUMNS = ("f1", "pp", "r1_i2t", "r1_t2i")


def main(root: str) -> None:
    for table in sorted(Path(root).rglob("table.csv")):
        groups = defaultdict(list)
        with open(table) as fh:
            for row in csv.DictReader(fh):
                groups[row["setting"]].append(row)
        print(f"== {table.parent.relative_to(root) if table.parent != Path(root) else '.'}")
        for setting, rows in groups.items():
            cells = [f"{c}={mean(float(r[c]) for r in rows):.3f}" for c in COLUMNS if c in rows[0]]
            print(f"  {setting:>16} (n={len(rows)}): " + " ".join(cells))
    for report in sorted(Path(root).rglob("report.csv")):
        with open(report) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            first, last = rows[0], rows[-1]
            print(f"== {report.parent.relative_to(root)}: F1 {float(first['f1']):.3f} -> {float(last['f1']):.3f} "
                  f"over {len(rows)} iterations")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
