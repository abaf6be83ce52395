"""Tab-separated results tables with provenance header lines."""
from __future__ import annotations

import csv
import json
from pathlib import Path


def provenance_lines(provenance):
    return [f"# {k}\t{json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v}"
            for k, v in sorted(provenance.items())]


def write_table(path, header, rows, provenance):
    """Write ``rows`` (sequences aligned with ``header``) as TSV after ``# key<TAB>value`` lines."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        for line in provenance_lines(provenance):
            f.write(line + "\n")
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def read_table(path):
    """Returns (provenance dict, header, rows) with every cell as a string."""
    prov, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("\t")
            prov[k] = v
        else:
            body.append(line)
    rows = list(csv.reader(body, delimiter="\t"))
    return prov, rows[0], rows[1:]


def pivot(entries, metric):
    """Model x category layout of ``"mean ± std"`` cells.

    ``entries``: dicts with keys model, category and ``metric`` (a MetricSummary).
    """
    models = sorted({e["model"] for e in entries})
    cats = sorted({e["category"] for e in entries})
    cell = {(e["model"], e["category"]): e[metric] for e in entries}
    header = ["model", *cats]
    rows = [[m, *(str(cell[(m, c)]) if (m, c) in cell else "" for c in cats)] for m in models]
    return header, rows
