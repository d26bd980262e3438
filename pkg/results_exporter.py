#!/usr/bin/env python3
"""
Export results to CSV and JSON: per-epoch training logs, the sweep results
table, per-figure slices, summary statistics and the plot script that maps
slice columns to figure axes.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

TRAIN_LOG_HEADER = ("epoch", "lr", "recon_mean", "recon_var", "kl", "total", "grad_norm")

RESULTS_HEADER = (
    "family", "k", "beta", "seed", "status", "epochs", "final_total", "final_kl",
    "mc", "pz", "r2", "overall", "wall_seconds",
)
_RESULT_TYPES = {
    "family": str, "k": int, "beta": float, "seed": int, "status": str, "epochs": int,
    "final_total": float, "final_kl": float, "mc": float, "pz": float, "r2": float,
    "overall": float, "wall_seconds": float,
}


def format_cell(value) -> str:
    """Shortest round-trip text for floats so reruns serialize identically."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _csv_line(values: Sequence) -> str:
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator="\n").writerow([format_cell(v) for v in values])
    return buffer.getvalue()


class TrainLogWriter:
    """
    Incremental per-epoch CSV log.

    Each row is flushed as soon as it is written so a crashed run keeps every
    completed epoch.
    """

    def __init__(self, path: str):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self.path = path
        self._file = open(path, "w", newline="")
        self._file.write(_csv_line(TRAIN_LOG_HEADER))
        self._file.flush()

    def write(self, row: Dict[str, float]) -> None:
        self._file.write(_csv_line([row[name] for name in TRAIN_LOG_HEADER]))
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "TrainLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def append_result_row(path: str, row: Dict) -> None:
    """
    Append one results row as a single write, creating the header if needed.

    The line is flushed and fsynced before returning, so an interrupted sweep
    never leaves a half-written row behind.
    """
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    text = _csv_line(RESULTS_HEADER) if new_file else ""
    text += _csv_line([row[name] for name in RESULTS_HEADER])
    with open(path, "a", newline="") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())


def read_results(path: str) -> List[Dict]:
    """
    Parse a results CSV.

    Raises
    ------
    ValueError
        Header differs from RESULTS_HEADER or a cell cannot be parsed
    """
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return []
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != RESULTS_HEADER:
            raise ValueError(f"{path}: malformed results CSV header {header}")
        for line_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(RESULTS_HEADER):
                raise ValueError(f"{path}:{line_no}: expected {len(RESULTS_HEADER)} cells, got {len(cells)}")
            try:
                rows.append({
                    name: _RESULT_TYPES[name](cell) for name, cell in zip(RESULTS_HEADER, cells)
                })
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    return rows


def write_results(path: str, rows: Iterable[Dict]) -> None:
    """Rewrite the results CSV atomically (temp file + rename)."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", newline="") as f:
        f.write(_csv_line(RESULTS_HEADER))
        for row in rows:
            f.write(_csv_line([row[name] for name in RESULTS_HEADER]))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)


def export_table(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a plain CSV table."""
    with open(path, "w", newline="") as f:
        f.write(_csv_line(header))
        for row in rows:
            f.write(_csv_line(row))


def export_results_to_json(
    results: Dict,
    output_path: str,
    timestamp: Optional[str] = None
) -> None:
    """
    Export results dictionary to JSON file.

    Parameters
    ----------
    results : dict
        Results dictionary with metrics and statistics
    output_path : str
        Path to save JSON file
    timestamp : str, optional
        Value of the ``timestamp`` field (defaults to now)
    """
    def convert(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.integer, np.floating)):
            return float(value)
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    json_results = convert(results)
    json_results["timestamp"] = timestamp or datetime.now().isoformat()

    with open(output_path, "w") as f:
        json.dump(json_results, f, indent=2)


def _describe(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(np.mean(arr)),
        "std": float(np.std(arr)),
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
        "median": float(np.median(arr)),
    }


def generate_summary_statistics(rows: List[Dict]) -> Dict:
    """
    Summary statistics of the metric columns per family and K.

    Parameters
    ----------
    rows : list
        Parsed results rows (only ``status == "ok"`` rows contribute)

    Returns
    -------
    dict
        family -> "k=<K>" -> metric -> {mean, std, min, max, median}, plus counts
    """
    stats: Dict = {}
    ok_rows = [r for r in rows if r["status"] == "ok"]
    for family in sorted({r["family"] for r in ok_rows}):
        family_rows = [r for r in ok_rows if r["family"] == family]
        stats[family] = {"count": len(family_rows)}
        for k in sorted({r["k"] for r in family_rows}):
            cell = [r for r in family_rows if r["k"] == k]
            stats[family][f"k={k}"] = {
                "count": len(cell),
                **{metric: _describe([r[metric] for r in cell]) for metric in ("mc", "pz", "r2", "overall")},
            }
    stats["failed"] = len(rows) - len(ok_rows)
    return stats


# ---------------------------------------------------------------------------
# Plot script
# ---------------------------------------------------------------------------

PLOT_SCRIPT_HEADER = "# pvfe plot script v1"
PLOT_SCRIPT_GRAMMAR = """\
# Grammar: one block per figure, one directive per line, '#' starts a comment.
#   figure <name> <output.png>
#     csv <file>                  CSV slice, relative to this script
#     x <column> [log]            x axis column (log scale optional)
#     y <column> [log]            y axis column
#     group <column>[,<column>]   one series per distinct value tuple
#     errorbar <column>           optional symmetric error column for y
#     style line|scatter
#     title <text>
#   end
"""


@dataclass
class PlotSpec:
    name: str
    output: str
    csv: str = ""
    x: str = ""
    y: str = ""
    x_log: bool = False
    y_log: bool = False
    group: List[str] = field(default_factory=list)
    errorbar: Optional[str] = None
    style: str = "line"
    title: str = ""

    def to_lines(self) -> List[str]:
        lines = [f"figure {self.name} {self.output}", f"  csv {self.csv}"]
        lines.append(f"  x {self.x}" + (" log" if self.x_log else ""))
        lines.append(f"  y {self.y}" + (" log" if self.y_log else ""))
        if self.group:
            lines.append(f"  group {','.join(self.group)}")
        if self.errorbar:
            lines.append(f"  errorbar {self.errorbar}")
        lines.append(f"  style {self.style}")
        if self.title:
            lines.append(f"  title {self.title}")
        lines.append("end")
        return lines


def write_plot_script(path: str, specs: Sequence[PlotSpec]) -> None:
    lines = [PLOT_SCRIPT_HEADER, PLOT_SCRIPT_GRAMMAR.rstrip("\n")]
    for spec in specs:
        lines.append("")
        lines.extend(spec.to_lines())
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def parse_plot_script(text: str) -> List[PlotSpec]:
    """
    Parse a plot script.

    Raises
    ------
    ValueError
        Unknown directive, directive outside a figure block or unterminated block
    """
    specs: List[PlotSpec] = []
    current: Optional[PlotSpec] = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        rest = rest.strip()
        if keyword == "figure":
            if current is not None:
                raise ValueError(f"line {line_no}: nested figure block")
            parts = rest.split()
            if len(parts) != 2:
                raise ValueError(f"line {line_no}: expected 'figure <name> <output>'")
            current = PlotSpec(name=parts[0], output=parts[1])
            continue
        if current is None:
            raise ValueError(f"line {line_no}: '{keyword}' outside a figure block")
        if keyword == "end":
            if not (current.csv and current.x and current.y):
                raise ValueError(f"line {line_no}: figure '{current.name}' needs csv, x and y")
            specs.append(current)
            current = None
        elif keyword == "csv":
            current.csv = rest
        elif keyword in ("x", "y"):
            parts = rest.split()
            if not parts or len(parts) > 2 or (len(parts) == 2 and parts[1] != "log"):
                raise ValueError(f"line {line_no}: expected '{keyword} <column> [log]'")
            setattr(current, keyword, parts[0])
            setattr(current, f"{keyword}_log", len(parts) == 2)
        elif keyword == "group":
            current.group = [c.strip() for c in rest.split(",") if c.strip()]
        elif keyword == "errorbar":
            current.errorbar = rest
        elif keyword == "style":
            if rest not in ("line", "scatter"):
                raise ValueError(f"line {line_no}: unknown style '{rest}'")
            current.style = rest
        elif keyword == "title":
            current.title = rest
        else:
            raise ValueError(f"line {line_no}: unknown directive '{keyword}'")
    if current is not None:
        raise ValueError(f"figure '{current.name}' is missing 'end'")
    return specs
