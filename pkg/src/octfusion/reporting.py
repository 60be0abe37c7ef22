"""Plain-text and CSV renderings of result tables.

Text tables print values x100 to two decimals and mark the best entry of
each column with ``*``. CSV output keeps raw, unscaled values.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .data import CLASS_DISPLAY, CLASSES
from .metrics import MetricsReport

CSV_FIELDS = ("model", "shot", "class", "precision", "recall", "f1", "accuracy", "seed")
METRIC_COLUMNS = (("Precision", "precision"), ("Recall", "recall"), ("F1-score", "f1"))


class Layout(str, enum.Enum):
    TABLE2 = "table2"
    TABLE3 = "table3"
    TABLE4 = "table4"


@dataclass
class AuditRow:
    model: str
    training_mode: str
    trainable: int
    note: str = ""


@dataclass
class Rendered:
    text: str
    csv: str


def round_half_away(value: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def pct(value: float) -> str:
    return str(round_half_away(value * 100.0))


def millions(count: int) -> str:
    return f"{round_half_away(count / 1e6, 3)} M"


def _grid(header: list, rows: list) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(r) for r in rows]) + "\n"


def _shot_label(report: MetricsReport) -> str:
    return report.split or ""


def _best(values: list) -> set:
    keyed = [round_half_away(v * 100.0) for v in values]
    top = max(keyed)
    return {i for i, v in enumerate(keyed) if v == top}


def _mark(value: float, best: bool) -> str:
    return pct(value) + ("*" if best else "")


def report_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        for m in r.per_class:
            w.writerow([r.model, _shot_label(r), m.name, repr(m.precision), repr(m.recall), repr(m.f1),
                        repr(r.accuracy), "" if r.seed is None else r.seed])
    return buf.getvalue()


def _model_blocks(reports: list[MetricsReport]) -> list[tuple[str, list]]:
    header = ["Model", "Classes"] + [c for c, _ in METRIC_COLUMNS] + ["Accuracy"]
    n_classes = len(reports[0].per_class)
    best_acc = _best([r.accuracy for r in reports])
    best_cells = {
        (k, attr): _best([getattr(r.per_class[k], attr) for r in reports])
        for k in range(n_classes) for _, attr in METRIC_COLUMNS
    }
    rows = []
    for i, r in enumerate(reports):
        label = r.model if r.seed is None or _unique_models(reports) else f"{r.model} (seed {r.seed})"
        for k, m in enumerate(r.per_class):
            cells = [_mark(getattr(m, attr), i in best_cells[(k, attr)]) for _, attr in METRIC_COLUMNS]
            name = CLASS_DISPLAY.get(m.name, m.name) + (" (degenerate)" if m.degenerate else "")
            rows.append([label if k == 0 else "", name] + cells + [_mark(r.accuracy, i in best_acc) if k == 0 else ""])
    return header, rows


def _unique_models(reports) -> bool:
    return len({r.model for r in reports}) == len(reports)


def render_table2(reports: list[MetricsReport]) -> Rendered:
    header, rows = _model_blocks(reports)
    return Rendered(_grid(header, rows), report_csv(reports))


def render_table4(reports: list[MetricsReport]) -> Rendered:
    """One column group per shot, one row block per model."""
    keys = [(r.model, _shot_label(r)) for r in reports]
    dup = len(set(keys)) != len(keys)
    label = lambda r: f"{r.model} (seed {r.seed})" if dup and r.seed is not None else r.model
    shots = list(dict.fromkeys(_shot_label(r) for r in reports))
    models = list(dict.fromkeys(label(r) for r in reports))
    by_key = {(label(r), _shot_label(r)): r for r in reports}
    header = ["Model", "Classes"]
    for s in shots:
        header += [f"{s} {c}" for c, _ in METRIC_COLUMNS] + [f"{s} Accuracy"]
    n_classes = len(reports[0].per_class)
    best = {}
    for s in shots:
        group = [by_key[(m, s)] for m in models if (m, s) in by_key]
        mlist = [m for m in models if (m, s) in by_key]
        for idx in _best([r.accuracy for r in group]):
            best[(mlist[idx], s, "accuracy")] = True
        for k in range(n_classes):
            for _, attr in METRIC_COLUMNS:
                for idx in _best([getattr(r.per_class[k], attr) for r in group]):
                    best[(mlist[idx], s, k, attr)] = True
    rows = []
    for model in models:
        for k in range(n_classes):
            name = CLASSES[k] if k < len(CLASSES) else str(k)
            row = [model if k == 0 else "", CLASS_DISPLAY.get(name, name)]
            for s in shots:
                r = by_key.get((model, s))
                if r is None:
                    row += ["-"] * (len(METRIC_COLUMNS) + 1)
                    continue
                m = r.per_class[k]
                row += [_mark(getattr(m, attr), best.get((model, s, k, attr), False)) for _, attr in METRIC_COLUMNS]
                row.append(_mark(r.accuracy, best.get((model, s, "accuracy"), False)) if k == 0 else "")
            rows.append(row)
    return Rendered(_grid(header, rows), report_csv(reports))


def render_table3(rows: list[AuditRow]) -> Rendered:
    low = min(r.trainable for r in rows)
    text_rows = [[r.model, r.training_mode, millions(r.trainable) + ("*" if r.trainable == low else ""), r.note]
                 for r in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "training_mode", "trainable", "trainable_millions", "note"])
    for r in rows:
        w.writerow([r.model, r.training_mode, r.trainable, millions(r.trainable).split()[0], r.note])
    return Rendered(_grid(["Model", "Training mode", "Trainable parameter", "Note"], text_rows), buf.getvalue())


def render_report(items: list, layout) -> Rendered:
    layout = Layout(layout)
    if not items:
        raise ValueError("nothing to render")
    if layout is Layout.TABLE3:
        return render_table3(items)
    if layout is Layout.TABLE4:
        return render_table4(items)
    return render_table2(items)


def read_metrics_csv(path) -> list[MetricsReport]:
    """Rebuild reports (ratios only, no counts) from a metrics CSV."""
    from .metrics import ClassMetrics

    grouped = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], row["shot"], row["seed"])
            rep = grouped.setdefault(key, MetricsReport([], float(row["accuracy"]), None, row["model"], row["shot"],
                                                        int(row["seed"]) if row["seed"] else None))
            k = CLASSES.index(row["class"]) if row["class"] in CLASSES else len(rep.per_class)
            rep.per_class.append(ClassMetrics(k, 0, 0, 0, 0, float(row["precision"]), float(row["recall"]),
                                              float(row["f1"])))
    return list(grouped.values())
