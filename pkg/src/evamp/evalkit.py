"""Label and price metrics, and the report files built from them.

Label scores are micro-F1 over label positions. Each position carries exactly
one predicted and one gold label, so every miss is simultaneously a false
positive (for the predicted class) and a false negative (for the gold class);
micro-F1 therefore equals accuracy. It is still computed from pooled counts and
reported under its conventional name.

Report rows (CSV column order, schema version 1)::

    setting, split, metric, group, count, value

``value`` is ``NA`` when ``count`` is zero.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from evamp.errors import ContractError, DataError, DimensionError
from evamp.labels import ChangeLabel, Direction

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("setting", "split", "metric", "group", "count", "value")
MAGNITUDE_BUCKETS = ("Low", "Medium", "Large")
VALUE_WINDOWS = (5, 10, 15)


def magnitude_bucket(magnitude: int) -> str:
    """Low for 0..15, Medium for 16..31, Large above."""
    if magnitude < 0:
        raise ContractError(f"negative magnitude {magnitude}")
    return "Low" if magnitude <= 15 else "Medium" if magnitude <= 31 else "Large"


def _gold_filter(direction: Direction | str | None, bucket: str | None) -> Callable[[ChangeLabel], bool]:
    if direction is not None:
        direction = Direction(direction)
    if bucket is not None and bucket not in MAGNITUDE_BUCKETS:
        raise ContractError(f"unknown magnitude bucket {bucket!r}")

    def keep(g: ChangeLabel) -> bool:
        return (direction is None or g.direction is direction) and \
            (bucket is None or magnitude_bucket(g.magnitude) == bucket)
    return keep


@dataclass(frozen=True)
class Score:
    value: float | None  # None when no position qualifies
    count: int


def _pooled_f1(pred, gold, correct, direction=None, bucket=None) -> Score:
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise DimensionError(f"{len(pred)} predictions vs {len(gold)} gold labels")
    keep = _gold_filter(direction, bucket)
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        if not keep(g):
            continue
        if correct(p, g):
            tp += 1
        else:
            fp += 1
            fn += 1
    count = tp + fn
    if count == 0:
        return Score(None, 0)
    return Score(2 * tp / (2 * tp + fp + fn), count)


def _same_label(p: ChangeLabel, g: ChangeLabel) -> bool:
    return p == g


def _same_direction(p: ChangeLabel, g: ChangeLabel) -> bool:
    return p.direction is g.direction


def micro_f1(pred: Sequence[ChangeLabel], gold: Sequence[ChangeLabel], task: str = "direction",
             direction=None, bucket: str | None = None) -> Score:
    """``task`` is ``direction`` (change type) or ``label`` (exact token)."""
    if task not in ("direction", "label"):
        raise ContractError(f"task must be direction or label, got {task!r}")
    return _pooled_f1(pred, gold, _same_direction if task == "direction" else _same_label,
                      direction, bucket)


def value_match_f1(pred: Sequence[ChangeLabel], gold: Sequence[ChangeLabel], w: int = 5,
                   direction=None, bucket: str | None = None) -> Score:
    """A position matches when directions agree and magnitudes differ by at most ``w``."""
    if w < 0:
        raise ContractError(f"window must be >= 0, got {w}")
    return _pooled_f1(pred, gold, lambda p, g: p.direction is g.direction and abs(p.magnitude - g.magnitude) <= w,
                      direction, bucket)


# ---- report rows -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    setting: str
    split: str
    metric: str
    group: str
    count: int
    value: float | None

    def cells(self) -> list[str]:
        v = "NA" if self.value is None else repr(float(self.value))
        return [self.setting, self.split, self.metric, self.group, str(self.count), v]


def label_report(pred: Sequence[ChangeLabel], gold: Sequence[ChangeLabel], setting: str,
                 split: str = "test", windows: Iterable[int] = VALUE_WINDOWS) -> list[MetricRow]:
    """Everything the label tables need, as report rows."""
    rows = []

    def add(metric, group, s: Score):
        rows.append(MetricRow(setting, split, metric, group, s.count, s.value))

    add("label_f1", "all", micro_f1(pred, gold, "label"))
    add("direction_f1", "all", micro_f1(pred, gold))
    for d in Direction:
        add("direction_f1", d.value, micro_f1(pred, gold, direction=d))
    for b in MAGNITUDE_BUCKETS:
        for d in Direction:
            add("direction_f1", f"{b}/{d.value}", micro_f1(pred, gold, direction=d, bucket=b))
    for w in windows:
        add(f"value_f1_w{w}", "all", value_match_f1(pred, gold, w))
        for b in MAGNITUDE_BUCKETS:
            for d in Direction:
                add(f"value_f1_w{w}", f"{b}/{d.value}", value_match_f1(pred, gold, w, direction=d, bucket=b))
    return rows


def price_errors(bundles, which: str = "updated", units: str = "normalized") -> np.ndarray:
    """Stacked ``prediction - truth`` over bundles, shape ``[events, n]``."""
    if which not in ("baseline", "updated"):
        raise ContractError(f"which must be baseline or updated, got {which!r}")
    if units not in ("normalized", "currency"):
        raise ContractError(f"units must be normalized or currency, got {units!r}")
    rows = []
    for b in bundles:
        err = np.asarray(getattr(b, which), dtype=np.float64) - np.asarray(b.truth, dtype=np.float64)
        if units == "currency":
            err = err * b.scale
        rows.append(err)
    if not rows:
        raise DataError("no bundles to score")
    return np.stack(rows)


@dataclass(frozen=True)
class PriceScore:
    rmse: float | None
    mae: float | None
    count: int


def price_metrics(bundles, which: str = "updated", units: str = "normalized") -> PriceScore:
    err = price_errors(bundles, which, units)
    return PriceScore(float(math.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))), len(err))


def price_report(bundles, setting: str, split: str, which: str = "updated", units: str = "normalized",
                 cap_buckets: dict | None = None, bucket_names: Sequence[str] = ()) -> list[MetricRow]:
    """RMSE/MAE rows overall and per cap bucket; empty buckets are kept as NA rows."""
    bundles = list(bundles)
    rows = []

    def add(group, subset):
        if subset:
            s = price_metrics(subset, which, units)
            rows.extend([MetricRow(setting, split, f"rmse_{units}", group, s.count, s.rmse),
                         MetricRow(setting, split, f"mae_{units}", group, s.count, s.mae)])
        else:
            rows.extend([MetricRow(setting, split, f"rmse_{units}", group, 0, None),
                         MetricRow(setting, split, f"mae_{units}", group, 0, None)])

    add("all", bundles)
    if cap_buckets:
        for name in bucket_names:
            add(name, [b for b in bundles if _bucket_name(cap_buckets.get(b.ticker)) == name])
    return rows


def _bucket_name(bucket) -> str | None:
    return None if bucket is None else getattr(bucket, "value", str(bucket))


# ---- emission --------------------------------------------------------------------

def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def rows_to_json(rows: Sequence[MetricRow], meta: dict | None = None) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "columns": list(CSV_COLUMNS),
        "meta": meta or {},
        "rows": [{**asdict(r), "value": "NA" if r.value is None else float(r.value)} for r in rows],
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(rows: Sequence[MetricRow], out_dir, stem: str = "report", meta: dict | None = None
                ) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
    jpath.write_text(rows_to_json(rows, meta), encoding="utf-8")
    cpath.write_text(rows_to_csv(rows), encoding="utf-8")
    return jpath, cpath


def read_report_json(path) -> list[MetricRow]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported report schema {doc.get('schema_version')!r}")
    return [MetricRow(r["setting"], r["split"], r["metric"], r["group"], int(r["count"]),
                      None if r["value"] == "NA" else float(r["value"])) for r in doc["rows"]]
