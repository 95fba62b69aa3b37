"""Readers for aggregated counts and case records; result writers.

Aggregated counts
    Delimited text with header ``location_id,time,count``.  ``time`` is an
    integer index or an ISO month (``YYYY-MM``); ``count`` is a nonnegative
    integer, or ``MISSING`` / empty for a missing record.

Case records
    Delimited text with header ``date,zip,age_decile,gender,race`` followed by
    any number of ``drug_*`` columns holding 0/1 flags.  ``date`` is ISO
    ``YYYY-MM-DD``.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestionError
from .gp import PointDataset
from .tensor import CaseTensor, aggregate_records

COUNT_COLUMNS = ("location_id", "time", "count")
CASE_COLUMNS = ("date", "zip", "age_decile", "gender", "race")
DRUG_PREFIX = "drug_"
MISSING = "MISSING"


@contextmanager
def _open_text(source, mode="r"):
    if isinstance(source, (str, Path)):
        with open(source, mode, newline="", encoding="utf-8") as fh:
            yield fh
    else:
        yield source


def _parse_time(value, row):
    value = value.strip()
    try:
        return int(value), "index"
    except ValueError:
        pass
    try:
        d = dt.datetime.strptime(value, "%Y-%m")
    except ValueError:
        raise IngestionError(f"row {row}: unparseable time {value!r} (integer or YYYY-MM)") from None
    return d.year * 12 + d.month - 1, "month"


def _month_label(m):
    return f"{m // 12:04d}-{m % 12 + 1:02d}"


def _read_coordinates(path, delimiter):
    coords = {}
    with _open_text(path) as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if not header or header[0] != "location_id" or len(header) < 2:
            raise IngestionError("coordinate file needs header location_id,<coord>,...")
        for i, row in enumerate(reader, start=2):
            try:
                coords[row[0]] = [float(v) for v in row[1:]]
            except ValueError:
                raise IngestionError(f"coordinate file row {i}: non-numeric coordinate") from None
    return header[1:], coords


def read_aggregated_counts(source, coordinates=None, delimiter=",") -> PointDataset:
    """Location x month counts as a point dataset.

    Covariates are ``(location coordinate(s), time index)``.  Without a
    coordinate file each location gets its sorted-label index as a single
    coordinate.  Every (location, time) pair inside the observed time range
    becomes a point; pairs marked missing or absent from the file are masked.
    """
    with _open_text(source) as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise IngestionError("empty file: header row location_id,time,count expected")
        header = [h.strip() for h in header]
        if tuple(header) != COUNT_COLUMNS:
            raise IngestionError(f"expected header {','.join(COUNT_COLUMNS)}, got {','.join(header)}")
        seen = {}
        rows = []
        kinds = set()
        for i, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise IngestionError(f"row {i}: expected 3 fields, got {len(row)}")
            loc = row[0].strip()
            t, kind = _parse_time(row[1], i)
            kinds.add(kind)
            raw = row[2].strip()
            if raw in ("", MISSING):
                count = None
            else:
                try:
                    count = int(raw)
                except ValueError:
                    raise IngestionError(f"row {i}: unparseable count {raw!r}") from None
                if count < 0:
                    raise IngestionError(f"row {i}: negative count {count}")
            key = (loc, t)
            if key in seen:
                raise IngestionError(f"rows {seen[key]} and {i}: duplicate (location, time) {loc!r}, {row[1].strip()!r}")
            seen[key] = i
            rows.append((loc, t, count))
    if not rows:
        raise IngestionError("no data rows")
    if len(kinds) > 1:
        raise IngestionError("time column mixes integer indices and YYYY-MM months")
    kind = kinds.pop()

    locations = sorted({r[0] for r in rows})
    t0 = min(r[1] for r in rows)
    T = max(r[1] for r in rows) - t0 + 1
    loc_pos = {loc: i for i, loc in enumerate(locations)}
    n = len(locations) * T
    y = np.full(n, np.nan)
    observed = np.zeros(n, dtype=bool)
    for loc, t, count in rows:
        p = loc_pos[loc] * T + (t - t0)
        if count is not None:
            y[p] = count
            observed[p] = True

    if coordinates is not None:
        coord_names, coords = _read_coordinates(coordinates, delimiter)
        missing = [loc for loc in locations if loc not in coords]
        if missing:
            raise IngestionError(f"no coordinates for locations {missing}")
        loc_coords = np.array([coords[loc] for loc in locations], dtype=float)
    else:
        coord_names = ["location_index"]
        loc_coords = np.arange(len(locations), dtype=float)[:, None]
    X = np.column_stack([np.repeat(loc_coords, T, axis=0), np.tile(np.arange(T, dtype=float), len(locations))])
    times = [_month_label(t0 + j) if kind == "month" else str(t0 + j) for j in range(T)]
    if not observed.any():
        raise IngestionError("every record is missing")
    Xo = X[observed]
    meta = {
        "locations": locations,
        "times": times,
        "time_kind": kind,
        "covariates": coord_names + ["time_index"],
        "location_of": np.repeat(np.arange(len(locations)), T),
        "time_of": np.tile(np.arange(T), len(locations)),
        "x_mean": Xo.mean(axis=0),
        "x_std": Xo.std(axis=0),
        "n_rows": len(rows),
        "total_count": int(sum(r[2] for r in rows if r[2] is not None)),
    }
    return PointDataset(X, y, observed, meta=meta)


def write_aggregated_counts(data: PointDataset, sink, delimiter=","):
    """Inverse of :func:`read_aggregated_counts` for datasets it produced (or synthetic grids)."""
    locs = data.meta.get("locations")
    times = data.meta.get("times")
    if locs is None:
        n_loc = int(data.X[:, 0].max()) + 1
        locs = [f"L{i:02d}" for i in range(n_loc)]
        times = [str(i) for i in range(data.n // n_loc)]
    T = len(times)
    with _open_text(sink, "w") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(COUNT_COLUMNS)
        for p in range(data.n):
            value = MISSING if not data.observed[p] else str(int(round(max(data.y[p], 0.0))))
            w.writerow([locs[p // T], times[p % T], value])


def _parse_date(value, row):
    try:
        return dt.date.fromisoformat(value.strip())
    except ValueError:
        raise IngestionError(f"row {row}: unparseable date {value!r}") from None


def read_case_records(source, bin_days=7, origin=None, dictionaries=None, allow_new=False, delimiter=",") -> CaseTensor:
    """Victim-level records as an aggregated case tensor.

    Attribute order is ``time`` (binned dates), ``zip``, ``age_decile``,
    ``gender``, ``race``, then the drug flags in header order.  Category
    dictionaries map each attribute to its label list; pass the ones saved
    from an earlier run to keep encodings stable.
    """
    if bin_days < 1:
        raise ConfigError("bin_days must be >= 1")
    dictionaries = {k: list(v) if isinstance(v, list) else dict(v) for k, v in (dictionaries or {}).items()}
    with _open_text(source) as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise IngestionError("empty file: header row expected")
        header = [h.strip() for h in header]
        drugs = [h for h in header if h.startswith(DRUG_PREFIX)]
        others = [h for h in header if not h.startswith(DRUG_PREFIX)]
        if sorted(others) != sorted(CASE_COLUMNS) or len(others) != len(CASE_COLUMNS):
            raise IngestionError(
                f"expected columns {','.join(CASE_COLUMNS)} plus {DRUG_PREFIX}* flags, got {','.join(header)}"
            )
        if len(set(drugs)) != len(drugs):
            raise IngestionError("duplicate drug flag columns")
        col = {h: i for i, h in enumerate(header)}
        rows = []
        for i, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"row {i}: expected {len(header)} fields, got {len(row)}")
            date = _parse_date(row[col["date"]], i)
            cats = [row[col[c]].strip() for c in CASE_COLUMNS[1:]]
            flags = [row[col[d]].strip() for d in drugs]
            for d, f in zip(drugs, flags):
                if f not in ("0", "1"):
                    raise IngestionError(f"row {i}: flag {d}={f!r} is not 0 or 1")
            rows.append((i, date, cats, flags))
    if not rows:
        raise IngestionError("no data rows")

    time_dict = dictionaries.get("time") or {}
    if origin is None:
        origin = time_dict.get("origin") or min(r[1] for r in rows).isoformat()
    origin_date = dt.date.fromisoformat(str(origin))
    bins = []
    for i, date, _, _ in rows:
        b = (date - origin_date).days // bin_days
        if b < 0:
            raise IngestionError(f"row {i}: date {date} precedes the binning origin {origin_date}")
        bins.append(b)
    n_bins = max(max(bins) + 1, int(time_dict.get("n_bins", 0)) if time_dict.get("bin_days") == bin_days else 0)

    names = ["time", *CASE_COLUMNS[1:], *drugs]
    labels = [[(origin_date + dt.timedelta(days=bin_days * b)).isoformat() for b in range(n_bins)]]
    codes = np.empty((len(rows), len(names)), dtype=np.int64)
    codes[:, 0] = bins
    for a, name in enumerate(names[1:], start=1):
        is_flag = name.startswith(DRUG_PREFIX)
        column = [r[2][a - 1] if not is_flag else r[3][a - 1 - (len(CASE_COLUMNS) - 1)] for r in rows]
        if is_flag:
            vocab = ["0", "1"]
        elif name in dictionaries:
            vocab = list(dictionaries[name])
            unknown = sorted(set(column) - set(vocab))
            if unknown and not allow_new:
                raise IngestionError(f"attribute {name!r}: unknown categories {unknown} (use allow_new)")
            vocab.extend(unknown)
        else:
            vocab = sorted(set(column))
        index = {v: j for j, v in enumerate(vocab)}
        codes[:, a] = [index[v] for v in column]
        labels.append(vocab)
    attributes = tuple((n, len(l)) for n, l in zip(names, labels))
    tensor = aggregate_records(codes, None, attributes, labels=tuple(tuple(l) for l in labels), time_attribute=0)
    out_dicts = {n: list(l) for n, l in zip(names[1:], labels[1:])}
    out_dicts["time"] = {"origin": origin_date.isoformat(), "bin_days": bin_days, "n_bins": n_bins}
    tensor.meta.update(n_rows=len(rows), dictionaries=out_dicts, drug_columns=drugs)
    return tensor


def decode_records(tensor: CaseTensor):
    """Expand a tensor back to one label tuple per case (inverse of the encoding)."""
    out = []
    for vals, c in zip(tensor.values, tensor.counts):
        labels = tuple(tensor.labels[a][v] for a, v in enumerate(vals))
        out.extend([labels] * int(c))
    return out


def write_case_records(tensor: CaseTensor, sink, delimiter=","):
    """Write one row per case; dates are the first day of each time bin."""
    names = list(tensor.names)
    if names[:5] != ["time", *CASE_COLUMNS[1:]]:
        raise ConfigError("tensor does not follow the case-record attribute layout")
    with _open_text(sink, "w") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["date", *names[1:]])
        for labels in decode_records(tensor):
            w.writerow(labels)


def save_dictionaries(dictionaries, path):
    Path(path).write_text(json.dumps(dictionaries, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dictionaries(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- results

def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def gpss_result_records(results, data: PointDataset, alpha):
    locs, times = data.meta.get("locations"), data.meta.get("times")
    out = []
    for cid, r in enumerate(results):
        subset = [int(i) for i in r.subset]
        rec = {
            "cluster_id": cid,
            "subset": subset,
            "score": _num(r.score),
            "effect": _num(r.effect),
            "p_value": _num(r.p_value),
            "significant": bool(r.p_value is not None and r.p_value <= alpha),
            "support": {
                "n_points": len(subset),
                "neighborhood_center": int(r.neighborhood_center),
                "observed_sum": _num(np.nansum(data.y[subset])),
            },
        }
        if locs is not None:
            T = len(times)
            rec["cells"] = [[locs[i // T], times[i % T]] for i in subset]
        out.append(rec)
    return out


def mdts_result_records(results, tensor: CaseTensor, alpha):
    out = []
    for cid, r in enumerate(results):
        subset = {}
        for a, (name, _) in enumerate(tensor.attributes):
            vals = r.subspace.values[a]
            subset[name] = [tensor.labels[a][v] for v in vals] if tensor.labels else list(vals)
        out.append({
            "cluster_id": cid,
            "subset": subset,
            "description": r.subspace.describe(tensor),
            "score": _num(r.score),
            "effect": _num(r.effect),
            "p_value": _num(r.p_value),
            "significant": bool(r.p_value is not None and r.p_value <= alpha),
            "support": {"C": _num(r.support[0]), "B": _num(r.support[1])},
        })
    return out


def write_results(document: dict, sink):
    """Serialize a results document (``method``, ``clusters``, ``null``, ...) as JSON."""
    if document is None:
        raise ConfigError("results document is required")
    text = json.dumps(document, indent=2, ensure_ascii=False) + "\n"
    if isinstance(sink, (str, Path)):
        try:
            Path(sink).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write results to {sink}: {exc}") from exc
    else:
        sink.write(text)
    return text


def read_results(source):
    if isinstance(source, (str, Path)):
        return json.loads(Path(source).read_text(encoding="utf-8"))
    return json.loads(source.read())


def write_plot_table(rows, columns, sink, delimiter=","):
    """Flat table; ``rows`` is an iterable of sequences aligned with ``columns``."""
    with _open_text(sink, "w") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])


def gpss_plot_rows(data: PointDataset, expected, clusters):
    """(point_id, covariates..., observed, expected, cluster_id) per point."""
    label = {}
    for cid, r in reversed(list(enumerate(clusters))):
        for i in r.subset:
            label[int(i)] = cid
    rows = []
    for p in range(data.n):
        obs = data.y[p] if data.observed[p] else None
        rows.append([p, *[float(v) for v in data.X[p]], obs, expected[p], label.get(p, "")])
    cov = data.meta.get("covariates") or [f"x{d}" for d in range(data.dim)]
    return rows, ["point_id", *cov, "observed", "expected", "cluster_id"]


def mdts_plot_rows(tensor: CaseTensor, base, clusters):
    """(record_id, attribute labels..., observed, expected, cluster_id) per populated cell."""
    expected = base.expected(tensor.values)
    cluster_of = np.full(len(tensor), -1)
    for cid, r in reversed(list(enumerate(clusters))):
        cluster_of[r.subspace.contains(tensor.values)] = cid
    rows = []
    for i, vals in enumerate(tensor.values):
        labels = [tensor.labels[a][v] if tensor.labels else int(v) for a, v in enumerate(vals)]
        cid = int(cluster_of[i])
        rows.append([i, *labels, int(tensor.counts[i]), float(expected[i]), cid if cid >= 0 else ""])
    return rows, ["record_id", *tensor.names, "observed", "expected", "cluster_id"]


def to_text(fn, *args, **kwargs):
    """Run a writer against an in-memory buffer and return the text."""
    buf = io.StringIO()
    fn(*args, buf, **kwargs)
    return buf.getvalue()
