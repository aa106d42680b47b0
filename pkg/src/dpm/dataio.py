"""Dataset CSV files, model files, JSON configs and CSV exports."""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .baselines import GlmFit
from .estimation import SgdConfig
from .model import ContractError, CustomerHistory, ModelParams
from .particles import FilterConfig
from .simulate import PROFILES, SimConfig

SCHEMA_VERSION = 1


class DatasetError(ContractError):
    pass


# --------------------------------------------------------------------------- files


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    atomic_write(path, csv_text(header, rows))


# --------------------------------------------------------------------------- datasets


def dataset_header(K: int, L: int) -> list[str]:
    return ["id", "time"] + [f"r.{j + 1}" for j in range(K)] + [f"m.{j + 1}" for j in range(L)] + ["y"]


def _parse_header(header: list[str], segment_column: Optional[str]) -> tuple[int, int, Optional[int]]:
    cols = [h.strip() for h in header]
    seg_idx = None
    if segment_column is not None:
        if segment_column not in cols:
            raise DatasetError(f"segment column {segment_column!r} not found in header")
        seg_idx = cols.index(segment_column)
        cols = cols[:seg_idx] + cols[seg_idx + 1 :]
    K = sum(1 for c in cols if c.startswith("r."))
    L = sum(1 for c in cols if c.startswith("m."))
    if cols != dataset_header(K, L):
        raise DatasetError(
            "header must be id,time,r.1..r.K,m.1..m.L,y; got " + ",".join(header)
        )
    return K, L, seg_idx


def _parse_time(value: str):
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise ValueError(f"time {value!r} is neither an integer day nor an ISO date") from None


def _next_day(prev, cur) -> bool:
    if type(prev) is not type(cur):
        return False
    if isinstance(cur, int):
        return cur == prev + 1
    return (cur - prev).days == 1


def _parse_id(value: str):
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        return value


def _count(value: str, what: str) -> int:
    v = value.strip()
    try:
        n = int(v)
    except ValueError:
        try:
            f = float(v)
        except ValueError:
            raise ValueError(f"{what} = {v!r} is not a number") from None
        if not f.is_integer():
            raise ValueError(f"{what} = {v!r} is not an integer count") from None
        n = int(f)
    if n < 0:
        raise ValueError(f"{what} = {v} is negative")
    return n


def load_dataset(path, segment_column: Optional[str] = None) -> list[CustomerHistory]:
    """Read and validate a dataset CSV. Errors cite the file row number and customer id."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty dataset file")
        K, L, seg_idx = _parse_header(header, segment_column)
        width = len(header)
        names = dataset_header(K, L)[2:-1]
        out: list[CustomerHistory] = []
        seen: set = set()
        cur = None  # [id, segment, start, last_time, counts, ys, first_row]

        def flush():
            if cur is None:
                return
            cid, seg, start, _, counts, ys, _ = cur
            arr = np.array(counts, dtype=np.int64).reshape(len(ys), K + L)
            out.append(CustomerHistory(cid, arr[:, :K], arr[:, K:], np.array(ys, dtype=np.int8), seg, start))

        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            cid = _parse_id(row[0]) if row else None
            try:
                if len(row) != width:
                    raise ValueError(f"expected {width} fields, got {len(row)}")
                seg = None
                if seg_idx is not None:
                    seg = row[seg_idx].strip()
                    row = row[:seg_idx] + row[seg_idx + 1 :]
                t = _parse_time(row[1])
                counts = [_count(v, name) for v, name in zip(row[2 : 2 + K + L], names)]
                yv = row[-1].strip()
                if yv not in ("0", "1"):
                    raise ValueError(f"y = {yv!r} is not 0 or 1")
                y = int(yv)
                if cur is None or cur[0] != cid:
                    flush()
                    if cid in seen:
                        raise ValueError("rows of this id are not contiguous")
                    seen.add(cid)
                    cur = [cid, seg, str(t), t, [], [], rowno]
                else:
                    if cur[5][-1] == 1:
                        raise ValueError("row after the first purchase")
                    if not _next_day(cur[3], t):
                        raise ValueError(f"time {row[1].strip()} does not follow {cur[3]} without a gap")
                    if seg != cur[1]:
                        raise ValueError("segment changes within a customer")
                    cur[3] = t
                cur[4].extend(counts)
                cur[5].append(y)
            except (ValueError, ContractError) as err:
                raise DatasetError(f"{path}: row {rowno} (id {cid}): {err}") from None
        flush()
    if not out:
        raise DatasetError(f"{path}: dataset has no rows")
    return out


def dataset_rows(dataset: Sequence[CustomerHistory], segment_column: Optional[str] = None):
    for h in dataset:
        for t in range(h.T):
            row = [h.id, t + 1, *h.r[t].tolist(), *h.m[t].tolist(), int(h.y[t])]
            if segment_column is not None:
                row.append("" if h.segment is None else h.segment)
            yield row


def write_dataset(path, dataset: Sequence[CustomerHistory], segment_column: Optional[str] = None) -> None:
    """Write histories with integer day indices starting at 1."""
    if not dataset:
        raise DatasetError("refusing to write an empty dataset")
    header = dataset_header(dataset[0].K, dataset[0].L)
    if segment_column is not None:
        header.append(segment_column)
    write_csv(path, header, dataset_rows(dataset, segment_column))


# --------------------------------------------------------------------------- model files


def params_to_dict(p: ModelParams) -> dict:
    return {"c": p.c, "phi": p.phi, "alpha": p.alpha.tolist(), "beta": p.beta.tolist()}


def params_from_dict(d: dict) -> ModelParams:
    _strict_keys(d, {"c", "phi", "alpha", "beta"}, "params")
    return ModelParams(d["c"], d["phi"], d["alpha"], d["beta"])


@dataclass
class ModelFile:
    """Fitted parameters, one entry per segment key (``None`` for an unsegmented fit)."""

    K: int
    L: int
    models: dict  # segment -> ModelParams
    metadata: dict = field(default_factory=dict)  # segment -> fit metadata

    def params_for(self, segment) -> ModelParams:
        if segment in self.models:
            return self.models[segment]
        if None in self.models:
            return self.models[None]
        raise ContractError(f"model file has no parameters for segment {segment!r}")

    def to_json(self) -> str:
        entries = []
        for seg in sorted(self.models, key=lambda s: (s is not None, "" if s is None else str(s))):
            entry = {"segment": seg, "params": params_to_dict(self.models[seg])}
            entry["fit"] = self.metadata.get(seg, {})
            entries.append(entry)
        doc = {"schema_version": SCHEMA_VERSION, "K": self.K, "L": self.L, "models": entries}
        return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelFile":
        doc = json.loads(text)
        _strict_keys(doc, {"schema_version", "K", "L", "models"}, "model file")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise ContractError(f"unsupported model schema version {doc['schema_version']}")
        models, meta = {}, {}
        for e in doc["models"]:
            _strict_keys(e, {"segment", "params", "fit"}, "model entry")
            p = params_from_dict(e["params"])
            if p.K != doc["K"] or p.L != doc["L"]:
                raise ContractError("model entry dimensions do not match K, L")
            models[e["segment"]] = p
            meta[e["segment"]] = e["fit"]
        return cls(doc["K"], doc["L"], models, meta)

    def save(self, path) -> None:
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path) -> "ModelFile":
        return cls.from_json(Path(path).read_text())


def fit_metadata(report, config: SgdConfig, seed: int) -> dict:
    return {
        "config_digest": config_digest(config),
        "seed": seed,
        "iterations": report.iterations_run,
        "converged": report.converged,
        "warnings": list(report.warnings),
    }


# --------------------------------------------------------------------------- configs


def _strict_keys(d: dict, allowed: set, what: str) -> None:
    if not isinstance(d, dict):
        raise ContractError(f"{what} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ContractError(f"unknown {what} keys: {sorted(extra)}")


def _dataclass_from(cls, d: dict, what: str, nested: Optional[dict] = None):
    names = {f.name for f in dataclasses.fields(cls)}
    _strict_keys(d, names, what)
    kwargs = dict(d)
    for key, conv in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = conv(kwargs[key])
    return cls(**kwargs)


def filter_config_from_dict(d: dict) -> FilterConfig:
    return _dataclass_from(FilterConfig, d, "filter config")


def sgd_config_from_dict(d: dict) -> SgdConfig:
    return _dataclass_from(SgdConfig, d, "SGD config", {"filter": filter_config_from_dict})


def sgd_config_to_dict(c: SgdConfig) -> dict:
    return dataclasses.asdict(c)


SIM_EXTRA_KEYS = {"profile", "target_daily_rate"}


def sim_config_from_dict(d: dict, seed: Optional[int] = None) -> SimConfig:
    """Build a :class:`SimConfig`.

    Besides the dataclass fields two keys are accepted: ``profile``
    (``product-a`` or ``product-b``) supplies default touch rates and caps, and
    ``target_daily_rate`` replaces ``c`` by a calibrated offset.
    """
    names = {f.name for f in dataclasses.fields(SimConfig)}
    _strict_keys(d, names | SIM_EXTRA_KEYS, "simulation config")
    kwargs = {k: v for k, v in d.items() if k in names}
    if "profile" in d:
        if d["profile"] not in PROFILES:
            raise ContractError(f"unknown profile {d['profile']!r}; choose from {sorted(PROFILES)}")
        prof = PROFILES[d["profile"]]
        kwargs.setdefault("touch_rates", prof["rates"])
        kwargs.setdefault("touch_caps", prof["caps"])
    if "true_params" not in kwargs:
        raise ContractError("simulation config needs true_params")
    tp = dict(kwargs["true_params"])
    tp.setdefault("c", 0.0)
    kwargs["true_params"] = params_from_dict(tp)
    if seed is not None:
        kwargs["seed"] = seed
    config = SimConfig(**kwargs)
    if "target_daily_rate" in d:
        from .simulate import calibrate_offset, with_offset

        c = calibrate_offset(
            config.true_params, config.touch_rates, config.touch_caps, config.horizon,
            float(d["target_daily_rate"]), seed=config.seed,
            targeting=config.targeting, targeting_signal=config.targeting_signal,
        )
        config = with_offset(config, c)
    return config


def sim_config_to_dict(c: SimConfig) -> dict:
    d = {f.name: getattr(c, f.name) for f in dataclasses.fields(c)}
    d["true_params"] = params_to_dict(c.true_params)
    d["touch_rates"] = list(c.touch_rates)
    d["touch_caps"] = list(c.touch_caps)
    return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_digest(config) -> str:
    d = sgd_config_to_dict(config) if isinstance(config, SgdConfig) else sim_config_to_dict(config)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ContractError(f"{path}: invalid JSON ({err})") from None


# --------------------------------------------------------------------------- exports


def write_trajectory(path, names: Sequence[str], trajectory: np.ndarray) -> None:
    write_csv(path, ["iteration", *names], ([v + 1, *map(repr, row.tolist())] for v, row in enumerate(trajectory)))


def write_coefficients(path, fit: GlmFit) -> None:
    rows = ([n, repr(float(e)), repr(float(s)), repr(float(p))] for n, e, s, p in fit.table())
    write_csv(path, ["name", "estimate", "std_error", "p_value"], rows)


def write_roc(path, curve) -> None:
    write_csv(path, ["fpr", "tpr"], ([repr(float(a)), repr(float(b))] for a, b in zip(curve.fpr, curve.tpr)))


def write_histogram(path, hist: np.ndarray, K: int, L: int) -> None:
    names = dataset_header(K, L)[2:-1]
    write_csv(path, ["days_before_purchase", *names], ([d, *hist[:, d].tolist()] for d in range(hist.shape[1])))


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels from a score CSV (columns ``score`` and ``y``)."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"score", "y"} <= set(reader.fieldnames):
            raise ContractError(f"{path}: score file needs 'score' and 'y' columns")
        scores, labels = [], []
        for rowno, row in enumerate(reader, start=2):
            try:
                scores.append(float(row["score"]))
                labels.append(int(row["y"]))
            except ValueError as err:
                raise ContractError(f"{path}: row {rowno}: {err}") from None
    return np.array(scores), np.array(labels)
