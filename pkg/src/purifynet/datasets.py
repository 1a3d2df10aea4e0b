"""Tabular intrusion datasets: CSV ingestion, encoding to [0, 1], splits.

Built-in schemas cover NSL-KDD (``KDDTrain+.txt`` style, no header) and the
official UNSW-NB15 train/test CSVs. :func:`make_synthetic` produces a
download-free stand-in with the same [0, 1] feature domain.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn

KINDS = ("numeric", "categorical", "label", "ignore")


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout plus the rule mapping raw labels to 0 (benign) / 1.

    With ``benign_labels`` set, any other label value is malicious. Without it
    the label column must already hold 0/1.
    """

    columns: tuple[Column, ...]
    benign_labels: Optional[frozenset[str]] = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.benign_labels is not None:
            object.__setattr__(self, "benign_labels", frozenset(self.benign_labels))
        kinds = [c.kind for c in self.columns]
        if kinds.count("label") != 1:
            raise ValueError("schema needs exactly one label column")
        if not any(k in ("numeric", "categorical") for k in kinds):
            raise ValueError("schema needs at least one feature column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def label_column(self) -> str:
        return next(c.name for c in self.columns if c.kind == "label")

    def of_kind(self, kind: str) -> list[str]:
        return [c.name for c in self.columns if c.kind == kind]

    @classmethod
    def from_json(cls, path) -> "FeatureSchema":
        """Schema file: a JSON list of ``{name, kind}``, or an object with
        ``columns`` and optional ``benign_labels``."""
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, list):
            doc = {"columns": doc}
        cols = tuple(Column(c["name"], c["kind"]) for c in doc["columns"])
        benign = doc.get("benign_labels")
        return cls(cols, frozenset(benign) if benign is not None else None)


_NSL_NUMERIC_HEAD = ["duration"]
_NSL_NUMERIC_TAIL = [
    "src_bytes", "dst_bytes", "land", "wrong_fragment", "urgent", "hot", "num_failed_logins",
    "logged_in", "num_compromised", "root_shell", "su_attempted", "num_root", "num_file_creations",
    "num_shells", "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login",
    "count", "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count", "dst_host_srv_count",
    "dst_host_same_srv_rate", "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate", "dst_host_srv_serror_rate",
    "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]

NSL_KDD = FeatureSchema(
    tuple([Column(n, "numeric") for n in _NSL_NUMERIC_HEAD]
          + [Column(n, "categorical") for n in ("protocol_type", "service", "flag")]
          + [Column(n, "numeric") for n in _NSL_NUMERIC_TAIL]
          + [Column("label", "label"), Column("difficulty", "ignore")]),
    benign_labels=frozenset({"normal"}),
)

_UNSW_NUMERIC = [
    "spkts", "dpkts", "sbytes", "dbytes", "rate", "sttl", "dttl", "sload", "dload", "sloss",
    "dloss", "sinpkt", "dinpkt", "sjit", "djit", "swin", "stcpb", "dtcpb", "dwin", "tcprtt",
    "synack", "ackdat", "smean", "dmean", "trans_depth", "response_body_len", "ct_srv_src",
    "ct_state_ttl", "ct_dst_ltm", "ct_src_dport_ltm", "ct_dst_sport_ltm", "ct_dst_src_ltm",
    "is_ftp_login", "ct_ftp_cmd", "ct_flw_http_mthd", "ct_src_ltm", "ct_srv_dst", "is_sm_ips_ports",
]

UNSW_NB15 = FeatureSchema(
    tuple([Column("id", "ignore"), Column("dur", "numeric")]
          + [Column(n, "categorical") for n in ("proto", "service", "state")]
          + [Column(n, "numeric") for n in _UNSW_NUMERIC]
          + [Column("attack_cat", "ignore"), Column("label", "label")]),
)

BUILTIN_SCHEMAS = {"nslkdd": NSL_KDD, "unswnb15": UNSW_NB15}


@dataclass
class RecordTable:
    """Typed columns parsed from a CSV file."""

    numeric: dict[str, np.ndarray]
    categorical: dict[str, list[str]]
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _map_label(raw: str, schema: FeatureSchema, where: str) -> int:
    raw = raw.strip()
    if schema.benign_labels is not None:
        if raw == "":
            raise DataError(f"{where}: empty label")
        return 0 if raw in schema.benign_labels else 1
    try:
        value = float(raw)
    except ValueError:
        value = None
    if value not in (0.0, 1.0):
        raise DataError(f"{where}: unknown label {raw!r} (expected 0 or 1)")
    return int(value)


def load_csv(path, schema: FeatureSchema, header: Optional[bool] = None) -> RecordTable:
    """Parse a comma-separated file against ``schema``.

    ``header=None`` skips the first row only when it repeats the schema's
    column names.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    names = schema.names
    numeric = {n: [] for n in schema.of_kind("numeric")}
    categorical = {n: [] for n in schema.of_kind("categorical")}
    labels = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and header is not False:
                if header or [c.strip() for c in row] == names:
                    continue
            where = f"{path}:{lineno}"
            if len(row) != len(names):
                raise DataError(f"{where}: expected {len(names)} columns, found {len(row)}")
            for col, raw in zip(schema.columns, row):
                if col.kind == "numeric":
                    try:
                        numeric[col.name].append(float(raw))
                    except ValueError:
                        raise DataError(f"{where}: column {col.name!r} is not numeric: {raw!r}") from None
                elif col.kind == "categorical":
                    categorical[col.name].append(raw.strip())
                elif col.kind == "label":
                    labels.append(_map_label(raw, schema, where))
    num = {k: np.asarray(v, dtype=np.float64) for k, v in numeric.items()}
    for k, v in num.items():
        if not np.all(np.isfinite(v)):
            raise DataError(f"{path}: column {k!r} contains non-finite values")
    return RecordTable(num, categorical, np.asarray(labels, dtype=np.int64))


@dataclass
class EncoderState:
    """Vocabularies and numeric ranges learned from the training records."""

    columns: list[tuple[str, str]]
    vocab: dict[str, list[str]] = field(default_factory=dict)
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def feature_names(self) -> list[str]:
        out = []
        for name, kind in self.columns:
            if kind == "numeric":
                out.append(name)
            else:
                out.extend(f"{name}={v}" for v in self.vocab[name])
        return out

    def to_dict(self) -> dict:
        return {"columns": [list(c) for c in self.columns], "vocab": self.vocab,
                "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderState":
        return cls([tuple(c) for c in doc["columns"]], {k: list(v) for k, v in doc["vocab"].items()},
                   {k: (float(v[0]), float(v[1])) for k, v in doc["ranges"].items()})


def fit_encoder(train: RecordTable, schema: FeatureSchema) -> EncoderState:
    if len(train) == 0:
        raise DataError("cannot fit an encoder on an empty training set")
    columns, vocab, ranges = [], {}, {}
    for col in schema.columns:
        if col.kind == "numeric":
            values = train.numeric[col.name]
            lo, hi = float(values.min()), float(values.max())
            ranges[col.name] = (lo, hi) if hi > lo else (lo, lo + 1.0)
        elif col.kind == "categorical":
            vocab[col.name] = list(dict.fromkeys(train.categorical[col.name]))
        else:
            continue
        columns.append((col.name, col.kind))
    return EncoderState(columns, vocab, ranges)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise nn.ShapeError(f"features must be 2-D, got {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise nn.ShapeError(f"{self.features.shape[0]} rows but {self.labels.shape[0]} labels")
        if len(self.feature_names) != self.features.shape[1]:
            raise nn.ShapeError(f"{len(self.feature_names)} names for {self.features.shape[1]} features")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], list(self.feature_names))

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels.copy(), list(self.feature_names))


def transform(records: RecordTable, encoder: EncoderState) -> Dataset:
    """One-hot categoricals (unseen values -> zeros) and clamped min-max numerics."""
    n = len(records)
    blocks = []
    for name, kind in encoder.columns:
        if kind == "numeric":
            lo, hi = encoder.ranges[name]
            v = (records.numeric[name] - lo) / (hi - lo)
            blocks.append(np.clip(v, 0.0, 1.0)[:, None])
        else:
            index = {v: i for i, v in enumerate(encoder.vocab[name])}
            block = np.zeros((n, len(index)))
            for r, value in enumerate(records.categorical[name]):
                j = index.get(value)
                if j is not None:
                    block[r, j] = 1.0
            blocks.append(block)
    features = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return Dataset(features, records.labels.copy(), encoder.feature_names)


def split(data: Dataset, fractions: Sequence[float], rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Shuffle and cut into (train, test) by ``fractions``."""
    if len(fractions) != 2 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    order = rng.permutation(data.n_rows)
    cut = int(round(fractions[0] * data.n_rows))
    return data.take(order[:cut]), data.take(order[cut:])


def subsample(data: Dataset, n: int, stratified: bool, rng: np.random.Generator) -> Dataset:
    """Draw ``n`` rows without replacement; stratified keeps class ratios."""
    if n > data.n_rows:
        raise ValueError(f"cannot draw {n} rows from {data.n_rows}")
    if not stratified:
        return data.take(np.sort(rng.choice(data.n_rows, size=n, replace=False)))
    classes, counts = np.unique(data.labels, return_counts=True)
    quota = counts * n / data.n_rows
    take = np.floor(quota).astype(int)
    # largest remainders fill the leftover slots
    for i in np.argsort(-(quota - take), kind="stable")[: n - take.sum()]:
        take[i] += 1
    idx = []
    for c, k in zip(classes, take):
        pool = np.flatnonzero(data.labels == c)
        idx.append(rng.choice(pool, size=k, replace=False))
    return data.take(np.sort(np.concatenate(idx)))


def make_synthetic(n: int, d: int = 20, seed: int = 0, *, coarse_features: int = 4,
                   coarse_gap: float = 0.3, coarse_spread: float = 0.2, fine_gap: float = 0.05,
                   latent_dim: int = 2, spread: float = 0.08, noise: float = 0.003,
                   geometry_seed: int = 99) -> Dataset:
    """Two Gaussian classes in [0, 1]^d that differ along two directions.

    A coarse cue on the first ``coarse_features`` features puts the class
    means ``coarse_gap`` (L2) either side of a shared centre with per-row
    spread ``coarse_spread``, so on its own it separates the classes only
    partially. A fine cue puts the means ``fine_gap`` either side along a dense
    direction over the remaining features with no spread of its own; it
    separates the classes cleanly but sits within small L-infinity budgets.
    Both classes also vary along a shared rank-``latent_dim`` subspace
    (``spread``) plus isotropic ``noise``. Geometry depends only on ``d``,
    ``coarse_features``, ``latent_dim`` and ``geometry_seed``, so independent
    draws share it. Values are clipped into the unit box.
    """
    kc = int(coarse_features)
    if n < 2:
        raise ValueError("need at least two rows")
    if not 1 <= kc < d - latent_dim:
        raise ValueError(f"need 1 <= coarse_features < d - latent_dim, got {kc} with d={d}")
    geo = nn.make_rng(geometry_seed)
    q, _ = np.linalg.qr(geo.standard_normal((d - kc, latent_dim + 1)))
    basis = np.vstack([np.zeros((kc, latent_dim)), q[:, :latent_dim]])
    fine_dir = np.r_[np.zeros(kc), q[:, latent_dim]]
    coarse_dir = np.r_[np.ones(kc), np.zeros(d - kc)] / np.sqrt(kc)
    centre = 0.5 + 0.05 * geo.uniform(-1, 1, size=d)

    rng = nn.make_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    sign = np.where(labels == 1, 1.0, -1.0)[:, None]
    x = centre + (rng.standard_normal((n, latent_dim)) * spread) @ basis.T
    x = x + sign * (coarse_gap + coarse_spread * rng.standard_normal((n, 1))) * coarse_dir
    x = x + sign * fine_gap * fine_dir
    x += noise * rng.standard_normal((n, d))
    names = [f"f{i}" for i in range(d)]
    return Dataset(np.clip(x, 0.0, 1.0), labels, names)


# ---------------------------------------------------------------------------
# caches

def save_dataset(data: Dataset, directory, name: str, encoder: Optional[EncoderState] = None,
                 extra: Optional[dict] = None) -> list[Path]:
    """Write ``<name>.features.npy``, ``<name>.labels.npy`` and ``<name>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fpath = directory / f"{name}.features.npy"
    lpath = directory / f"{name}.labels.npy"
    mpath = directory / f"{name}.json"
    np.save(fpath, np.ascontiguousarray(data.features))
    np.save(lpath, np.ascontiguousarray(data.labels))
    meta = {"feature_names": data.feature_names, "rows": data.n_rows,
            "encoder": encoder.to_dict() if encoder else None}
    if extra:
        meta.update(extra)
    mpath.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return [fpath, lpath, mpath]


def load_dataset(directory, name: str) -> Dataset:
    directory = Path(directory)
    mpath = directory / f"{name}.json"
    if not mpath.exists():
        raise FileNotFoundError(f"missing dataset cache: {mpath}")
    meta = json.loads(mpath.read_text())
    return Dataset(np.load(directory / f"{name}.features.npy"), np.load(directory / f"{name}.labels.npy"),
                   meta["feature_names"])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
