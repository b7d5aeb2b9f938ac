"""Experiment protocols on tabular and synthetic data.

Protocols label a dataset in one of three ways:

``label``
    use the dataset's own binary label column (e.g. healthy vs. diabetic).
``single_value``
    rows whose attribute equals the designated value are normal, the rest
    anomalous.
``multi_value``
    rows whose attribute equals the designated value are anomalous, the rest
    normal.

Every run draws one seeded 85:15 permutation split. The kNN detector is fit on
the normal rows of the train portion only; the linear probe is fit on the whole
train portion, anomalies included; both are scored on the same test rows.
Standardization statistics always come from the rows the detector is fit on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detectors import KNNDetector, KnnConfig, LinearProbe, ProbeConfig, Standardizer
from .evaluation import EvalResult, evaluate, roc_auc
from .stats_core import RandomStream
from .toy_model import ToyModelParams, sample_population

__all__ = [
    "SchemaError",
    "ParseError",
    "ProtocolError",
    "TabularDataset",
    "ProtocolConfig",
    "SweepResult",
    "BridgeRow",
    "RECORD_COLUMNS",
    "load_csv",
    "write_csv",
    "protocol_labels",
    "split_train_test",
    "rank_features",
    "dimensionality_sweep",
    "run_protocol",
    "guided_run",
    "toy_detector_bridge",
    "make_toy_dataset",
    "make_attribute_dataset",
    "config_digest",
    "result_record",
    "write_records",
]

SETTINGS = ("label", "single_value", "multi_value")
RECORD_COLUMNS = (
    "experiment_id",
    "dataset_digest",
    "setting",
    "attribute",
    "value",
    "scorer",
    "d",
    "auc",
    "n_normal",
    "n_anomalous",
    "seed",
)

# substream ids below a protocol seed
_SPLIT_STREAM = 1
_PROBE_STREAM = 2


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class TabularDataset:
    """Numeric features, a binary anomaly label and optional categorical attributes."""

    feature_names: list[str]
    features: np.ndarray
    label: np.ndarray
    attribute_columns: dict[str, np.ndarray] = field(default_factory=dict)
    source_digest: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.label = np.asarray(self.label, dtype=np.int8)
        self.feature_names = list(self.feature_names)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != len(self.feature_names):
            raise SchemaError("features must be (n, d) with one name per column")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("feature names must be unique")
        if self.label.shape != (n,):
            raise SchemaError("label length does not match row count")
        self.attribute_columns = {k: np.asarray(v, dtype=str) for k, v in self.attribute_columns.items()}
        for name, col in self.attribute_columns.items():
            if col.shape != (n,):
                raise SchemaError(f"attribute {name!r} length does not match row count")
        if not self.source_digest:
            h = hashlib.sha256()
            h.update(json.dumps(self.feature_names).encode())
            h.update(np.ascontiguousarray(self.features).tobytes())
            h.update(self.label.tobytes())
            for name in sorted(self.attribute_columns):
                h.update(name.encode())
                h.update("\x1f".join(self.attribute_columns[name]).encode())
            self.source_digest = h.hexdigest()

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def columns(self, names) -> np.ndarray:
        """Column indices for ``names`` in dataset order."""
        names = list(names)
        unknown = [n for n in names if n not in self.feature_names]
        if unknown:
            raise SchemaError(f"unknown feature(s): {', '.join(unknown)}")
        wanted = set(names)
        return np.array([i for i, n in enumerate(self.feature_names) if n in wanted], dtype=int)


@dataclass(frozen=True)
class ProtocolConfig:
    setting: str = "label"
    attribute: str | None = None
    designated_value: str | None = None
    split_ratio: float = 0.85
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if not 0 < self.split_ratio < 1:
            raise ValueError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.setting != "label" and (self.attribute is None or self.designated_value is None):
            raise ValueError(f"{self.setting} needs an attribute and a designated value")
        if self.designated_value is not None:
            object.__setattr__(self, "designated_value", str(self.designated_value))


@dataclass
class SweepResult:
    features: list[str]
    knn_auc: list[float]
    probe_auc: list[float]
    n_normal: int = 0
    n_anomalous: int = 0

    @property
    def dims(self) -> list[int]:
        return list(range(1, len(self.features) + 1))


@dataclass(frozen=True)
class BridgeRow:
    d: int
    knn_auc: float
    probe_auc: float


# -- ingestion ----------------------------------------------------------------

def _parse_float(cell, row, column):
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column {column!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {cell!r}")
    return value


def load_csv(path, label_column: str, attribute_columns=()) -> TabularDataset:
    """Read a headed, comma-separated UTF-8 file.

    Every column other than the label and the declared attributes is a numeric
    feature. Rows are numbered from 1 (the first line after the header) in
    error messages.

    Raises
    ------
    SchemaError
        Missing header, missing label/attribute column or ragged row.
    ParseError
        Non-numeric or non-finite feature cell, or a label outside {0, 1}.
    """
    raw = Path(path).read_bytes()
    reader = csv.reader(io.StringIO(raw.decode("utf-8-sig")))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path}: empty file, header row expected") from None
    attribute_columns = list(attribute_columns)
    missing = [c for c in [label_column, *attribute_columns] if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s): {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")

    label_idx = header.index(label_column)
    attr_idx = {name: header.index(name) for name in attribute_columns}
    feat_idx = [i for i, h in enumerate(header) if i != label_idx and i not in attr_idx.values()]

    features, labels = [], []
    attrs = {name: [] for name in attribute_columns}
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        label = _parse_float(row[label_idx], row_no, label_column)
        if label not in (0.0, 1.0):
            raise ParseError(f"row {row_no}, column {label_column!r}: label {row[label_idx]!r} is not 0 or 1")
        labels.append(int(label))
        features.append([_parse_float(row[i], row_no, header[i]) for i in feat_idx])
        for name, i in attr_idx.items():
            attrs[name].append(row[i].strip())

    return TabularDataset(
        feature_names=[header[i] for i in feat_idx],
        features=np.array(features, dtype=float).reshape(len(labels), len(feat_idx)),
        label=np.array(labels, dtype=np.int8),
        attribute_columns={k: np.array(v, dtype=str) for k, v in attrs.items()},
        source_digest=hashlib.sha256(raw).hexdigest(),
    )


def write_csv(dataset: TabularDataset, path, label_column: str = "label"):
    """Write ``dataset`` in the format :func:`load_csv` reads."""
    attr_names = list(dataset.attribute_columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*dataset.feature_names, *attr_names, label_column])
        for i in range(dataset.n_rows):
            w.writerow([
                *(repr(float(v)) for v in dataset.features[i]),
                *(dataset.attribute_columns[a][i] for a in attr_names),
                int(dataset.label[i]),
            ])


# -- protocol plumbing ---------------------------------------------------------

def protocol_labels(dataset: TabularDataset, config: ProtocolConfig, knn: KnnConfig = KnnConfig()) -> np.ndarray:
    """Anomaly labels (1 = anomalous) implied by the protocol setting."""
    if config.setting == "label":
        labels = dataset.label.astype(np.int8)
    else:
        if config.attribute not in dataset.attribute_columns:
            raise SchemaError(f"attribute {config.attribute!r} not in dataset")
        hit = dataset.attribute_columns[config.attribute] == config.designated_value
        if not hit.any():
            raise ProtocolError(f"value {config.designated_value!r} never occurs in {config.attribute!r}")
        labels = (~hit if config.setting == "single_value" else hit).astype(np.int8)
        if config.setting == "multi_value" and hit.sum() < 2 * knn.k:
            raise ProtocolError(
                f"value {config.designated_value!r} has {int(hit.sum())} rows, "
                f"fewer than 2*k = {2 * knn.k}"
            )
    if labels.all() or not labels.any():
        kind = "normal" if labels.all() else "anomalous"
        raise ProtocolError(f"protocol leaves no {kind} rows")
    return labels


def _split(n: int, config: ProtocolConfig):
    gen = RandomStream(config.seed, _SPLIT_STREAM).generator()
    perm = gen.permutation(n)
    n_train = int(round(config.split_ratio * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_test(dataset: TabularDataset, config: ProtocolConfig, labels=None):
    """Seeded split into (normal-only train indices, test indices)."""
    if dataset.n_rows == 0:
        raise ProtocolError("dataset is empty")
    labels = protocol_labels(dataset, config) if labels is None else labels
    train, test = _split(dataset.n_rows, config)
    train = train[labels[train] == 0]
    if train.size == 0:
        raise ProtocolError("no normal rows in the train split")
    return train, test


def _prepare(train_x, test_x, standardize):
    if not standardize:
        return train_x, test_x
    scaler = Standardizer().fit(train_x)
    return scaler.transform(train_x), scaler.transform(test_x)


def _knn_arm(dataset, config, cols, knn, labels, train, test) -> EvalResult:
    if train.size < knn.k:
        raise ProtocolError(f"only {train.size} normal train rows for k={knn.k}")
    x = dataset.features[:, cols]
    tr, te = _prepare(x[train], x[test], config.standardize)
    det = KNNDetector(k=knn.k, aggregation=knn.aggregation.value).fit(tr)
    return evaluate(det.anomaly_score(te), labels[test], config_digest=config_digest(config, knn, list(cols)))


def _probe_arm(dataset, config, cols, probe, labels, test) -> EvalResult:
    train_all, _ = _split(dataset.n_rows, config)
    if np.unique(labels[train_all]).size < 2:
        raise ProtocolError("probe train split holds a single class")
    x = dataset.features[:, cols]
    tr, te = _prepare(x[train_all], x[test], config.standardize)
    model = LinearProbe(
        epochs=probe.epochs,
        learning_rate=probe.learning_rate,
        momentum=probe.momentum,
        batch_size=probe.batch_size,
        random_state=RandomStream(config.seed, _PROBE_STREAM),
    ).fit(tr, labels[train_all])
    return evaluate(model.decision_function(te), labels[test], config_digest=config_digest(config, probe, list(cols)))


def _context(dataset, config, knn):
    labels = protocol_labels(dataset, config, knn)
    train, test = split_train_test(dataset, config, labels)
    if np.unique(labels[test]).size < 2:
        raise ProtocolError("test split holds a single class")
    return labels, train, test


def rank_features(dataset: TabularDataset, config: ProtocolConfig, knn: KnnConfig = KnnConfig(), return_auc=False):
    """Order features by descending single-feature kNN AUC on the test split.

    Ties keep the original column order.
    """
    if not dataset.feature_names:
        raise SchemaError("dataset has no features")
    labels, train, test = _context(dataset, config, knn)
    aucs = [_knn_arm(dataset, config, [j], knn, labels, train, test).auc for j in range(len(dataset.feature_names))]
    order = sorted(range(len(aucs)), key=lambda j: (-aucs[j], j))
    names = [dataset.feature_names[j] for j in order]
    return (names, [aucs[j] for j in order]) if return_auc else names


def dimensionality_sweep(
    dataset: TabularDataset,
    config: ProtocolConfig,
    knn: KnnConfig = KnnConfig(),
    probe: ProbeConfig = ProbeConfig(),
    order=None,
) -> SweepResult:
    """kNN and probe test AUC on growing prefixes of a feature ranking.

    ``order`` defaults to :func:`rank_features`.
    """
    order = rank_features(dataset, config, knn) if order is None else list(order)
    labels, train, test = _context(dataset, config, knn)
    name_to_col = {n: i for i, n in enumerate(dataset.feature_names)}
    knn_auc, probe_auc = [], []
    for d in range(1, len(order) + 1):
        cols = [name_to_col[n] for n in order[:d]]
        knn_auc.append(_knn_arm(dataset, config, cols, knn, labels, train, test).auc)
        probe_auc.append(_probe_arm(dataset, config, cols, probe, labels, test).auc)
    n_anom = int(labels[test].sum())
    return SweepResult(list(order), knn_auc, probe_auc, int(test.size) - n_anom, n_anom)


def run_protocol(
    dataset: TabularDataset,
    config: ProtocolConfig,
    knn: KnnConfig = KnnConfig(),
    probe: ProbeConfig = ProbeConfig(),
) -> tuple[EvalResult, EvalResult]:
    """(kNN result, probe result) on the full feature set, same test rows."""
    labels, train, test = _context(dataset, config, knn)
    cols = list(range(len(dataset.feature_names)))
    return (
        _knn_arm(dataset, config, cols, knn, labels, train, test),
        _probe_arm(dataset, config, cols, probe, labels, test),
    )


def guided_run(dataset: TabularDataset, config: ProtocolConfig, guidance_features, knn: KnnConfig = KnnConfig()) -> EvalResult:
    """kNN arm of :func:`run_protocol` restricted to ``guidance_features``."""
    guidance_features = list(guidance_features)
    if not guidance_features:
        raise ValueError("guidance needs at least one feature")
    cols = list(dataset.columns(guidance_features))
    labels, train, test = _context(dataset, config, knn)
    return _knn_arm(dataset, config, cols, knn, labels, train, test)


# -- toy model bridge ------------------------------------------------------------

def toy_detector_bridge(
    params_grid,
    n_train: int,
    n_test: int,
    knn: KnnConfig = KnnConfig(),
    probe: ProbeConfig = ProbeConfig(),
    stream: RandomStream | None = None,
) -> list[BridgeRow]:
    """kNN and probe AUC on toy-model data for each dimension in ``params_grid``.

    Per dimension ``d`` (randomness from ``stream.child(d)``): ``n_train``
    normal rows fit the kNN detector, a separate labelled sample of
    ``n_train`` rows trains the probe, and ``n_test`` mixed rows are scored
    by both. Features are used as drawn, without standardization.
    """
    params_grid = list(params_grid)
    if not params_grid:
        raise ValueError("params_grid is empty")
    ref = params_grid[0]
    if any(p.delta != ref.delta or p.pi != ref.pi for p in params_grid):
        raise ValueError("all grid entries must share delta and pi")
    stream = ref.stream if stream is None else stream
    rows = []
    for p in params_grid:
        s = stream.child(p.d)
        train = s.child(0).generator().standard_normal((n_train, p.d))
        test = sample_population(p, n_test, s.child(1))
        labelled = sample_population(p, n_train, s.child(2))
        det = KNNDetector(k=knn.k, aggregation=knn.aggregation.value).fit(train)
        knn_auc = roc_auc(det.anomaly_score(test.features), test.labels)
        model = LinearProbe(
            epochs=probe.epochs,
            learning_rate=probe.learning_rate,
            momentum=probe.momentum,
            batch_size=probe.batch_size,
            random_state=s.child(3),
        ).fit(labelled.features, labelled.labels)
        probe_auc = roc_auc(model.decision_function(test.features), test.labels)
        rows.append(BridgeRow(p.d, knn_auc, probe_auc))
    return rows


# -- synthetic fixtures ---------------------------------------------------------

def make_toy_dataset(n: int, n_noise: int = 15, delta: float = 3.0, pi: float = 0.5, seed: int = 0) -> TabularDataset:
    """Toy-model rows as a tabular dataset: one shifted ``signal`` column plus noise."""
    sample = sample_population(ToyModelParams(1 + n_noise, delta, pi, seed), n)
    names = ["signal"] + [f"noise_{i}" for i in range(n_noise)]
    return TabularDataset(names, sample.features, sample.labels)


def make_attribute_dataset(
    n: int,
    n_values: int = 3,
    spacing: float = 3.0,
    n_noise: int = 6,
    seed: int = 0,
) -> TabularDataset:
    """Two independent categorical attributes, each encoded by one feature.

    ``relevant`` and ``nuisance`` take ``n_values`` values ``v0, v1, ...``
    uniformly; value ``i`` shifts the matching ``*_feature`` column by
    ``i * spacing``. ``n_noise`` pure-noise columns follow. The label column
    marks rows whose ``relevant`` value is not ``v0``.
    """
    gen = RandomStream(seed).generator()
    values = np.array([f"v{i}" for i in range(n_values)])
    rel = gen.integers(0, n_values, n)
    nui = gen.integers(0, n_values, n)
    x = gen.standard_normal((n, 2 + n_noise))
    x[:, 0] += spacing * rel
    x[:, 1] += spacing * nui
    names = ["relevant_feature", "nuisance_feature"] + [f"noise_{i}" for i in range(n_noise)]
    return TabularDataset(
        names,
        x,
        (rel != 0).astype(np.int8),
        attribute_columns={"relevant": values[rel], "nuisance": values[nui]},
    )


# -- result records -------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def config_digest(*parts) -> str:
    """Short stable hash of configs (dataclasses) and plain values."""
    payload = [_plain(asdict(p)) if hasattr(p, "__dataclass_fields__") else _plain(p) for p in parts]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def result_record(experiment_id: str, dataset: TabularDataset, config: ProtocolConfig, scorer: str, d: int, result: EvalResult) -> dict:
    return {
        "experiment_id": experiment_id,
        "dataset_digest": dataset.source_digest,
        "setting": config.setting,
        "attribute": config.attribute or "",
        "value": config.designated_value or "",
        "scorer": scorer,
        "d": int(d),
        "auc": float(result.auc),
        "n_normal": int(result.n_normal),
        "n_anomalous": int(result.n_anomalous),
        "seed": int(config.seed),
    }


def write_records(records, stem, columns=RECORD_COLUMNS):
    """Write ``<stem>.csv`` and ``<stem>.jsonl``; returns both paths."""
    stem = Path(stem)
    csv_path, jsonl_path = stem.with_suffix(".csv"), stem.with_suffix(".jsonl")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return csv_path, jsonl_path
