"""Multi-field categorical datasets: libffm parsing, vocabulary, filtering, splits.

Every feature belongs to exactly one field and every instance carries exactly
one active feature per field; fields missing from the input are filled with a
per-field NULL feature so that invariant holds structurally.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, DuplicateFieldError, ParseError

NULL_TOKEN = "__null__"

ROLE_TRAIN = "train"
ROLE_VALIDATION = "validation"
ROLE_TEST = "test"
_ROLES = (ROLE_TRAIN, ROLE_VALIDATION, ROLE_TEST)


class FieldSchema:
    """Maps raw feature tokens to dense integer ids and fields.

    Feature ids are dense in ``[0, n_features)``. Tokens are scoped per field
    (the same raw token under two fields yields two distinct features), and
    each field owns exactly one NULL feature used for missing or unseen values.
    """

    def __init__(self, n_fields: int = 0, field_names: Sequence[str] | None = None):
        self._field_of: list[int] = []
        self._token_of: list[str] = []
        self._frequency: list[int] = []
        self._null_of: list[int] = []
        self._ids: dict[tuple[int, str], int] = {}
        self.field_names: list[str] = []
        for f in range(n_fields):
            self._add_field(None if field_names is None else field_names[f])

    @property
    def n_fields(self) -> int:
        return len(self._null_of)

    @property
    def n_features(self) -> int:
        return len(self._field_of)

    def _add_field(self, name: str | None = None) -> int:
        f = len(self._null_of)
        self._null_of.append(-1)
        self.field_names.append(name if name is not None else f"field_{f}")
        null_id = self.add_feature(f, NULL_TOKEN)
        self._null_of[f] = null_id
        return f

    def ensure_field(self, field_id: int) -> None:
        """Grow the schema so ``field_id`` exists (un-frozen parsing only)."""
        while self.n_fields <= field_id:
            self._add_field()

    def add_feature(self, field_id: int, token: str) -> int:
        key = (field_id, token)
        if key in self._ids:
            return self._ids[key]
        fid = len(self._field_of)
        self._ids[key] = fid
        self._field_of.append(field_id)
        self._token_of.append(token)
        self._frequency.append(0)
        return fid

    def feature_id(self, field_id: int, token: str) -> int | None:
        return self._ids.get((field_id, token))

    def field_of(self, feature_id: int) -> int:
        return self._field_of[feature_id]

    def token_of(self, feature_id: int) -> str:
        return self._token_of[feature_id]

    def null_feature_of(self, field_id: int) -> int:
        return self._null_of[field_id]

    def is_null(self, feature_id: int) -> bool:
        return self._token_of[feature_id] == NULL_TOKEN

    def frequency(self, feature_id: int) -> int:
        return self._frequency[feature_id]

    def count(self, feature_id: int, by: int = 1) -> None:
        self._frequency[feature_id] += by

    def field_of_array(self) -> np.ndarray:
        return np.asarray(self._field_of, dtype=np.int64)

    def null_array(self) -> np.ndarray:
        return np.asarray(self._null_of, dtype=np.int64)

    def validate(self) -> None:
        for fid in range(self.n_features):
            if not 0 <= self._field_of[fid] < self.n_fields:
                raise AssertionError(f"feature {fid} has invalid field")
        for f, nid in enumerate(self._null_of):
            if self._field_of[nid] != f or self._token_of[nid] != NULL_TOKEN:
                raise AssertionError(f"field {f} has no valid NULL feature")

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": 1,
            "n_fields": self.n_fields,
            "field_names": list(self.field_names),
            "null_features": list(self._null_of),
            "features": [
                {"id": i, "field": self._field_of[i], "token": self._token_of[i],
                 "frequency": self._frequency[i]}
                for i in range(self.n_features)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FieldSchema":
        schema = cls()
        for f in range(doc["n_fields"]):
            schema._null_of.append(-1)
            schema.field_names.append(doc["field_names"][f])
        for feat in doc["features"]:
            fid, f, token = feat["id"], feat["field"], feat["token"]
            if fid != len(schema._field_of):
                raise ParseError("schema feature ids are not dense")
            schema._ids[(f, token)] = fid
            schema._field_of.append(f)
            schema._token_of.append(token)
            schema._frequency.append(int(feat.get("frequency", 0)))
        schema._null_of = list(doc["null_features"])
        schema.validate()
        return schema

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "FieldSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(eq=False)
class Instance:
    """One labeled example: one active feature per field, indexed by field id."""

    label: int  # +1 or -1
    features: np.ndarray  # shape (n_fields,), features[f] active in field f

    @property
    def active(self) -> list[tuple[int, int]]:
        return [(f, int(i)) for f, i in enumerate(self.features)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Instance)
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class Dataset:
    """A labeled sample with a shared schema; X[s, f] is field f's active feature."""

    schema: FieldSchema
    X: np.ndarray  # (n_samples, n_fields) int64
    y: np.ndarray  # (n_samples,) int64 in {+1, -1}
    role: str = ROLE_TRAIN

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ConfigError(f"unknown dataset role {self.role!r}")
        self.X = np.ascontiguousarray(self.X, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, s: int) -> Instance:
        return Instance(int(self.y[s]), self.X[s])

    def instances(self) -> Iterator[Instance]:
        for s in range(len(self)):
            yield self[s]

    @classmethod
    def from_instances(cls, schema: FieldSchema, instances: Sequence[Instance],
                       role: str = ROLE_TRAIN) -> "Dataset":
        n = schema.n_fields
        X = np.empty((len(instances), n), dtype=np.int64)
        y = np.empty(len(instances), dtype=np.int64)
        for s, inst in enumerate(instances):
            X[s] = inst.features
            y[s] = inst.label
        return cls(schema, X, y, role)

    def subset(self, indices: np.ndarray, role: str | None = None) -> "Dataset":
        return Dataset(self.schema, self.X[indices], self.y[indices],
                       role if role is not None else self.role)


# -- libffm text format ------------------------------------------------------


def _parse_token(token: str, line_no: int) -> tuple[int, str]:
    parts = token.split(":")
    if len(parts) == 2:
        f_str, feat = parts
    elif len(parts) == 3:
        f_str, feat, value = parts
        try:
            ok = float(value) == 1.0
        except ValueError:
            ok = False
        if not ok:
            raise ParseError(f"feature value must be 1, got {value!r}", line_no)
    else:
        raise ParseError(f"malformed token {token!r}", line_no)
    try:
        field_id = int(f_str)
    except ValueError:
        raise ParseError(f"field id is not an integer in token {token!r}", line_no)
    if field_id < 0 or not feat:
        raise ParseError(f"malformed token {token!r}", line_no)
    return field_id, feat


def _parse_label(token: str, line_no: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"label must be one of 1, -1, 0; got {token!r}", line_no)
    if value not in (1, -1, 0):
        raise ParseError(f"label must be one of 1, -1, 0; got {token!r}", line_no)
    return 1 if value == 1 else -1


def _parse_line_raw(line: str, schema: FieldSchema, frozen: bool,
                    line_no: int) -> tuple[int, dict[int, int]]:
    """Parse one line into (label, {field: feature_id}) without NULL-padding."""
    tokens = line.split()
    if not tokens:
        raise ParseError("empty line", line_no)
    label = _parse_label(tokens[0], line_no)
    seen: dict[int, int] = {}
    for token in tokens[1:]:
        field_id, feat = _parse_token(token, line_no)
        if field_id in seen:
            raise DuplicateFieldError(
                f"two features for field {field_id} on one line", line_no)
        if frozen:
            if field_id >= schema.n_fields:
                raise ParseError(
                    f"field {field_id} unknown to the frozen schema", line_no)
            fid = schema.feature_id(field_id, feat)
            if fid is None:
                fid = schema.null_feature_of(field_id)
        else:
            schema.ensure_field(field_id)
            fid = schema.add_feature(field_id, feat)
            schema.count(fid)
        seen[field_id] = fid
    return label, seen


def _materialize(schema: FieldSchema, label: int, seen: dict[int, int],
                 frozen: bool) -> Instance:
    features = schema.null_array().copy()
    for f, fid in seen.items():
        features[f] = fid
    if not frozen:
        for f in range(schema.n_fields):
            if f not in seen:
                schema.count(schema.null_feature_of(f))
    return Instance(label, features)


def parse_libffm_line(line: str, schema: FieldSchema, frozen: bool = False,
                      line_no: int = 0) -> Instance:
    """Parse one ``label field:feature[:value]`` line.

    When not frozen, unseen tokens extend the schema (and counts are updated);
    when frozen, unseen tokens map to the field's NULL feature. Fields absent
    from the line are filled with their NULL feature.
    """
    label, seen = _parse_line_raw(line, schema, frozen, line_no)
    return _materialize(schema, label, seen, frozen)


def _open_text(path: str | Path) -> io.TextIOBase:
    raw = open(path, "rb")
    magic = raw.read(2)
    raw.seek(0)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.GzipFile(fileobj=raw), encoding="utf-8")
    return io.TextIOWrapper(raw, encoding="utf-8")


def parse_libffm(source: str | Path | Iterable[str], schema: FieldSchema | None = None,
                 frozen: bool = False, role: str = ROLE_TRAIN) -> Dataset:
    """Parse a libffm text file (or iterable of lines) into a Dataset.

    Gzip files are accepted transparently. With ``schema=None`` a fresh schema
    is built from the data; fields first seen late in the file still get NULL
    entries in all earlier instances.
    """
    if schema is None:
        if frozen:
            raise ConfigError("frozen parsing requires an existing schema")
        schema = FieldSchema()
    close = None
    if isinstance(source, (str, Path)):
        fh = _open_text(source)
        close = fh
        lines: Iterable[str] = fh
    else:
        lines = source
    labels: list[int] = []
    rows: list[dict[int, int]] = []
    try:
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            label, seen = _parse_line_raw(line, schema, frozen, line_no)
            labels.append(label)
            rows.append(seen)
    finally:
        if close is not None:
            close.close()
    n = schema.n_fields
    nulls = schema.null_array()
    X = np.tile(nulls, (len(rows), 1))
    for s, seen in enumerate(rows):
        for f, fid in seen.items():
            X[s, f] = fid
    if not frozen:
        # NULL substitutions for missing fields count as occurrences.
        for f in range(n):
            missing = int(np.sum(X[:, f] == nulls[f]))
            explicit = sum(1 for seen in rows if seen.get(f) == nulls[f])
            schema.count(nulls[f], missing - explicit)
    return Dataset(schema, X, np.asarray(labels, dtype=np.int64), role)


def instance_to_line(inst: Instance, schema: FieldSchema) -> str:
    """Serialize one instance; NULL features are omitted (re-parsing restores them)."""
    parts = ["1" if inst.label == 1 else "-1"]
    for f, fid in inst.active:
        if fid != schema.null_feature_of(f):
            parts.append(f"{f}:{schema.token_of(fid)}")
    return " ".join(parts)


def write_libffm(data: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in data.instances():
            fh.write(instance_to_line(inst, data.schema) + "\n")


# -- vocabulary filtering and sampling ----------------------------------------


def apply_frequency_filter(train: Dataset, tau: int) -> tuple[Dataset, FieldSchema]:
    """Replace features seen fewer than ``tau`` times in ``train`` by their
    field's NULL feature and re-densify ids.

    Counts are taken from the given training split only. Apply the result to
    validation/test either by re-parsing them frozen under the returned schema
    or with :func:`reindex_dataset`.
    """
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    old = train.schema
    counts = np.bincount(train.X.ravel(), minlength=old.n_features)
    keep = counts >= tau
    for f in range(old.n_fields):
        keep[old.null_feature_of(f)] = True  # NULL is the replacement target

    new = FieldSchema(old.n_fields, old.field_names)
    remap = np.empty(old.n_features, dtype=np.int64)
    for fid in range(old.n_features):
        f = old.field_of(fid)
        if keep[fid]:
            remap[fid] = new.add_feature(f, old.token_of(fid))
        else:
            remap[fid] = new.null_feature_of(f)
    X = remap[train.X]
    new_counts = np.bincount(X.ravel(), minlength=new.n_features)
    for fid in range(new.n_features):
        new.count(fid, int(new_counts[fid]))
    return Dataset(new, X, train.y, train.role), new


def reindex_dataset(data: Dataset, schema: FieldSchema) -> Dataset:
    """Re-express ``data`` under another schema via tokens; unknown tokens map to NULL."""
    old = data.schema
    if old.n_fields != schema.n_fields:
        raise ConfigError("schemas have different field counts")
    remap = np.empty(old.n_features, dtype=np.int64)
    for fid in range(old.n_features):
        f = old.field_of(fid)
        new_id = schema.feature_id(f, old.token_of(fid))
        remap[fid] = schema.null_feature_of(f) if new_id is None else new_id
    return Dataset(schema, remap[data.X], data.y, data.role)


def downsample_negatives(train: Dataset, keep_rate: float, seed: int) -> Dataset:
    """Keep each negative independently with probability ``keep_rate``; keep all positives.

    Applies to the training split only; validation and test must reflect the
    actual traffic distribution and are never downsampled.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError(f"keep_rate must be in (0, 1], got {keep_rate}")
    if train.role != ROLE_TRAIN:
        raise ConfigError(f"downsampling refuses role {train.role!r}")
    if keep_rate == 1.0:
        return train
    rng = np.random.default_rng(seed)
    draws = rng.random(len(train))
    mask = (train.y == 1) | (draws < keep_rate)
    return train.subset(np.flatnonzero(mask))


def split_dataset(data: Dataset, ratios: tuple[int, int, int] = (60, 20, 20),
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle-partition into train/validation/test by integer percentages."""
    if sum(ratios) != 100:
        raise ConfigError(f"ratios must sum to 100, got {ratios}")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    cut1 = n * ratios[0] // 100
    cut2 = n * (ratios[0] + ratios[1]) // 100
    return (
        data.subset(order[:cut1], ROLE_TRAIN),
        data.subset(order[cut1:cut2], ROLE_VALIDATION),
        data.subset(order[cut2:], ROLE_TEST),
    )
