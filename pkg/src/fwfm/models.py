"""Model families for CTR prediction on one-active-feature-per-field data.

Seven kinds share one prediction surface: a logistic-regression linear part,
degree-2 feature crosses (hashed pair weights, factorized dot products,
field-aware embeddings), and the field-weighted variant that scales each
embedding dot product by a learned per-field-pair weight. All kinds expose the
raw logit, the click probability, and an analytic sparse gradient of the
logistic loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Dataset, Instance
from .exceptions import ConfigError, ContractViolationError, ParseError

DEFAULT_POLY2_HASH_SPACE = 10**7

_U64 = np.uint64
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_PRIME = _U64(0xC2B2AE3D27D4EB4F)


class ModelKind(str, Enum):
    LR = "lr"
    POLY2 = "poly2"
    FM = "fm"
    FFM = "ffm"
    FWFM_LW = "fwfm-lw"
    FWFM_FELV = "fwfm-felv"
    FWFM_FILV = "fwfm-filv"

    @property
    def is_fwfm(self) -> bool:
        return self in (ModelKind.FWFM_LW, ModelKind.FWFM_FELV, ModelKind.FWFM_FILV)

    @property
    def uses_feature_embeddings(self) -> bool:
        return self is ModelKind.FM or self.is_fwfm

    @property
    def uses_scalar_linear(self) -> bool:
        return self in (ModelKind.LR, ModelKind.POLY2, ModelKind.FM,
                        ModelKind.FFM, ModelKind.FWFM_LW)


def pair_fields(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle field pairs (a, b) with a < b, in row-major order."""
    a, b = np.triu_indices(n, k=1)
    return a.astype(np.int64), b.astype(np.int64)


def pair_count(n: int) -> int:
    return n * (n - 1) // 2


def pair_index(n: int, a: int, b: int) -> int:
    """Position of unordered pair (a, b) in the pair_fields enumeration."""
    if a > b:
        a, b = b, a
    if a == b:
        raise ConfigError("within-field pairs do not exist")
    return a * (2 * n - a - 1) // 2 + (b - a - 1)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def poly2_hash(i, j, hash_space: int):
    """Symmetric avalanche hash of a feature pair into [0, hash_space).

    Accepts scalars or equally-shaped arrays; hash(i, j) == hash(j, i).
    """
    if hash_space <= 0:
        raise ConfigError("hash space must be positive")
    a = np.asarray(np.minimum(i, j), dtype=np.uint64)
    b = np.asarray(np.maximum(i, j), dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(a * _GOLDEN + b * _PRIME)
        slots = z % _U64(hash_space)
    if np.isscalar(i) or np.ndim(i) == 0:
        return int(slots)
    return slots.astype(np.int64)


def ffm_slot(own_field: int, target_field: int) -> int:
    """Index of ``target_field`` among the n-1 per-feature embedding copies."""
    if own_field == target_field:
        raise ConfigError("a feature never interacts with its own field")
    return target_field if target_field < own_field else target_field - 1


@dataclass(eq=False)
class ModelParams:
    """Parameter container; only arrays relevant to ``kind`` are allocated.

    Field-pair weights are stored packed as the strict upper triangle (one
    scalar per unordered pair, diagonal implicitly zero) so the allocated
    scalar count matches the model complexity formulas exactly; ``r`` exposes
    the symmetric matrix view.
    """

    kind: ModelKind
    m: int
    n: int
    k: int = 0
    hash_space: int | None = None
    w0: np.ndarray = dc_field(default_factory=lambda: np.zeros(1))
    w: np.ndarray | None = None
    w_hash: np.ndarray | None = None
    v: np.ndarray | None = None
    v_field: np.ndarray | None = None
    r_pairs: np.ndarray | None = None
    wv_feat: np.ndarray | None = None
    wv_field: np.ndarray | None = None

    @classmethod
    def initialize(cls, kind: ModelKind | str, m: int, n: int, k: int = 10,
                   hash_space: int | None = None, seed: int = 0,
                   rng: np.random.Generator | None = None) -> "ModelParams":
        """Allocate and seed parameters for ``kind``.

        Embeddings start uniform in [-1/sqrt(k), 1/sqrt(k)]; field-pair weights
        start at 1.0 (plain-FM behavior); linear weights start at zero.
        """
        kind = ModelKind(kind)
        if m <= 0 or n <= 0:
            raise ConfigError("m and n must be positive")
        if rng is None:
            rng = np.random.default_rng(seed)
        params = cls(kind=kind, m=m, n=n)
        if kind.uses_scalar_linear:
            params.w = np.zeros(m)
        if kind.uses_feature_embeddings or kind is ModelKind.FFM:
            if k <= 0:
                raise ConfigError("embedding dimension k must be positive")
            params.k = k
            scale = 1.0 / np.sqrt(k)
        if kind is ModelKind.POLY2:
            params.hash_space = int(hash_space or DEFAULT_POLY2_HASH_SPACE)
            if params.hash_space <= 0:
                raise ConfigError("hash space must be positive")
            params.w_hash = np.zeros(params.hash_space)
        if kind.uses_feature_embeddings:
            params.v = rng.uniform(-scale, scale, size=(m, k))
        if kind is ModelKind.FFM:
            if hash_space is not None and hash_space <= 0:
                raise ConfigError("hash space must be positive")
            params.hash_space = hash_space
            rows = m if hash_space is None else int(hash_space)
            params.v_field = rng.uniform(-scale, scale, size=(rows, n - 1, k))
        if kind.is_fwfm:
            params.r_pairs = np.ones(pair_count(n))
        if kind is ModelKind.FWFM_FELV:
            params.wv_feat = np.zeros((m, k))
        if kind is ModelKind.FWFM_FILV:
            params.wv_field = np.zeros((n, k))
        return params

    @property
    def r(self) -> np.ndarray:
        """Symmetric field-pair weight matrix with zero diagonal."""
        if self.r_pairs is None:
            raise ConfigError(f"{self.kind.value} has no field-pair weights")
        mat = np.zeros((self.n, self.n))
        a, b = pair_fields(self.n)
        mat[a, b] = self.r_pairs
        mat[b, a] = self.r_pairs
        return mat

    def arrays(self) -> dict[str, np.ndarray]:
        """All allocated parameter arrays, bias included, in a fixed order."""
        out = {"w0": self.w0}
        for name in ("w", "w_hash", "v", "v_field", "r_pairs", "wv_feat", "wv_field"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        return out

    def parameter_count(self) -> int:
        """Allocated scalars excluding the bias."""
        return sum(arr.size for name, arr in self.arrays().items() if name != "w0")

    @staticmethod
    def count(kind: ModelKind | str, m: int, n: int, k: int = 10,
              hash_space: int | None = None) -> int:
        """Parameter count by formula, without allocating anything."""
        kind = ModelKind(kind)
        pairs = pair_count(n)
        if kind is ModelKind.LR:
            return m
        if kind is ModelKind.POLY2:
            return m + int(hash_space or DEFAULT_POLY2_HASH_SPACE)
        if kind is ModelKind.FM:
            return m + m * k
        if kind is ModelKind.FFM:
            rows = m if hash_space is None else int(hash_space)
            return m + rows * (n - 1) * k
        if kind is ModelKind.FWFM_LW:
            return m + m * k + pairs
        if kind is ModelKind.FWFM_FELV:
            return 2 * m * k + pairs
        return n * k + m * k + pairs  # FWFM_FILV

    def copy(self) -> "ModelParams":
        dup = ModelParams(kind=self.kind, m=self.m, n=self.n, k=self.k,
                          hash_space=self.hash_space)
        for name, arr in self.arrays().items():
            setattr(dup, name, arr.copy())
        return dup

    # -- snapshot format ----------------------------------------------------
    # magic | uint32 header length | JSON header | raw float64 arrays.
    # Raw little-endian bytes in a fixed catalog order make round trips
    # bit-exact and repeated saves byte-identical.

    _MAGIC = b"FWFMSNAP"

    def save(self, path: str | Path) -> None:
        header = {
            "version": 1,
            "kind": self.kind.value,
            "m": self.m,
            "n": self.n,
            "k": self.k,
            "hash_space": self.hash_space,
            "arrays": [{"name": name, "shape": list(arr.shape)}
                       for name, arr in self.arrays().items()],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(len(blob).to_bytes(4, "little"))
            fh.write(blob)
            for _, arr in self.arrays().items():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        with open(path, "rb") as fh:
            if fh.read(8) != cls._MAGIC:
                raise ParseError(f"{path}: not a model snapshot")
            size = int.from_bytes(fh.read(4), "little")
            header = json.loads(fh.read(size).decode("utf-8"))
            if header["version"] != 1:
                raise ParseError(f"{path}: unsupported snapshot version")
            params = cls(kind=ModelKind(header["kind"]), m=header["m"],
                         n=header["n"], k=header["k"],
                         hash_space=header["hash_space"])
            for entry in header["arrays"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
                setattr(params, entry["name"], arr.astype(np.float64))
        return params


# -- prediction ---------------------------------------------------------------


def _check_bounds(params: ModelParams, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != params.n:
        raise ContractViolationError(
            f"expected (n_samples, {params.n}) feature-id matrix, got {X.shape}")
    if X.size and (X.min() < 0 or X.max() >= params.m):
        raise ContractViolationError(
            f"feature id out of bounds [0, {params.m})")


def _ffm_rows(params: ModelParams, X: np.ndarray) -> np.ndarray:
    if params.hash_space is None:
        return X
    return X % params.hash_space


def ffm_hashed_lookup(params: ModelParams, feature_id: int, own_field: int,
                      target_field: int) -> np.ndarray:
    """The embedding row feature ``feature_id`` uses toward ``target_field``.

    Returns a view into the parameter storage. With a hashing space configured
    the feature index is reduced modulo the space first, so colliding features
    share (and write through to) one row; without hashing the lookup is the
    identity on feature ids.
    """
    if params.kind is not ModelKind.FFM:
        raise ConfigError("field-aware embedding lookup requires an FFM model")
    row = feature_id if params.hash_space is None else feature_id % params.hash_space
    return params.v_field[row, ffm_slot(own_field, target_field)]


def _forward(params: ModelParams, X: np.ndarray) -> tuple[np.ndarray, dict]:
    """Raw logits for a batch plus the intermediates the backward pass reuses."""
    kind = params.kind
    n_samples, n = X.shape
    cache: dict = {}
    phi = np.full(n_samples, params.w0[0])

    if kind.uses_scalar_linear:
        phi = phi + params.w[X].sum(axis=1)
    elif kind is ModelKind.FWFM_FELV:
        cache["S"] = params.v[X]
        cache["WL"] = params.wv_feat[X]
        phi = phi + (cache["S"] * cache["WL"]).sum(axis=(1, 2))
    elif kind is ModelKind.FWFM_FILV:
        cache["S"] = params.v[X]
        phi = phi + (cache["S"] * params.wv_field[None, :, :]).sum(axis=(1, 2))

    if kind is ModelKind.POLY2:
        a, b = pair_fields(n)
        slots = poly2_hash(X[:, a], X[:, b], params.hash_space)
        cache["slots"] = slots
        phi = phi + params.w_hash[slots].sum(axis=1)
    elif kind.uses_feature_embeddings:
        S = cache.get("S")
        if S is None:
            S = params.v[X]
            cache["S"] = S
        a, b = pair_fields(n)
        dots = np.einsum("spk,spk->sp", S[:, a], S[:, b])
        cache["dots"] = dots
        weights = params.r_pairs if kind.is_fwfm else np.ones(pair_count(n))
        cache["pair_weights"] = weights
        phi = phi + (dots * weights).sum(axis=1)
    elif kind is ModelKind.FFM:
        rows = _ffm_rows(params, X)
        cache["rows"] = rows
        a, b = pair_fields(n)
        dots = np.empty((n_samples, len(a)))
        emb = []
        for p in range(len(a)):
            fa, fb = int(a[p]), int(b[p])
            ea = params.v_field[rows[:, fa], ffm_slot(fa, fb)]
            eb = params.v_field[rows[:, fb], ffm_slot(fb, fa)]
            emb.append((ea, eb))
            dots[:, p] = np.einsum("sk,sk->s", ea, eb)
        cache["ffm_emb"] = emb
        phi = phi + dots.sum(axis=1)
    return phi, cache


def predict_raw_batch(params: ModelParams, X: np.ndarray,
                      chunk: int = 16384) -> np.ndarray:
    """Un-squashed logits for a (n_samples, n_fields) feature-id matrix."""
    X = np.asarray(X, dtype=np.int64)
    _check_bounds(params, X)
    if X.shape[0] <= chunk:
        return _forward(params, X)[0]
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        out[start:start + chunk] = _forward(params, X[start:start + chunk])[0]
    return out


def predict_raw(params: ModelParams, inst: Instance) -> float:
    """The model's logit for one instance."""
    return float(predict_raw_batch(params, inst.features[None, :])[0])


def predict_proba_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return expit(predict_raw_batch(params, X))


def predict_proba(params: ModelParams, inst: Instance) -> float:
    """Click probability 1 / (1 + exp(-logit)), saturating at the extremes."""
    return float(expit(predict_raw(params, inst)))


def predict_dataset(params: ModelParams, data: Dataset) -> np.ndarray:
    return predict_proba_batch(params, data.X)


# -- gradients ----------------------------------------------------------------


@dataclass
class SparseGradient:
    """Per-instance logistic-loss gradient, keyed by the touched parameters.

    ``d_v_field`` keys are (embedding row, target field id); with FFM hashing
    the row is the post-hash index, i.e. the physical parameter actually
    touched.
    """

    d_w0: float = 0.0
    d_w: dict[int, float] = dc_field(default_factory=dict)
    d_w_hash: dict[int, float] = dc_field(default_factory=dict)
    d_v: dict[int, np.ndarray] = dc_field(default_factory=dict)
    d_v_field: dict[tuple[int, int], np.ndarray] = dc_field(default_factory=dict)
    d_r: dict[tuple[int, int], float] = dc_field(default_factory=dict)
    d_wv_feat: dict[int, np.ndarray] = dc_field(default_factory=dict)
    d_wv_field: dict[int, np.ndarray] = dc_field(default_factory=dict)


def _aggregate_rows(idx: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum duplicate row indices; returns (unique_rows, summed_values)."""
    uniq, inverse = np.unique(idx, return_inverse=True)
    out = np.zeros((len(uniq),) + values.shape[1:])
    np.add.at(out, inverse, values)
    return uniq, out


def forward_backward(params: ModelParams, X: np.ndarray, y: np.ndarray,
                     scale: float = 1.0) -> tuple[np.ndarray, np.ndarray, dict]:
    """Batch losses, logits, and loss gradients summed over the batch.

    Returns (losses, logits, grads); grads maps array names to either a dense
    gradient array or a ("rows", unique_row_indices, per_row_gradients) tuple.
    ``scale`` multiplies every gradient (use 1/batch for mean-loss steps).
    """
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    _check_bounds(params, X)
    n_samples, n = X.shape
    kind = params.kind

    phi, cache = _forward(params, X)
    z = y * phi
    losses = np.logaddexp(0.0, -z)
    g = -y * expit(-z) * scale  # d loss / d phi, scaled

    grads: dict = {"w0": np.array([g.sum()])}
    a, b = pair_fields(n)

    if kind.uses_scalar_linear:
        rows, vals = _aggregate_rows(X.ravel(), np.repeat(g, n))
        grads["w"] = ("rows", rows, vals)

    if kind is ModelKind.POLY2:
        slots = cache["slots"]
        rows, vals = _aggregate_rows(slots.ravel(), np.repeat(g, slots.shape[1]))
        grads["w_hash"] = ("rows", rows, vals)

    if kind.uses_feature_embeddings:
        S = cache["S"]
        if kind.is_fwfm:
            R = params.r
        else:
            R = np.ones((n, n)) - np.eye(n)
        # dPhi/dv_i for the active feature of field f: sum_g R[f,g] * v_active(g)
        T = np.einsum("fg,sgk->sfk", R, S)
        if kind is ModelKind.FWFM_FELV:
            T = T + cache["WL"]
        elif kind is ModelKind.FWFM_FILV:
            T = T + params.wv_field[None, :, :]
        rows, vals = _aggregate_rows(X.ravel(), (g[:, None, None] * T).reshape(-1, params.k))
        grads["v"] = ("rows", rows, vals)
        if kind.is_fwfm:
            grads["r_pairs"] = cache["dots"].T @ g
        if kind is ModelKind.FWFM_FELV:
            rows, vals = _aggregate_rows(
                X.ravel(), (g[:, None, None] * S).reshape(-1, params.k))
            grads["wv_feat"] = ("rows", rows, vals)
        elif kind is ModelKind.FWFM_FILV:
            grads["wv_field"] = np.einsum("s,sfk->fk", g, S)

    if kind is ModelKind.FFM:
        rows_mat = cache["rows"]
        n_slots = n - 1
        flat_idx = []
        flat_val = []
        for p, (ea, eb) in enumerate(cache["ffm_emb"]):
            fa, fb = int(a[p]), int(b[p])
            flat_idx.append(rows_mat[:, fa] * n_slots + ffm_slot(fa, fb))
            flat_val.append(g[:, None] * eb)
            flat_idx.append(rows_mat[:, fb] * n_slots + ffm_slot(fb, fa))
            flat_val.append(g[:, None] * ea)
        rows, vals = _aggregate_rows(np.concatenate(flat_idx),
                                     np.concatenate(flat_val))
        grads["v_field"] = ("rows", rows, vals)

    return losses, phi, grads


def gradient(params: ModelParams, inst: Instance) -> tuple[float, SparseGradient]:
    """Logistic loss and its gradient for one instance.

    Gradient keys are restricted to the parameters the instance touches.
    """
    X = inst.features[None, :]
    losses, _, grads = forward_backward(params, X, np.array([inst.label]))
    n = params.n
    out = SparseGradient(d_w0=float(grads["w0"][0]))
    if "w" in grads:
        _, rows, vals = grads["w"]
        out.d_w = {int(i): float(val) for i, val in zip(rows, vals)}
    if "w_hash" in grads:
        _, rows, vals = grads["w_hash"]
        out.d_w_hash = {int(i): float(val) for i, val in zip(rows, vals)}
    if "v" in grads:
        _, rows, vals = grads["v"]
        out.d_v = {int(i): val.copy() for i, val in zip(rows, vals)}
    if "r_pairs" in grads:
        a, b = pair_fields(n)
        out.d_r = {(int(a[p]), int(b[p])): float(grads["r_pairs"][p])
                   for p in range(len(a))}
    if "wv_feat" in grads:
        _, rows, vals = grads["wv_feat"]
        out.d_wv_feat = {int(i): val.copy() for i, val in zip(rows, vals)}
    if "wv_field" in grads:
        dense = grads["wv_field"]
        out.d_wv_field = {f: dense[f].copy() for f in range(n)}
    if "v_field" in grads:
        _, rows, vals = grads["v_field"]
        n_slots = n - 1
        # Recover (row, target field) keys from the instance's own pairing.
        slot_to_field = {}
        feat_rows = _ffm_rows(params, X)[0]
        a, b = pair_fields(n)
        for p in range(len(a)):
            fa, fb = int(a[p]), int(b[p])
            slot_to_field[feat_rows[fa] * n_slots + ffm_slot(fa, fb)] = (
                int(feat_rows[fa]), fb)
            slot_to_field[feat_rows[fb] * n_slots + ffm_slot(fb, fa)] = (
                int(feat_rows[fb]), fa)
        out.d_v_field = {slot_to_field[int(i)]: val.copy()
                         for i, val in zip(rows, vals)}
    return float(losses[0]), out


def logistic_loss(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-instance log(1 + exp(-y * logit)) without gradients."""
    phi = predict_raw_batch(params, np.asarray(X, dtype=np.int64))
    return np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * phi)
