"""Transition datasets: storage, .rjsonl serialization, mixing, batching.

File layout (extension .rjsonl): one manifest JSON object on line 1, then
one JSON object per transition. Floats serialize via Python's shortest
round-trip repr, so load(save(d)) re-serializes byte-identically. Datasets
are immutable after creation and safe to share read-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILE_EXTENSION = ".rjsonl"
SCHEMA_VERSION = "v1"


class DatasetError(RuntimeError):
    pass


class ChecksumMismatch(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class DatasetManifest:
    env_id: str
    source: str
    count: int
    seed: int
    feature_min: list[float]
    feature_max: list[float]
    created: str = ""
    version: str = SCHEMA_VERSION

    def to_json(self, checksum: str) -> str:
        doc = {
            "version": self.version,
            "env_id": self.env_id,
            "source": self.source,
            "count": self.count,
            "seed": self.seed,
            "feature_min": self.feature_min,
            "feature_max": self.feature_max,
            "created": self.created,
            "checksum": checksum,
        }
        return json.dumps(doc, separators=(",", ":"))


class Dataset:
    """Transitions stored as stacked arrays for cheap batch indexing."""

    def __init__(self, manifest: DatasetManifest, s: np.ndarray, a: np.ndarray,
                 r: np.ndarray, s_next: np.ndarray, done: np.ndarray):
        n = len(a)
        if not (len(s) == len(r) == len(s_next) == len(done) == n == manifest.count):
            raise CountMismatch(
                f"manifest count {manifest.count} does not match records ({n})")
        self.manifest = manifest
        self.s = np.asarray(s, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.int64)
        self.r = np.asarray(r, dtype=np.float64)
        self.s_next = np.asarray(s_next, dtype=np.float64)
        self.done = np.asarray(done, dtype=bool)

    def __len__(self) -> int:
        return len(self.a)

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i], int(self.a[i]), float(self.r[i]),
                          self.s_next[i], bool(self.done[i]))

    @staticmethod
    def from_transitions(manifest_kwargs: dict, transitions: list[Transition]) -> "Dataset":
        n = len(transitions)
        if n:
            s = np.stack([t.s for t in transitions])
            s_next = np.stack([t.s_next for t in transitions])
        else:
            s = np.zeros((0, 0, 0))
            s_next = np.zeros((0, 0, 0))
        a = np.array([t.a for t in transitions], dtype=np.int64)
        r = np.array([t.r for t in transitions])
        done = np.array([t.done for t in transitions], dtype=bool)
        fmin, fmax = feature_ranges(s, s_next)
        manifest = DatasetManifest(count=n, feature_min=fmin, feature_max=fmax,
                                   **manifest_kwargs)
        return Dataset(manifest, s, a, r, s_next, done)


def feature_ranges(s: np.ndarray, s_next: np.ndarray) -> tuple[list[float], list[float]]:
    """Per-feature min/max over every row of every stored state."""
    if s.size == 0:
        return [], []
    stacked = np.concatenate([s.reshape(-1, s.shape[-1]),
                              s_next.reshape(-1, s_next.shape[-1])])
    return stacked.min(axis=0).tolist(), stacked.max(axis=0).tolist()


# -- serialization ---------------------------------------------------------


def _record_line(s, a, r, s_next, done) -> bytes:
    doc = {"s": s.tolist(), "a": int(a), "r": float(r),
           "s_next": s_next.tolist(), "done": bool(done)}
    return json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n"


def save(dataset: Dataset, path) -> None:
    path = Path(path)
    lines = [_record_line(dataset.s[i], dataset.a[i], dataset.r[i],
                          dataset.s_next[i], dataset.done[i])
             for i in range(len(dataset))]
    digest = hashlib.sha256(b"".join(lines)).hexdigest()
    with open(path, "wb") as f:
        f.write(dataset.manifest.to_json(digest).encode("utf-8"))
        f.write(b"\n")
        for line in lines:
            f.write(line)


def load(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise TruncatedFile(f"{path}: no manifest line")
    try:
        head = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TruncatedFile(f"{path}: unreadable manifest: {e}") from e

    body = raw[nl + 1:]
    if body and not body.endswith(b"\n"):
        raise TruncatedFile(f"{path}: final record is incomplete")
    lines = body.split(b"\n")[:-1] if body else []

    count = head.get("count", -1)
    if count != len(lines):
        raise CountMismatch(f"{path}: manifest count {count} but {len(lines)} records")

    digest = hashlib.sha256(b"".join(line + b"\n" for line in lines)).hexdigest()
    if digest != head.get("checksum"):
        raise ChecksumMismatch(f"{path}: checksum mismatch "
                               f"(stored {head.get('checksum')!r}, computed {digest!r})")

    s_list, a_list, r_list, sn_list, d_list = [], [], [], [], []
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise TruncatedFile(f"{path}: record {i} unreadable: {e}") from e
        s_list.append(rec["s"])
        a_list.append(rec["a"])
        r_list.append(rec["r"])
        sn_list.append(rec["s_next"])
        d_list.append(rec["done"])

    manifest = DatasetManifest(
        env_id=head["env_id"], source=head["source"], count=count,
        seed=head["seed"], feature_min=head["feature_min"],
        feature_max=head["feature_max"], created=head.get("created", ""),
        version=head.get("version", SCHEMA_VERSION))
    if count:
        s = np.array(s_list)
        s_next = np.array(sn_list)
    else:
        s = np.zeros((0, 0, 0))
        s_next = np.zeros((0, 0, 0))
    return Dataset(manifest, s, np.array(a_list, dtype=np.int64),
                   np.array(r_list, dtype=np.float64), s_next,
                   np.array(d_list, dtype=bool))


# -- mixing and batching -----------------------------------------------------


@dataclass
class MixSpec:
    p: float          # fraction drawn from the teacher dataset
    total: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.total < 0:
            raise ValueError("total must be >= 0")


def mix(d_teacher: Dataset, d_random: Dataset, spec: MixSpec) -> Dataset:
    """Sample round(p*total) transitions from the teacher set and the rest
    from the random set, both uniformly without replacement."""
    n_teacher = int(np.floor(spec.p * spec.total + 0.5))  # round half up
    n_random = spec.total - n_teacher
    if n_teacher > len(d_teacher):
        raise DatasetError(f"mix needs {n_teacher} teacher transitions, "
                           f"only {len(d_teacher)} available")
    if n_random > len(d_random):
        raise DatasetError(f"mix needs {n_random} random transitions, "
                           f"only {len(d_random)} available")
    rng = np.random.default_rng(spec.seed)
    idx_t = np.sort(rng.choice(len(d_teacher), size=n_teacher, replace=False))
    idx_r = np.sort(rng.choice(len(d_random), size=n_random, replace=False))

    s = np.concatenate([d_teacher.s[idx_t], d_random.s[idx_r]])
    a = np.concatenate([d_teacher.a[idx_t], d_random.a[idx_r]])
    r = np.concatenate([d_teacher.r[idx_t], d_random.r[idx_r]])
    s_next = np.concatenate([d_teacher.s_next[idx_t], d_random.s_next[idx_r]])
    done = np.concatenate([d_teacher.done[idx_t], d_random.done[idx_r]])

    env_id = (d_teacher.manifest.env_id if d_teacher.manifest.env_id == d_random.manifest.env_id
              else f"{d_teacher.manifest.env_id}+{d_random.manifest.env_id}")
    fmin, fmax = feature_ranges(s, s_next)
    manifest = DatasetManifest(env_id=env_id, source=f"mixed({float(spec.p)!r})",
                               count=spec.total, seed=spec.seed,
                               feature_min=fmin, feature_max=fmax)
    return Dataset(manifest, s, a, r, s_next, done)


def sample_batch(dataset: Dataset, batch: int, rng: np.random.Generator):
    """Uniform sampling with replacement; returns stacked arrays."""
    if len(dataset) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size=batch)
    return (dataset.s[idx], dataset.a[idx], dataset.r[idx],
            dataset.s_next[idx], dataset.done[idx])
