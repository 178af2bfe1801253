"""Composed-prototype store, Gaussian pseudo-feature sampling and cosine classification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, NumericError, ProtocolError


@dataclass
class ProtoEntry:
    mean: np.ndarray
    var: np.ndarray
    session: int
    count: int


@dataclass
class PrototypeStore:
    entries: dict[int, ProtoEntry] = field(default_factory=dict)

    def __contains__(self, cid) -> bool:
        return int(cid) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    def prototypes(self, class_ids) -> np.ndarray:
        missing = [c for c in class_ids if int(c) not in self.entries]
        if missing:
            raise ProtocolError(f"no prototype for class {missing[0]}")
        return np.stack([self.entries[int(c)].mean for c in class_ids])

    def copy(self) -> "PrototypeStore":
        return PrototypeStore({c: ProtoEntry(e.mean.copy(), e.var.copy(), e.session, e.count)
                               for c, e in self.entries.items()})

    def mean_variance(self, session: int | None = 0) -> np.ndarray:
        vs = [e.var for e in self.entries.values() if session is None or e.session == session]
        return np.mean(vs, axis=0)

    def to_arrays(self) -> dict[str, np.ndarray]:
        cls = self.classes
        return {
            "class_ids": np.array(cls, dtype=np.int64),
            "prototypes": np.stack([self.entries[c].mean for c in cls]),
            "variances": np.stack([self.entries[c].var for c in cls]),
            "counts": np.array([self.entries[c].count for c in cls], dtype=np.int64),
            "sessions": np.array([self.entries[c].session for c in cls], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PrototypeStore":
        return cls({int(c): ProtoEntry(np.array(p), np.array(v), int(s), int(n))
                    for c, p, v, n, s in zip(arrays["class_ids"], arrays["prototypes"],
                                             arrays["variances"], arrays["counts"], arrays["sessions"])})


def compute_prototypes(features, labels) -> dict[int, tuple[np.ndarray, np.ndarray, int]]:
    """Per-class mean and population (divide-by-N) diagonal variance."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("cannot compute prototypes of an empty class set")
    out = {}
    for c in np.unique(labels):
        f = features[labels == c]
        out[int(c)] = (f.mean(axis=0), f.var(axis=0), len(f))
    return out


def sample_smoothed(mean, var, n: int, seed) -> np.ndarray:
    """``n`` pseudo-features ``mean + eta * sqrt(var)`` with eta ~ N(0, I)."""
    mean, var = np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64)
    if n < 1:
        raise ConfigError("need n >= 1 pseudo-features")
    if np.any(var < 0):
        raise ProtocolError("negative variance in prototype store")
    eta = np.random.default_rng(seed).standard_normal((n, len(mean)))
    return mean + eta * np.sqrt(var)


def classify(z, store: PrototypeStore, seen_classes) -> np.ndarray | int:
    """Argmax cosine similarity to the prototypes of ``seen_classes``.

    Ties go to the lowest class id.  Accepts one vector or a batch.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    cls = sorted(int(c) for c in seen_classes)
    protos = store.prototypes(cls)
    pnorm = np.sqrt((protos * protos).sum(axis=1))
    if np.any(pnorm == 0):
        raise NumericError(f"class {cls[int(np.flatnonzero(pnorm == 0)[0])]} has a zero-norm prototype")
    znorm = np.sqrt((z * z).sum(axis=1))
    if np.any(znorm == 0):
        raise NumericError(f"query {int(np.flatnonzero(znorm == 0)[0])} has zero norm")
    cos = (z @ protos.T) / (znorm[:, None] * pnorm[None, :])
    pred = np.asarray(cls)[cos.argmax(axis=1)]
    return int(pred[0]) if single else pred


def update_store_after_session(store: PrototypeStore, features, labels, session: int,
                               policy: str = "frozen-old", shrink_variance: bool = False) -> PrototypeStore:
    """Return a new store with entries added for the session's classes; old entries are copied unchanged."""
    if policy != "frozen-old":
        raise ConfigError(f"unknown store policy {policy!r}")
    new = store.copy()
    labels = np.asarray(labels)
    if len(labels) == 0:
        return new
    clash = sorted(set(np.unique(labels).tolist()) & set(store.classes))
    if clash:
        raise ProtocolError(f"class {clash[0]} already has a prototype")
    shrunk = store.mean_variance(0) if shrink_variance and len(store) else None
    for c, (mean, var, count) in compute_prototypes(features, labels).items():
        new.entries[c] = ProtoEntry(mean, shrunk.copy() if shrunk is not None else var, session, count)
    return new
