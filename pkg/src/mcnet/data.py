"""FSCIL session streams over synthetic or on-disk image datasets."""
from __future__ import annotations

import configparser
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from .config import ConfigError, ProtocolConfig

log = logging.getLogger(__name__)

DEFAULT_SEMANTIC_DIM = 64


class Sample(NamedTuple):
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    uid: int


@dataclass
class ImageSet:
    """A batch of same-shaped images with labels and stable sample ids."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    uids: np.ndarray  # (N,) int64

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.uids)):
            raise ConfigError("images, labels and uids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), int(self.uids[i]))

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], self.uids[idx])

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @staticmethod
    def concat(parts: list["ImageSet"]) -> "ImageSet":
        return ImageSet(np.concatenate([p.images for p in parts]),
                        np.concatenate([p.labels for p in parts]),
                        np.concatenate([p.uids for p in parts]))


@dataclass
class SemanticTable:
    vectors: dict[int, np.ndarray]
    source: str  # "file" | "deterministic-generator" | "mixed"

    @property
    def dim(self) -> int:
        return len(next(iter(self.vectors.values())))

    def matrix(self, class_ids) -> np.ndarray:
        try:
            return np.stack([self.vectors[int(c)] for c in class_ids]).astype(np.float32)
        except KeyError as exc:
            raise ConfigError(f"no semantic vector for class {exc.args[0]}") from None

    def validate(self, class_ids) -> None:
        dims = {len(v) for v in self.vectors.values()}
        if len(dims) != 1:
            raise ConfigError(f"semantic vectors have mixed dimensions {sorted(dims)}")
        for c in class_ids:
            v = self.vectors.get(int(c))
            if v is None:
                raise ConfigError(f"no semantic vector for class {c}")
            if not np.any(v):
                raise ConfigError(f"semantic vector for class {c} is the zero vector")


def semantic_vector(seed: int, class_id: int, dim: int = DEFAULT_SEMANTIC_DIM) -> np.ndarray:
    """Unit-norm pseudo-random vector keyed by (seed, class_id)."""
    rng = np.random.default_rng([seed, class_id, 1])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def class_template(seed: int, class_id: int, channels: int, size: int, grid: int = 4) -> np.ndarray:
    """Smooth random image for one class: a coarse random grid, bilinearly upsampled."""
    rng = np.random.default_rng([seed, class_id, 0])
    coarse = rng.uniform(0.0, 1.0, size=(channels, grid, grid))
    # bilinear upsampling with align_corners semantics
    pos = np.linspace(0, grid - 1, size)
    lo = np.clip(np.floor(pos).astype(int), 0, grid - 2)
    frac = pos - lo
    rows = coarse[:, lo, :] * (1 - frac)[None, :, None] + coarse[:, lo + 1, :] * frac[None, :, None]
    out = rows[:, :, lo] * (1 - frac)[None, None, :] + rows[:, :, lo + 1] * frac[None, None, :]
    return out.astype(np.float32)


def make_synthetic_dataset(spec, seed: int) -> tuple[ImageSet, SemanticTable]:
    """Template-plus-noise classification data.

    ``spec`` is any object or mapping with n_classes, image_size, channels,
    samples_per_class and noise_std (a ``DataConfig`` works).
    """
    get = spec.get if isinstance(spec, Mapping) else lambda k, d=None: getattr(spec, k, d)
    n_classes, size = int(get("n_classes")), int(get("image_size"))
    channels, per_class = int(get("channels")), int(get("samples_per_class"))
    noise_std = float(get("noise_std"))
    dim = int(get("semantic_dim", DEFAULT_SEMANTIC_DIM) or DEFAULT_SEMANTIC_DIM)
    if min(n_classes, size, channels, per_class, dim) <= 0:
        raise ConfigError("synthetic dataset sizes must be positive")
    if n_classes < 4:
        raise ConfigError(f"need at least 4 classes, got {n_classes}")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")

    images = np.empty((n_classes * per_class, channels, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    vectors = {}
    for c in range(n_classes):
        template = class_template(seed, c, channels, size)
        block = np.broadcast_to(template, (per_class,) + template.shape).copy()
        if noise_std > 0:
            rng = np.random.default_rng([seed, c, 2])
            block += rng.normal(0.0, noise_std, size=block.shape).astype(np.float32)
            np.clip(block, 0.0, 1.0, out=block)
        images[c * per_class:(c + 1) * per_class] = block
        vectors[c] = semantic_vector(seed, c, dim)
    data = ImageSet(images, labels, np.arange(len(labels), dtype=np.int64))
    return data, SemanticTable(vectors, "deterministic-generator")


def read_semantic_file(path: str | Path) -> dict[int, np.ndarray]:
    """Parse ``class_id<TAB>v1,v2,...`` lines."""
    vectors = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            cid, values = line.split("\t")
            vectors[int(cid)] = np.array([float(x) for x in values.split(",")])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: malformed semantic line") from None
    return vectors


def write_semantic_file(path: str | Path, table: SemanticTable) -> None:
    with open(path, "w") as fh:
        for cid in sorted(table.vectors):
            fh.write(f"{cid}\t" + ",".join(repr(float(x)) for x in table.vectors[cid]) + "\n")


def load_image_dataset(root: str | Path, manifest: str | Path, image_size: int = 32,
                       channels: int = 3, semantic_file: str | Path | None = None,
                       strict: bool = False, semantic_dim: int = DEFAULT_SEMANTIC_DIM,
                       seed: int = 0) -> tuple[ImageSet, SemanticTable]:
    """Load images listed in a ``relative/path<TAB>class_id`` manifest."""
    from PIL import Image

    root, manifest = Path(root), Path(manifest)
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, cid = line.rsplit("\t", 1)
            entries.append((rel, int(cid)))
        except ValueError:
            raise ConfigError(f"{manifest}:{lineno}: expected 'path<TAB>class_id'") from None
    if not entries:
        raise ConfigError(f"manifest {manifest} lists no images")

    mode = "RGB" if channels == 3 else "L"
    images = np.empty((len(entries), channels, image_size, image_size), dtype=np.float32)
    for i, (rel, _) in enumerate(entries):
        path = root / rel
        try:
            with Image.open(path) as im:
                im = im.convert(mode).resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except OSError as exc:
            raise ConfigError(f"cannot read image {path}: {exc}") from None
        images[i] = arr.reshape(image_size, image_size, channels).transpose(2, 0, 1)
    labels = np.array([c for _, c in entries], dtype=np.int64)
    classes = sorted(set(labels.tolist()))

    if semantic_file and Path(semantic_file).is_file():
        vectors = read_semantic_file(semantic_file)
        missing = [c for c in classes if c not in vectors]
        if missing and strict:
            raise ConfigError(f"class {missing[0]} is in the manifest but has no semantic vector "
                              f"in {semantic_file}")
        for c in missing:
            log.warning("class %d missing from %s; using generated vector", c, semantic_file)
            vectors[c] = semantic_vector(seed, c, len(next(iter(vectors.values()))))
        table = SemanticTable(vectors, "mixed" if missing else "file")
    else:
        if semantic_file:
            log.warning("semantic file %s not found; generating deterministic vectors", semantic_file)
        elif strict:
            raise ConfigError("strict mode requires a semantic file")
        else:
            log.warning("no semantic file given; generating deterministic vectors")
        table = SemanticTable({c: semantic_vector(seed, c, semantic_dim) for c in classes},
                              "deterministic-generator")
    table.validate(classes)
    return ImageSet(images, labels, np.arange(len(labels), dtype=np.int64)), table


@dataclass
class SessionData:
    index: int
    data: ImageSet
    class_set: frozenset
    n_way: int
    k_shot: int

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_set)


@dataclass
class SessionStream:
    sessions: list[SessionData]
    test_pool: dict[int, ImageSet]
    semantic: SemanticTable
    augment_base: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sessions)

    def seen_classes(self, t: int) -> list[int]:
        """Classes of sessions 0..t, in session order."""
        return [c for s in self.sessions[:t + 1] for c in s.classes]

    def test_set(self, t: int) -> ImageSet:
        return ImageSet.concat([self.test_pool[c] for c in self.seen_classes(t)])

    def descriptor(self) -> dict:
        """JSON-serializable summary of the split (class lists and sample ids)."""
        h = hashlib.sha1()
        for s in self.sessions:
            h.update(s.data.uids.tobytes())
        for c in sorted(self.test_pool):
            h.update(self.test_pool[c].uids.tobytes())
        return {
            "n_sessions": len(self.sessions),
            "sessions": [{"index": s.index, "classes": s.classes, "n_train": len(s.data),
                          "n_way": s.n_way, "k_shot": s.k_shot} for s in self.sessions],
            "test_per_class": {str(c): len(v) for c, v in sorted(self.test_pool.items())},
            "semantic_source": self.semantic.source,
            "split_hash": h.hexdigest(),
        }


def build_session_stream(dataset: ImageSet, semantic: SemanticTable, protocol: ProtocolConfig,
                         seed: int | None = None, augment_base: bool = False) -> SessionStream:
    """Split a dataset into one base session and ``n_sessions`` N-way K-shot sessions."""
    p = protocol
    seed = p.seed if seed is None else seed
    classes = dataset.classes
    needed = p.base_classes + p.n_way * p.n_sessions
    if needed > len(classes):
        raise ConfigError(f"protocol needs {needed} classes "
                          f"({p.base_classes} base + {p.n_sessions}x{p.n_way}), dataset has {len(classes)}")
    rng = np.random.default_rng([seed, 1234])
    order = [classes[i] for i in rng.permutation(len(classes))][:needed]
    groups = [order[:p.base_classes]]
    for s in range(p.n_sessions):
        start = p.base_classes + s * p.n_way
        groups.append(order[start:start + p.n_way])

    by_class = {c: np.flatnonzero(dataset.labels == c) for c in order}
    test_pool: dict[int, ImageSet] = {}
    sessions = []
    for t, group in enumerate(groups):
        train_idx = []
        for c in sorted(group):
            idx = by_class[c]
            need = p.test_per_class + (10 * p.k_shot if t == 0 else p.k_shot)
            if len(idx) < need:
                raise ConfigError(f"class {c} has {len(idx)} samples, session {t} needs {need} "
                                  f"({p.test_per_class} test + training)")
            perm = np.random.default_rng([seed, c, 99]).permutation(idx)
            test_pool[c] = dataset.subset(np.sort(perm[:p.test_per_class]))
            rest = perm[p.test_per_class:]
            train_idx.append(np.sort(rest if t == 0 else rest[:p.k_shot]))
        sessions.append(SessionData(t, dataset.subset(np.concatenate(train_idx)), frozenset(group),
                                    n_way=len(group), k_shot=p.k_shot))
    semantic.validate(order)
    return SessionStream(sessions, test_pool, semantic, augment_base=augment_base,
                         meta={"seed": seed, "class_order": order})


def check_stream(stream: SessionStream) -> None:
    """Raise ProtocolError if any stream invariant is violated."""
    from .config import ProtocolError

    seen: set = set()
    train_uids: set = set()
    for s in stream.sessions:
        if seen & s.class_set:
            raise ProtocolError(f"session {s.index} repeats classes {sorted(seen & s.class_set)}")
        seen |= s.class_set
        if set(np.unique(s.data.labels).tolist()) != set(s.class_set):
            raise ProtocolError(f"session {s.index} labels do not match its class set")
        if s.index > 0:
            counts = np.bincount(s.data.labels)[list(s.class_set)]
            if len(s.class_set) != s.n_way or np.any(counts != s.k_shot):
                raise ProtocolError(f"session {s.index} is not {s.n_way}-way {s.k_shot}-shot")
        else:
            counts = np.bincount(s.data.labels)[list(s.class_set)]
            if np.any(counts < 10 * s.k_shot):
                raise ProtocolError("base session has a class with fewer than 10x k_shot samples")
        train_uids |= set(s.data.uids.tolist())
    if set(stream.test_pool) != seen:
        raise ProtocolError("test pool does not cover exactly the session classes")
    test_uids = {int(u) for v in stream.test_pool.values() for u in v.uids}
    if train_uids & test_uids:
        raise ProtocolError("test samples leak into training sessions")


def read_protocol(path: str | Path) -> ProtocolConfig:
    """Read the ``[protocol]`` section of a key-value config file."""
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise ConfigError(f"protocol config not found: {path}")
    if "protocol" not in parser:
        raise ConfigError(f"{path} has no [protocol] section")
    known = ProtocolConfig.__dataclass_fields__
    values = {}
    for key, raw in parser["protocol"].items():
        if key not in known:
            raise ConfigError(f"unknown protocol key {key!r}")
        values[key] = int(raw)
    return ProtocolConfig(**values)


def iterate_batches(n: int, batch_size: int, seed, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Yield index batches in a seed-determined order."""
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and random crop with zero padding."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    flips = rng.random(n) < 0.5
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
