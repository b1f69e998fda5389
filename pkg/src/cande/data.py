"""Datasets and contextual-novelty construction.

A :class:`ContextScheme` partitions class labels into disjoint contexts and
names one novel class per context. :func:`build_contextual_dataset` turns a
labelled pool into per-context splits where train/validation hold only the
context's own classes and test adds the designated novel class.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, SchemeError

NORMAL, NOVEL, UNLABELED = 0, 1, -1
LABEL_TOKENS = {"normal": NORMAL, "novel": NOVEL, "unlabeled": UNLABELED}
LABEL_NAMES = {v: k for k, v in LABEL_TOKENS.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    class_label: int
    context_id: int
    novelty: int
    group_id: str | None = None
    example_id: str | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, read-only collection of examples.

    ``classes`` and ``contexts`` use -1 for "unknown"; ``novelty`` holds
    NORMAL, NOVEL or UNLABELED. ``groups`` and ``ids`` are optional string arrays.
    """

    features: np.ndarray
    classes: np.ndarray
    contexts: np.ndarray
    novelty: np.ndarray
    groups: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.features)
        if self.features.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {self.features.shape}")
        for name in ("classes", "contexts", "novelty", "groups", "ids"):
            col = getattr(self, name)
            if col is not None and col.shape != (n,):
                raise DataFormatError(f"column {name} has shape {col.shape}, expected ({n},)")
        object.__setattr__(self, "features", _readonly(self.features.astype(np.float32, copy=False)))
        object.__setattr__(self, "classes", _readonly(self.classes.astype(np.int64, copy=False)))
        object.__setattr__(self, "contexts", _readonly(self.contexts.astype(np.int64, copy=False)))
        object.__setattr__(self, "novelty", _readonly(self.novelty.astype(np.int8, copy=False)))
        for name in ("groups", "ids"):
            col = getattr(self, name)
            if col is not None:
                object.__setattr__(self, name, _readonly(col.astype(str)))

    @classmethod
    def from_features(cls, features, classes=None, contexts=None, novelty=None, groups=None, ids=None):
        features = np.asarray(features, dtype=np.float32)
        n = len(features)
        fill = lambda v, default: np.full(n, default) if v is None else np.asarray(v)  # noqa: E731
        return cls(features, fill(classes, -1), fill(contexts, -1), fill(novelty, UNLABELED),
                   None if groups is None else np.asarray(groups), None if ids is None else np.asarray(ids))

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(
            self.features[i], int(self.classes[i]), int(self.contexts[i]), int(self.novelty[i]),
            None if self.groups is None else str(self.groups[i]),
            None if self.ids is None else str(self.ids[i]),
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        pick = lambda col: None if col is None else col[index]  # noqa: E731
        return Dataset(self.features[index], self.classes[index], self.contexts[index],
                       self.novelty[index], pick(self.groups), pick(self.ids))

    def replace(self, **columns) -> "Dataset":
        cols = {name: getattr(self, name) for name in ("features", "classes", "contexts", "novelty", "groups", "ids")}
        cols.update(columns)
        return Dataset(**cols)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        def cat(name):
            cols = [getattr(p, name) for p in parts]
            if any(c is None for c in cols):
                return None
            return np.concatenate(cols)
        return Dataset(cat("features"), cat("classes"), cat("contexts"), cat("novelty"), cat("groups"), cat("ids"))

    def save(self, path: str | Path):
        cols = {"features": self.features, "classes": self.classes, "contexts": self.contexts,
                "novelty": self.novelty}
        if self.groups is not None:
            cols["groups"] = self.groups
        if self.ids is not None:
            cols["ids"] = self.ids
        with open(path, "wb") as fh:
            np.savez(fh, **cols)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["features"], z["classes"], z["contexts"], z["novelty"],
                       z["groups"] if "groups" in z else None, z["ids"] if "ids" in z else None)


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    need = int(np.prod(dims, dtype=np.int64))
    if len(payload) != need:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (m,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise DataFormatError(f"{n} images but {m} labels")
    if n == 0:
        raise DataFormatError(f"{images_path}: contains no images")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols)
    return Dataset.from_features(images.astype(np.float32) / 255.0,
                                 classes=np.frombuffer(labels, dtype=np.uint8))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- feature CSV -------------------------------------------------------------

CSV_FIXED = ("id", "group", "context", "label")


def load_feature_csv(path: str | Path) -> Dataset:
    """Parse ``id,group,context,label,f0,...,f{d-1}`` rows into a :class:`Dataset`."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        if tuple(header[:4]) != CSV_FIXED:
            raise DataFormatError(f"{path}: header must start with {','.join(CSV_FIXED)}")
        feats = header[4:]
        if not feats or feats != [f"f{i}" for i in range(len(feats))]:
            raise DataFormatError(f"{path}: feature columns must be f0..f{{d-1}} in order")
        width = len(header)
        ids, groups, contexts, labels, rows = [], [], [], [], []
        for record in reader:
            line = reader.line_num
            if not record:
                continue
            if len(record) != width:
                raise DataFormatError(f"{path}:{line}: ragged row with {len(record)} fields, expected {width}")
            token = record[3].strip().lower()
            if token not in LABEL_TOKENS:
                raise DataFormatError(f"{path}:{line}: unknown label {record[3]!r}; "
                                      f"expected one of {sorted(LABEL_TOKENS)}")
            try:
                ctx = int(record[2])
                values = [float(v) for v in record[4:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line}: non-numeric value ({exc})") from exc
            ids.append(record[0])
            groups.append(record[1])
            contexts.append(ctx)
            labels.append(LABEL_TOKENS[token])
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset.from_features(np.array(rows), contexts=contexts, novelty=labels, groups=groups, ids=ids)


def write_feature_csv(ds: Dataset, path: str | Path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*CSV_FIXED, *(f"f{i}" for i in range(ds.dim))])
        for i in range(len(ds)):
            w.writerow([
                ds.ids[i] if ds.ids is not None else str(i),
                ds.groups[i] if ds.groups is not None else "",
                int(ds.contexts[i]),
                LABEL_NAMES[int(ds.novelty[i])],
                *(repr(float(v)) for v in ds.features[i]),
            ])


# -- context schemes ---------------------------------------------------------


@dataclass(frozen=True)
class ContextScheme:
    """Disjoint class sets, one per context, each with a designated novel class."""

    contexts: tuple[tuple[int, ...], ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        contexts = tuple(tuple(sorted(int(c) for c in ctx)) for ctx in self.contexts)
        novel = tuple(int(c) for c in self.novel)
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "novel", novel)
        if not contexts:
            raise SchemeError("a scheme needs at least one context")
        if len(novel) != len(contexts):
            raise SchemeError(f"{len(contexts)} contexts but {len(novel)} novel classes")
        seen: dict[int, int] = {}
        for i, ctx in enumerate(contexts):
            if not ctx:
                raise SchemeError(f"context {i} is empty")
            for c in ctx:
                if c in seen:
                    raise SchemeError(f"class {c} appears in contexts {seen[c]} and {i}; contexts must be disjoint")
                seen[c] = i
        for i, (ctx, nov) in enumerate(zip(contexts, novel)):
            if nov in ctx:
                raise SchemeError(f"novel class {nov} of context {i} is one of its normal classes")

    @classmethod
    def mnist_default(cls) -> "ContextScheme":
        return cls(((0, 1, 2), (3, 4, 5), (6, 7, 8)), (3, 6, 0))

    @property
    def num_contexts(self) -> int:
        return len(self.contexts)

    def context_of(self, class_label: int) -> int:
        """Context id whose normal set holds ``class_label``, or -1."""
        for i, ctx in enumerate(self.contexts):
            if class_label in ctx:
                return i
        return -1

    def to_dict(self) -> dict:
        return {"contexts": [list(c) for c in self.contexts], "novel": list(self.novel)}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextScheme":
        try:
            return cls(tuple(tuple(c) for c in d["contexts"]), tuple(d["novel"]))
        except (KeyError, TypeError) as exc:
            raise SchemeError(f"malformed scheme: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in (self.train_fraction, self.val_fraction):
            if not 0 < f < 1:
                raise ValueError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction > 1 + 1e-12:
            raise ValueError("train and validation fractions sum to more than 1")


@dataclass
class ContextualSplits:
    scheme: ContextScheme | None
    splits: dict[int, dict[str, Dataset]] = field(default_factory=dict)

    SPLITS = ("train", "val", "test")

    @property
    def context_ids(self) -> list[int]:
        return sorted(self.splits)

    def get(self, context: int, split: str) -> Dataset:
        return self.splits[context][split]

    def pooled(self, split: str) -> Dataset:
        return Dataset.concat([self.splits[c][split] for c in self.context_ids])

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"contexts": self.context_ids,
                 "scheme": None if self.scheme is None else self.scheme.to_dict()}
        (directory / "scheme.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
        for c in self.context_ids:
            sub = directory / f"context_{c}"
            sub.mkdir(exist_ok=True)
            for split in self.SPLITS:
                self.splits[c][split].save(sub / f"{split}.npz")

    @classmethod
    def load(cls, directory: str | Path) -> "ContextualSplits":
        directory = Path(directory)
        try:
            index = json.loads((directory / "scheme.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataFormatError(f"no prepared data in {directory} (missing scheme.json)") from exc
        scheme = None if index["scheme"] is None else ContextScheme.from_dict(index["scheme"])
        splits = {c: {s: Dataset.load(directory / f"context_{c}" / f"{s}.npz") for s in cls.SPLITS}
                  for c in index["contexts"]}
        return cls(scheme, splits)


def _stage_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def holdout(pool: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class as a held-out set (stratified, deterministic)."""
    keep, held = [], []
    for cls_ in np.unique(pool.classes):
        idx = np.flatnonzero(pool.classes == cls_)
        idx = idx[_stage_rng(seed, 0xB01D, int(cls_) + 1).permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        held.append(idx[:k])
        keep.append(idx[k:])
    return pool.subset(np.sort(np.concatenate(keep))), pool.subset(np.sort(np.concatenate(held)))


def build_contextual_dataset(pool: Dataset, scheme: ContextScheme, split: SplitSpec = SplitSpec(),
                             test_pool: Dataset | None = None, max_train_per_context: int | None = None,
                             max_test_per_context: int | None = None) -> ContextualSplits:
    """Per-context train/val/test splits under ``scheme``.

    Train and validation draw only the context's normal classes from ``pool``
    (``max_train_per_context`` caps the pool per context before splitting).
    Test draws from ``test_pool`` the context's normal classes, labelled
    NORMAL, plus its novel class, labelled NOVEL, all tagged with the context's
    id. Without ``test_pool`` a stratified ``1 - train - val`` share of ``pool``
    is held out for testing. Classes outside every context are dropped.
    """
    if test_pool is None:
        rest = 1.0 - split.train_fraction - split.val_fraction
        if rest <= 1e-9:
            raise ValueError("no test pool given and the split leaves nothing to hold out")
        pool, test_pool = holdout(pool, rest, split.seed)
        total = split.train_fraction + split.val_fraction
        train_share = split.train_fraction / total
    else:
        train_share = split.train_fraction / (split.train_fraction + split.val_fraction)

    present = set(np.unique(pool.classes).tolist())
    out = ContextualSplits(scheme)
    for i, ctx in enumerate(scheme.contexts):
        missing = [c for c in ctx if c not in present]
        if missing:
            raise SchemeError(f"context {i} classes {missing} do not occur in the data")
        rng = _stage_rng(split.seed, i + 1)
        idx = np.flatnonzero(np.isin(pool.classes, ctx))
        idx = idx[rng.permutation(len(idx))]
        if max_train_per_context is not None:
            idx = idx[:max_train_per_context]
        n_train = int(round(train_share * len(idx)))
        if n_train == 0 or n_train == len(idx):
            raise ValueError(f"context {i}: {len(idx)} examples cannot be split into train and validation")
        normal = lambda ds, sel: ds.subset(np.sort(sel)).replace(  # noqa: E731
            contexts=np.full(len(sel), i), novelty=np.full(len(sel), NORMAL))
        train = normal(pool, idx[:n_train])
        val = normal(pool, idx[n_train:])

        t_norm = np.flatnonzero(np.isin(test_pool.classes, ctx))
        t_nov = np.flatnonzero(test_pool.classes == scheme.novel[i])
        if len(t_nov) == 0:
            raise SchemeError(f"novel class {scheme.novel[i]} of context {i} has no test examples")
        t_idx = np.concatenate([t_norm, t_nov])
        if max_test_per_context is not None and len(t_idx) > max_test_per_context:
            t_idx = rng.choice(t_idx, size=max_test_per_context, replace=False)
        t_idx = np.sort(t_idx)
        labels = np.where(test_pool.classes[t_idx] == scheme.novel[i], NOVEL, NORMAL)
        test = test_pool.subset(t_idx).replace(contexts=np.full(len(t_idx), i), novelty=labels)
        out.splits[i] = {"train": train, "val": val, "test": test}
    return out


def splits_from_labelled(train_pool: Dataset, test_pool: Dataset, split: SplitSpec = SplitSpec()) -> ContextualSplits:
    """Splits for data that already carries context ids and novelty labels (e.g. a feature CSV).

    Training rows must be NORMAL or UNLABELED; they are split per context into
    train/validation. Test rows must be labelled NORMAL or NOVEL.
    """
    if np.any(train_pool.novelty == NOVEL):
        raise DataFormatError("training data contains rows labelled novel")
    if np.any(test_pool.novelty == UNLABELED):
        raise DataFormatError("test data rows must be labelled normal or novel")
    train_share = split.train_fraction / (split.train_fraction + split.val_fraction)
    out = ContextualSplits(None)
    for c in np.unique(train_pool.contexts).tolist():
        idx = np.flatnonzero(train_pool.contexts == c)
        idx = idx[_stage_rng(split.seed, c + 1).permutation(len(idx))]
        n_train = int(round(train_share * len(idx)))
        if n_train == 0 or n_train == len(idx):
            raise ValueError(f"context {c}: {len(idx)} rows cannot be split into train and validation")
        t_idx = np.flatnonzero(test_pool.contexts == c)
        if len(t_idx) == 0:
            raise DataFormatError(f"context {c} has no test rows")
        mark = lambda ds: ds.replace(novelty=np.full(len(ds), NORMAL))  # noqa: E731
        out.splits[c] = {
            "train": mark(train_pool.subset(np.sort(idx[:n_train]))),
            "val": mark(train_pool.subset(np.sort(idx[n_train:]))),
            "test": test_pool.subset(t_idx),
        }
    extra = set(np.unique(test_pool.contexts).tolist()) - set(out.splits)
    if extra:
        raise DataFormatError(f"test contexts {sorted(extra)} have no training data")
    return out


# -- synthetic contextual overlap -------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_contexts: int = 2
    dim: int = 16
    latent_dim: int = 2
    n_per_context: int = 600
    n_test_per_context: int = 200
    separation: float = 6.0
    sigma: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_contexts < 2:
            raise ValueError("synthetic data needs at least two contexts")
        if self.dim < 1 or self.latent_dim < 1:
            raise ValueError("dim and latent_dim must be positive")
        if self.num_contexts > self.dim:
            raise ValueError("need dim >= num_contexts to place equidistant cluster means")


@dataclass
class SynthData:
    pool: Dataset
    test_pool: Dataset
    scheme: ContextScheme
    means: np.ndarray


def synth_contextual(cfg: SynthConfig = SynthConfig()) -> SynthData:
    """Gaussian clusters where context i's novel cluster is context i+1's normal cluster.

    Cluster ``k`` lives on its own random ``latent_dim``-dimensional subspace
    around mean ``m_k`` with per-axis spread ``sigma`` along that subspace and
    isotropic ``noise`` off it. Means are mutually ``separation * sigma`` apart.
    Class ``k`` is cluster ``k``; context ``i`` treats class ``i`` as normal and
    class ``(i + 1) mod K`` as novel, so with two contexts the roles swap.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_contexts
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))
    means = basis[:, :k].T * (cfg.separation * cfg.sigma / np.sqrt(2.0))
    loadings = [np.linalg.qr(rng.normal(size=(cfg.dim, cfg.latent_dim)))[0].T for _ in range(k)]

    def draw(n: int):
        feats, classes = [], []
        for c in range(k):
            z = rng.normal(scale=cfg.sigma, size=(n, cfg.latent_dim))
            x = means[c] + z @ loadings[c] + rng.normal(scale=cfg.noise, size=(n, cfg.dim))
            feats.append(x)
            classes.append(np.full(n, c))
        return Dataset.from_features(np.concatenate(feats), classes=np.concatenate(classes))

    pool = draw(cfg.n_per_context)
    test_pool = draw(cfg.n_test_per_context)
    scheme = ContextScheme(tuple((c,) for c in range(k)), tuple((c + 1) % k for c in range(k)))
    return SynthData(pool, test_pool, scheme, means)
