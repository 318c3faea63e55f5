"""Synthetic base datasets and episode sampling.

A base dataset is a set of classes, each holding feature vectors; episodes
are n-way k-shot tasks subsampled from it, with classes drawn uniformly
without replacement and, within each class, k+q samples drawn uniformly
without replacement (first k to the support set, rest to the query set).

On disk a dataset is a directory with ``manifest.json`` and ``data.csv``
(header ``class_id,f0,...,f{d-1}``, one sample per row, floats written as
shortest round-trip decimals so the round trip is bit-exact).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams


class DatasetError(Exception):
    """Invalid dataset construction or sampling request."""


class DatasetParseError(DatasetError):
    """Malformed on-disk dataset; carries the file location."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line = line
        self.field = field


SPLITS = ("train", "val", "test", "all")


@dataclass(frozen=True, eq=False)
class ClassRecord:
    class_id: int
    features: np.ndarray  # (count, feature_dim), read-only


@dataclass(frozen=True, eq=False)
class BaseDataset:
    feature_dim: int
    split: str
    classes: tuple[ClassRecord, ...]
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        seen = set()
        for rec in self.classes:
            if rec.class_id in seen:
                raise DatasetError(f"duplicate class id {rec.class_id}")
            seen.add(rec.class_id)
            if rec.features.ndim != 2 or rec.features.shape[1] != self.feature_dim:
                raise DatasetError(
                    f"class {rec.class_id}: feature shape {rec.features.shape} "
                    f"does not match feature_dim {self.feature_dim}"
                )
            rec.features.setflags(write=False)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(rec.class_id for rec in self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def features_for(self, class_id: int) -> np.ndarray:
        for rec in self.classes:
            if rec.class_id == class_id:
                return rec.features
        raise DatasetError(f"class id {class_id} not in dataset")


@dataclass(frozen=True, eq=False)
class Episode:
    """One n-way k-shot task with disjoint support and query samples."""

    n: int
    k: int
    q: int
    classes: tuple[int, ...]  # sorted class ids
    support_indices: tuple[tuple[int, int], ...]  # (class_id, sample_index)
    query_indices: tuple[tuple[int, int], ...]
    support_x: np.ndarray  # (n*k, d)
    support_y: np.ndarray  # (n*k,), global class ids
    query_x: np.ndarray  # (n*q, d)
    query_y: np.ndarray  # (n*q,)

    def local_labels(self, y: np.ndarray) -> np.ndarray:
        """Map global class ids to positions in the sorted class tuple."""
        lookup = {cid: i for i, cid in enumerate(self.classes)}
        return np.array([lookup[int(v)] for v in y], dtype=np.int64)


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    class_separation: float,
    noise_scale: float,
    seed: int,
    split: str = "all",
) -> BaseDataset:
    """Each class mean is uniform on the sphere of radius
    ``class_separation``; samples add isotropic Gaussian noise."""
    if num_classes <= 0 or samples_per_class <= 0:
        raise DatasetError("num_classes and samples_per_class must be positive")
    if feature_dim < 2:
        raise DatasetError("feature_dim must be at least 2 (sphere sampling is degenerate)")
    if class_separation < 0:
        raise DatasetError("class_separation must be non-negative")
    rng = streams.stream(seed, streams.DATASET)
    records = []
    for cid in range(num_classes):
        direction = rng.standard_normal(feature_dim)
        norm = np.linalg.norm(direction)
        while norm == 0.0:
            direction = rng.standard_normal(feature_dim)
            norm = np.linalg.norm(direction)
        mean = class_separation * direction / norm
        samples = mean + noise_scale * rng.standard_normal((samples_per_class, feature_dim))
        records.append(ClassRecord(cid, samples))
    generator = {
        "num_classes": num_classes,
        "samples_per_class": samples_per_class,
        "feature_dim": feature_dim,
        "class_separation": class_separation,
        "noise_scale": noise_scale,
        "seed": seed,
    }
    return BaseDataset(feature_dim, split, tuple(records), generator)


def _allocate(ratios, total: int) -> list[int]:
    weights = [float(r) for r in ratios]
    if any(w <= 0 for w in weights):
        raise DatasetError("split ratios must be positive")
    scale = total / sum(weights)
    raw = [w * scale for w in weights]
    counts = [int(np.floor(r)) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_classes(dataset: BaseDataset, ratios) -> tuple[BaseDataset, BaseDataset, BaseDataset]:
    """Partition classes into disjoint train/val/test datasets.

    ``ratios`` is either three positive weights (resolved to counts by
    largest remainder) or three explicit class-id lists.
    """
    if len(ratios) != 3:
        raise DatasetError("ratios must have exactly three entries")
    names = ("train", "val", "test")
    by_id = {rec.class_id: rec for rec in dataset.classes}
    if all(isinstance(r, (list, tuple)) for r in ratios):
        requested = [list(r) for r in ratios]
        flat = [cid for ids in requested for cid in ids]
        if len(set(flat)) != len(flat):
            raise DatasetError("requested class id lists overlap")
        for cid in flat:
            if cid not in by_id:
                raise DatasetError(f"requested class id {cid} not in dataset")
        groups = requested
    else:
        counts = _allocate(ratios, dataset.num_classes)
        ordered = sorted(by_id)
        groups = []
        start = 0
        for c in counts:
            groups.append(ordered[start : start + c])
            start += c
    out = []
    for name, ids in zip(names, groups):
        if not ids:
            raise DatasetError(f"{name} split is empty")
        recs = tuple(by_id[cid] for cid in sorted(ids))
        out.append(BaseDataset(dataset.feature_dim, name, recs, dict(dataset.generator)))
    return tuple(out)


def sample_episode(
    dataset: BaseDataset, n: int, k: int, q: int, rng: np.random.Generator
) -> Episode:
    if n <= 0 or k <= 0 or q <= 0:
        raise DatasetError("n, k and q must be positive")
    if dataset.num_classes < n:
        raise DatasetError(
            f"need {n} classes but dataset has only {dataset.num_classes}"
        )
    ids = dataset.class_ids
    chosen = sorted(int(ids[i]) for i in rng.choice(len(ids), size=n, replace=False))
    support_idx, query_idx = [], []
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for cid in chosen:
        feats = dataset.features_for(cid)
        count = feats.shape[0]
        if count < k + q:
            raise DatasetError(
                f"class {cid} has {count} samples but the episode needs {k + q}"
            )
        picks = rng.choice(count, size=k + q, replace=False)
        for idx in picks[:k]:
            support_idx.append((cid, int(idx)))
            sup_x.append(feats[idx])
            sup_y.append(cid)
        for idx in picks[k:]:
            query_idx.append((cid, int(idx)))
            qry_x.append(feats[idx])
            qry_y.append(cid)
    return Episode(
        n=n,
        k=k,
        q=q,
        classes=tuple(chosen),
        support_indices=tuple(support_idx),
        query_indices=tuple(query_idx),
        support_x=np.array(sup_x, dtype=np.float64),
        support_y=np.array(sup_y, dtype=np.int64),
        query_x=np.array(qry_x, dtype=np.float64),
        query_y=np.array(qry_y, dtype=np.int64),
    )


def save_dataset(dataset: BaseDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "feature_dim": dataset.feature_dim,
        "split": dataset.split,
        "class_ids": list(dataset.class_ids),
        "per_class_counts": [int(rec.features.shape[0]) for rec in dataset.classes],
        "generator": dataset.generator,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = "class_id," + ",".join(f"f{i}" for i in range(dataset.feature_dim))
    lines = [header]
    for rec in dataset.classes:
        for row in rec.features:
            lines.append(f"{rec.class_id}," + ",".join(repr(float(v)) for v in row))
    (path / "data.csv").write_text("\n".join(lines) + "\n")


def load_dataset(path) -> BaseDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetParseError(f"missing manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"manifest.json is not valid JSON: {exc}") from exc
    for key in ("feature_dim", "split", "class_ids", "per_class_counts"):
        if key not in manifest:
            raise DatasetParseError("manifest.json missing key", field=key)
    feature_dim = int(manifest["feature_dim"])
    class_ids = [int(c) for c in manifest["class_ids"]]
    counts = [int(c) for c in manifest["per_class_counts"]]
    if len(class_ids) != len(counts):
        raise DatasetParseError(
            "manifest class_ids and per_class_counts lengths differ", field="per_class_counts"
        )
    rows: dict[int, list[np.ndarray]] = {cid: [] for cid in class_ids}
    csv_path = path / "data.csv"
    if not csv_path.exists():
        raise DatasetParseError(f"missing data.csv under {path}")
    with open(csv_path) as fh:
        header = fh.readline().rstrip("\n")
        expected = "class_id," + ",".join(f"f{i}" for i in range(feature_dim))
        if header != expected:
            raise DatasetParseError("unexpected CSV header", line=1, field="header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != feature_dim + 1:
                raise DatasetParseError(
                    f"expected {feature_dim + 1} columns, got {len(parts)}", line=lineno
                )
            try:
                cid = int(parts[0])
            except ValueError:
                raise DatasetParseError("class_id is not an integer", line=lineno, field="class_id")
            if cid not in rows:
                raise DatasetParseError(f"class id {cid} not in manifest", line=lineno, field="class_id")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise DatasetParseError("non-numeric feature value", line=lineno)
            rows[cid].append(vec)
    records = []
    for cid, count in zip(class_ids, counts):
        got = len(rows[cid])
        if got != count:
            raise DatasetParseError(
                f"class {cid}: manifest promises {count} samples, CSV has {got}",
                field="per_class_counts",
            )
        records.append(ClassRecord(cid, np.vstack(rows[cid])))
    return BaseDataset(
        feature_dim,
        manifest["split"],
        tuple(records),
        dict(manifest.get("generator", {})),
    )


def save_episode_file(episodes, path) -> None:
    """Persist episodes as (class id, sample index) lists for exact reuse."""
    episodes = list(episodes)
    if not episodes:
        raise DatasetError("no episodes to save")
    first = episodes[0]
    payload = {
        "n": first.n,
        "k": first.k,
        "q": first.q,
        "episodes": [
            {
                "classes": list(ep.classes),
                "support": [list(pair) for pair in ep.support_indices],
                "query": [list(pair) for pair in ep.query_indices],
            }
            for ep in episodes
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_episode_file(path, dataset: BaseDataset) -> list[Episode]:
    with open(path) as fh:
        payload = json.load(fh)
    n, k, q = payload["n"], payload["k"], payload["q"]
    episodes = []
    for entry in payload["episodes"]:
        classes = tuple(int(c) for c in entry["classes"])
        support_idx = tuple((int(c), int(i)) for c, i in entry["support"])
        query_idx = tuple((int(c), int(i)) for c, i in entry["query"])
        sup_x = np.array([dataset.features_for(c)[i] for c, i in support_idx])
        qry_x = np.array([dataset.features_for(c)[i] for c, i in query_idx])
        episodes.append(
            Episode(
                n=n,
                k=k,
                q=q,
                classes=classes,
                support_indices=support_idx,
                query_indices=query_idx,
                support_x=sup_x,
                support_y=np.array([c for c, _ in support_idx], dtype=np.int64),
                query_x=qry_x,
                query_y=np.array([c for c, _ in query_idx], dtype=np.int64),
            )
        )
    return episodes
