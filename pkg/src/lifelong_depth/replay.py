"""Per-domain replay sets and the mean pooled feature of each."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from lifelong_depth import container
from lifelong_depth.data import Dataset, DomainSpec
from lifelong_depth.depth_net import MultiHeadModel

DEFAULT_CAP = 50
FEATURE_KINDS = ("fused", "deepest")


class ReplayError(Exception):
    pass


@dataclass
class ReplayEntry:
    spec: DomainSpec
    cap: int
    seed: int
    source_indices: np.ndarray
    images: np.ndarray  # K x H x W x 3
    depths: np.ndarray
    masks: np.ndarray
    mean_feature: np.ndarray | None = None
    feature_version: int | None = None
    feature_kind: str = "fused"

    @property
    def domain_id(self) -> str:
        return self.spec.domain_id

    def __len__(self) -> int:
        return len(self.images)

    def is_stale(self, model: MultiHeadModel) -> bool:
        return self.mean_feature is None or self.feature_version != model.version_tag

    def batch(self, rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = np.asarray(rows, dtype=np.int64)
        return (np.ascontiguousarray(self.images[rows].transpose(0, 3, 1, 2)),
                self.depths[rows][:, None].copy(), self.masks[rows][:, None].astype(np.float64))


def build_replay(dataset: Dataset, cap: int = DEFAULT_CAP, seed: int = 0) -> ReplayEntry:
    """Uniform random subset without replacement of ``min(cap, len(dataset))`` samples.

    The draw is made over samples ordered by source index, so the subset does
    not depend on the row order of ``dataset``.
    """
    if len(dataset) == 0:
        raise ReplayError("cannot build a replay set from an empty dataset")
    if cap < 1:
        raise ReplayError(f"cap must be >= 1, got {cap}")
    order = np.argsort(dataset.indices, kind="stable")
    k = min(cap, len(dataset))
    picked = order[np.random.default_rng(seed).permutation(len(dataset))[:k]]
    rows = picked[np.argsort(dataset.indices[picked], kind="stable")]
    return ReplayEntry(
        spec=dataset.spec,
        cap=cap,
        seed=seed,
        source_indices=dataset.indices[rows].copy(),
        images=dataset.images[rows].copy(),
        depths=dataset.depths[rows].copy(),
        masks=dataset.masks[rows].copy(),
    )


def pooled_features(model: MultiHeadModel, images_nhwc: np.ndarray, kind: str = "fused",
                    chunk: int = 64) -> np.ndarray:
    """Global-average-pooled encoder features, one row per image."""
    if kind not in FEATURE_KINDS:
        raise ReplayError(f"feature kind must be one of {FEATURE_KINDS}, got {kind!r}")
    out = []
    for start in range(0, len(images_nhwc), chunk):
        x = images_nhwc[start : start + chunk].transpose(0, 3, 1, 2)
        out.append(model.pool(model.encode(x)[kind]).data)
    return np.concatenate(out, axis=0)


def compute_mean_feature(entry: ReplayEntry, model: MultiHeadModel, kind: str = "fused") -> np.ndarray:
    """Mean pooled feature over the retained samples; records the model version it came from."""
    if len(entry) == 0:
        raise ReplayError(f"replay entry {entry.domain_id!r} is empty")
    feats = pooled_features(model, entry.images, kind)
    entry.mean_feature = feats.mean(axis=0)
    entry.feature_version = model.version_tag
    entry.feature_kind = kind
    return entry.mean_feature


def sample_batch(entry: ReplayEntry, n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` samples drawn uniformly with replacement; ``seed`` may be an int or a Generator."""
    if n < 1:
        raise ReplayError(f"batch size must be >= 1, got {n}")
    if len(entry) == 0:
        raise ReplayError(f"replay entry {entry.domain_id!r} is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return entry.batch(sample_rows(len(entry), n, rng))


def sample_rows(size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, size, size=n)


class ReplayStore:
    """Ordered mapping domain id -> :class:`ReplayEntry`."""

    def __init__(self, entries: list[ReplayEntry] | None = None):
        self.entries: dict[str, ReplayEntry] = {}
        for e in entries or []:
            self.add(e)

    def add(self, entry: ReplayEntry) -> None:
        self.entries[entry.domain_id] = entry

    def __getitem__(self, domain_id: str) -> ReplayEntry:
        try:
            return self.entries[domain_id]
        except KeyError:
            raise ReplayError(f"no replay entry for domain {domain_id!r}") from None

    def __contains__(self, domain_id: str) -> bool:
        return domain_id in self.entries

    def __iter__(self) -> Iterator[ReplayEntry]:
        return iter(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def refresh_features(self, model: MultiHeadModel, kind: str = "fused") -> None:
        for e in self:
            compute_mean_feature(e, model, kind)

    def stale_domains(self, model: MultiHeadModel) -> list[str]:
        return [e.domain_id for e in self if e.is_stale(model)]

    def copy(self) -> ReplayStore:
        out = ReplayStore()
        for e in self:
            out.add(ReplayEntry(e.spec, e.cap, e.seed, e.source_indices.copy(), e.images.copy(), e.depths.copy(),
                                e.masks.copy(), None if e.mean_feature is None else e.mean_feature.copy(),
                                e.feature_version, e.feature_kind))
        return out

    def save(self, path: str | Path) -> None:
        meta = {"entries": []}
        arrays = {}
        for e in self:
            meta["entries"].append({
                "domain_id": e.domain_id,
                "spec": e.spec.to_dict(),
                "cap": e.cap,
                "seed": e.seed,
                "feature_version": e.feature_version,
                "feature_kind": e.feature_kind,
                "has_mean_feature": e.mean_feature is not None,
            })
            p = e.domain_id + "/"
            arrays[p + "source_indices"] = e.source_indices
            arrays[p + "images"] = e.images
            arrays[p + "depths"] = e.depths
            arrays[p + "masks"] = e.masks
            if e.mean_feature is not None:
                arrays[p + "mean_feature"] = e.mean_feature
        container.write(path, "replay", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> ReplayStore:
        meta, arrays = container.read(path, "replay")
        store = cls()
        for m in meta["entries"]:
            p = m["domain_id"] + "/"
            try:
                store.add(ReplayEntry(
                    spec=DomainSpec.from_dict(m["spec"]),
                    cap=m["cap"],
                    seed=m["seed"],
                    source_indices=arrays[p + "source_indices"],
                    images=arrays[p + "images"],
                    depths=arrays[p + "depths"],
                    masks=arrays[p + "masks"].astype(bool),
                    mean_feature=arrays[p + "mean_feature"] if m["has_mean_feature"] else None,
                    feature_version=m["feature_version"],
                    feature_kind=m["feature_kind"],
                ))
            except KeyError as exc:
                raise container.FormatError(0, f"replay file is missing {exc.args[0]}") from None
        return store


def save(store: ReplayStore, path: str | Path) -> None:
    store.save(path)


def load(path: str | Path) -> ReplayStore:
    return ReplayStore.load(path)
