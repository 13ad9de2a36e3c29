"""Online predictor selection by nearest domain mean feature."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from lifelong_depth.data import Dataset
from lifelong_depth.depth_net import MultiHeadModel
from lifelong_depth.metrics import MetricsRecord, compute_metrics
from lifelong_depth.replay import FEATURE_KINDS, ReplayStore


class RoutingError(Exception):
    pass


class StaleIndexError(RoutingError):
    pass


@dataclass
class DomainIndex:
    domain_ids: list[str]
    means: np.ndarray  # t x C
    version_tags: list[int]
    feature_kind: str = "fused"
    scale: np.ndarray | None = None  # optional per-dimension standardization

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if len(self.domain_ids) != len(self.means) or len(self.version_tags) != len(self.domain_ids):
            raise RoutingError("domain ids, means and version tags must have equal length")
        if self.feature_kind not in FEATURE_KINDS:
            raise RoutingError(f"feature kind must be one of {FEATURE_KINDS}")

    def __len__(self) -> int:
        return len(self.domain_ids)

    @classmethod
    def from_store(cls, store: ReplayStore, standardize: bool = False, model: MultiHeadModel | None = None
                   ) -> DomainIndex:
        entries = list(store)
        if any(e.mean_feature is None for e in entries):
            raise StaleIndexError("replay store has entries without a mean feature")
        kinds = {e.feature_kind for e in entries}
        if len(kinds) != 1:
            raise RoutingError(f"mixed feature kinds in store: {sorted(kinds)}")
        scale = None
        if standardize:
            if model is None:
                raise RoutingError("standardization needs the model to pool replay features")
            from lifelong_depth.replay import pooled_features

            kind = kinds.pop()
            feats = np.concatenate([pooled_features(model, e.images, kind) for e in entries])
            scale = feats.std(axis=0)
            scale[scale == 0] = 1.0
            kinds = {kind}
        return cls([e.domain_id for e in entries], np.stack([e.mean_feature for e in entries]),
                   [e.feature_version for e in entries], kinds.pop(), scale)

    def check(self, model: MultiHeadModel) -> None:
        if len(self) == 0:
            raise RoutingError("domain index is empty")
        stale = [d for d, v in zip(self.domain_ids, self.version_tags) if v != model.version_tag]
        if stale:
            raise StaleIndexError(
                f"mean features of {stale} were computed with model version "
                f"{[v for d, v in zip(self.domain_ids, self.version_tags) if d in stale]} but the model is at "
                f"version {model.version_tag}; recompute them"
            )
        missing = [d for d in self.domain_ids if d not in model.heads]
        if missing:
            raise RoutingError(f"index routes to domains without a head: {missing}")

    def distances(self, features: np.ndarray) -> np.ndarray:
        """Euclidean distance of each feature row to each mean, N x t."""
        f = np.atleast_2d(features)
        diff = f[:, None, :] - self.means[None, :, :]
        if self.scale is not None:
            diff = diff / self.scale
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def to_meta(self) -> dict:
        return {"domain_ids": list(self.domain_ids), "version_tags": list(self.version_tags),
                "feature_kind": self.feature_kind, "standardized": self.scale is not None}

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"index_means": self.means}
        if self.scale is not None:
            arrays["index_scale"] = self.scale
        return arrays

    @classmethod
    def from_meta(cls, meta: dict, arrays: Mapping[str, np.ndarray]) -> DomainIndex:
        return cls(list(meta["domain_ids"]), arrays["index_means"], list(meta["version_tags"]),
                   meta["feature_kind"], arrays.get("index_scale"))


@dataclass
class OpCounter:
    """Instrumentation for routing cost."""

    encoder_passes: int = 0
    head_passes: int = 0
    distance_evals: int = 0
    distance_flops: int = 0


def _encode(model: MultiHeadModel, images_nhwc: np.ndarray, kind: str, counter: OpCounter | None):
    enc = model.encode(images_nhwc.transpose(0, 3, 1, 2))
    if counter is not None:
        counter.encoder_passes += len(images_nhwc)
    feats = model.pool(enc[kind]).data
    return enc["fused"], feats


def _route(index: DomainIndex, feats: np.ndarray, counter: OpCounter | None) -> tuple[np.ndarray, np.ndarray]:
    d = index.distances(feats)
    if counter is not None:
        counter.distance_evals += d.size
        counter.distance_flops += d.size * 3 * index.means.shape[1]
    # argmin returns the first minimum: ties go to the earliest registered domain
    return np.argmin(d, axis=1), d


def identify_domain(image: np.ndarray, model: MultiHeadModel, index: DomainIndex,
                    counter: OpCounter | None = None) -> tuple[str, dict[str, float]]:
    """Nearest mean feature for one H x W x C image; returns the id and all distances."""
    index.check(model)
    _, feats = _encode(model, np.asarray(image, dtype=np.float64)[None], index.feature_kind, counter)
    choice, d = _route(index, feats, counter)
    return index.domain_ids[int(choice[0])], dict(zip(index.domain_ids, d[0].tolist()))


def route_batch(images_nhwc: np.ndarray, model: MultiHeadModel, index: DomainIndex) -> tuple[list[str], np.ndarray]:
    index.check(model)
    _, feats = _encode(model, images_nhwc, index.feature_kind, None)
    choice, d = _route(index, feats, None)
    return [index.domain_ids[int(c)] for c in choice], d


def predict(image: np.ndarray, model: MultiHeadModel, index: DomainIndex, counter: OpCounter | None = None
            ) -> tuple[np.ndarray, np.ndarray, str]:
    """Route one image and run only the chosen head on the already computed features."""
    index.check(model)
    fused, feats = _encode(model, np.asarray(image, dtype=np.float64)[None], index.feature_kind, counter)
    choice, _ = _route(index, feats, counter)
    domain_id = index.domain_ids[int(choice[0])]
    depth, s = model.apply_head(domain_id, fused)
    if counter is not None:
        counter.head_passes += 1
    return depth.data[0, 0], s.data[0, 0], domain_id


def predict_depths(model: MultiHeadModel, dataset: Dataset, domain_id: str, chunk: int = 64) -> np.ndarray:
    """Depth predictions of head ``domain_id`` for every sample, N x H x W."""
    out = []
    for start in range(0, len(dataset), chunk):
        x = dataset.images[start : start + chunk].transpose(0, 3, 1, 2)
        fused = model.encode(x)["fused"]
        out.append(model.apply_head(domain_id, fused)[0].data[:, 0])
    return np.concatenate(out)


def evaluate(model: MultiHeadModel, dataset: Dataset, domain_id: str | None = None) -> MetricsRecord:
    """Metrics of one head (the dataset's own domain by default), pooled over all valid pixels."""
    head_id = dataset.domain_id if domain_id is None else domain_id
    pred = predict_depths(model, dataset, head_id)
    return compute_metrics(pred, dataset.depths, dataset.masks)


@dataclass
class RoutingReport:
    domain_ids: list[str]
    confusion: np.ndarray  # rows: true domain, cols: routed domain (index order)
    oracle: dict[str, MetricsRecord] = field(default_factory=dict)
    routed: dict[str, MetricsRecord] = field(default_factory=dict)

    @property
    def accuracy(self) -> dict[str, float]:
        return {d: float(self.confusion[i, i] / self.confusion[i].sum()) for i, d in enumerate(self.domain_ids)
                if self.confusion[i].sum()}

    @property
    def delta1_drop(self) -> dict[str, float]:
        return {d: self.oracle[d].delta1 - self.routed[d].delta1 for d in self.oracle}


def batch_evaluate_routing(test_sets: Sequence[Dataset], model: MultiHeadModel, index: DomainIndex,
                           chunk: int = 64) -> RoutingReport:
    """Confusion counts plus delta1 with the true head ("domain prior") and with the routed head."""
    index.check(model)
    pos = {d: i for i, d in enumerate(index.domain_ids)}
    confusion = np.zeros((len(index), len(index)), dtype=np.int64)
    report = RoutingReport(list(index.domain_ids), confusion)
    for ds in test_sets:
        if ds.domain_id not in pos:
            raise RoutingError(f"test set domain {ds.domain_id!r} is not in the index")
        oracle_pred, routed_pred = [], []
        for start in range(0, len(ds), chunk):
            fused, feats = _encode(model, ds.images[start : start + chunk], index.feature_kind, None)
            choice, _ = _route(index, feats, None)
            for c in choice:
                confusion[pos[ds.domain_id], c] += 1
            oracle = model.apply_head(ds.domain_id, fused)[0].data[:, 0]
            routed = oracle.copy()
            for c in np.unique(choice):
                rid = index.domain_ids[int(c)]
                if rid == ds.domain_id:
                    continue
                rows = np.flatnonzero(choice == c)
                routed[rows] = model.apply_head(rid, fused)[0].data[rows, 0]
            oracle_pred.append(oracle)
            routed_pred.append(routed)
        report.oracle[ds.domain_id] = compute_metrics(np.concatenate(oracle_pred), ds.depths, ds.masks)
        report.routed[ds.domain_id] = compute_metrics(np.concatenate(routed_pred), ds.depths, ds.masks)
    return report
