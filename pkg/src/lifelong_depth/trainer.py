"""First-domain training, lifelong stages (OURS / FT / FAL) and whole learning sequences."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from lifelong_depth import autodiff as ad
from lifelong_depth import losses
from lifelong_depth.data import Dataset, DomainSpec
from lifelong_depth.depth_net import EncoderConfig, MultiHeadModel, add_head, build_model, snapshot
from lifelong_depth.inference import evaluate
from lifelong_depth.losses import LossWeights
from lifelong_depth.metrics import MetricsRecord, StageRecord, aggregate, forgetting_curve
from lifelong_depth.replay import DEFAULT_CAP, ReplayEntry, ReplayStore, build_replay, compute_mean_feature, sample_rows

logger = logging.getLogger(__name__)

STRATEGIES = ("ours", "ft", "fal")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TRACE_TERMS = ("ud", "cons", "replay", "total")


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 1e-4
    lr_halving_period_epochs: int = 5
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    strategy: str = "ours"
    seed: int = 0
    grad_clip: float = 10.0
    replay_cap: int = DEFAULT_CAP

    def __post_init__(self):
        self.strategy = self.strategy.lower()
        if self.strategy not in STRATEGIES:
            raise TrainingError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if not self.base_lr > 0:
            raise TrainingError(f"base_lr must be > 0, got {self.base_lr}")
        if self.lr_halving_period_epochs < 1:
            raise TrainingError("lr_halving_period_epochs must be >= 1")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: halved every ``lr_halving_period_epochs`` epochs."""
    return config.base_lr * 0.5 ** ((epoch - 1) // config.lr_halving_period_epochs)


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, grad_clip: float | None = None) -> float:
        """Apply one update from ``p.grad``; returns the pre-clip global gradient norm."""
        grads = [p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if grad_clip is not None and norm > grad_clip:
            grads = [g * (grad_clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class StageReport:
    domain_id: str
    strategy: str
    stage: int = 1
    traces: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in TRACE_TERMS})
    metrics: dict[str, MetricsRecord] = field(default_factory=dict)
    iterations: int = 0
    wall_time: float = 0.0

    def trace_rows(self) -> list[tuple[int, str, int, str, float]]:
        rows = []
        for epoch in range(len(self.traces["total"])):
            for term in TRACE_TERMS:
                rows.append((self.stage, self.domain_id, epoch + 1, term, self.traces[term][epoch]))
        return rows


def traces_to_csv(reports: Sequence[StageReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("stage", "domain", "epoch", "term", "value"))
    for r in reports:
        for stage, dom, epoch, term, value in r.trace_rows():
            w.writerow((stage, dom, epoch, term, repr(value)))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# objective


@dataclass
class Batch:
    images: np.ndarray  # N x C x H x W
    depths: np.ndarray  # N x 1 x H x W
    masks: np.ndarray


def stage_objective(model: MultiHeadModel, new_spec: DomainSpec, batch: Batch, weights: LossWeights,
                    old_model: MultiHeadModel | None = None, old_specs: Sequence[DomainSpec] = (),
                    replay_batches: Mapping[str, Batch] | None = None) -> tuple[ad.Tensor, dict[str, float]]:
    """Total loss of one iteration and its parts.

    Must be called while a :class:`~lifelong_depth.autodiff.Graph` is recording.
    Old-domain consistency is measured on the new-domain images through the
    frozen ``old_model``; replay uses ``replay_batches`` when replay is enabled.
    """
    use_s = weights.enable_uncertainty
    fused = model.encode(batch.images)["fused"]
    depth, s = model.apply_head(new_spec.domain_id, fused)
    ud = losses.uncertainty_depth_loss(depth, s, batch.depths, batch.masks, normalize=new_spec.scale_variant,
                                       use_uncertainty=use_s)
    parts = {"ud": ud.item(), "cons": 0.0, "replay": 0.0}
    terms = {}
    if old_specs:
        if old_model is None:
            raise TrainingError("old-domain terms need the frozen old model")
        old_fused = old_model.encode(batch.images)["fused"]
        for spec in old_specs:
            i = spec.domain_id
            weights.lam(i)
            old_depth, old_s = old_model.apply_head(i, old_fused)
            new_depth, new_s = model.apply_head(i, fused)
            cons = losses.consistency_loss(new_depth, new_s, old_depth, old_s,
                                           include_uncertainty=use_s and weights.enable_uncertainty_consistency)
            rep = None
            if weights.enable_replay:
                if replay_batches is None or i not in replay_batches:
                    raise TrainingError(f"no replay batch for old domain {i!r}")
                rb = replay_batches[i]
                r_depth, r_s = model.apply_head(i, model.encode(rb.images)["fused"])
                rep = losses.replay_loss(r_depth, r_s, rb.depths, rb.masks, normalize=spec.scale_variant,
                                         use_uncertainty=use_s)
                parts["replay"] += rep.item()
            parts["cons"] += cons.item()
            terms[i] = (cons, rep)
    total = losses.total_loss(ud, terms, weights)
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# stages


def _epoch_order(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _finish_stage(model: MultiHeadModel, store: ReplayStore, eval_sets: Mapping[str, Dataset] | None,
                  report: StageReport) -> None:
    store.refresh_features(model)
    if eval_sets:
        for dom in model.domain_ids:
            if dom in eval_sets:
                report.metrics[dom] = evaluate(model, eval_sets[dom], dom)


def _run_epochs(model: MultiHeadModel, dataset: Dataset, config: TrainConfig, trainable: list[ad.Tensor],
                report: StageReport, old_model: MultiHeadModel | None = None,
                old_specs: Sequence[DomainSpec] = (), store: ReplayStore | None = None) -> None:
    weights = config.weights
    if config.strategy != "ours":
        weights = replace(weights, lambda_per_domain={}, enable_replay=False)
        old_specs = ()
    opt = Adam(trainable)
    order_rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0])
    replay_rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 1])
    use_replay = bool(old_specs) and weights.enable_replay
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        sums = dict.fromkeys(TRACE_TERMS, 0.0)
        batches = _epoch_order(order_rng, len(dataset), config.batch_size)
        for rows in batches:
            batch = Batch(*dataset.batch(rows))
            replay_batches = None
            if use_replay:
                replay_batches = {}
                for spec in old_specs:
                    entry = store[spec.domain_id]
                    replay_batches[spec.domain_id] = Batch(
                        *entry.batch(sample_rows(len(entry), config.batch_size, replay_rng)))
            with ad.Graph() as tape:
                total, parts = stage_objective(model, dataset.spec, batch, weights, old_model, old_specs,
                                               replay_batches)
            tape.backward(total, trainable)
            opt.step(lr, config.grad_clip)
            for k in TRACE_TERMS:
                sums[k] += parts[k]
            report.iterations += 1
        for k in TRACE_TERMS:
            report.traces[k].append(sums[k] / len(batches))
        logger.info("%s epoch %d/%d lr=%.2e total=%.4f ud=%.4f cons=%.4f replay=%.4f", dataset.domain_id, epoch,
                    config.epochs, lr, *(report.traces[k][-1] for k in ("total", "ud", "cons", "replay")))


def train_first_domain(model: MultiHeadModel, dataset: Dataset, config: TrainConfig,
                       eval_sets: Mapping[str, Dataset] | None = None
                       ) -> tuple[MultiHeadModel, ReplayEntry, StageReport]:
    """Train encoder and the single head on the first domain; build its replay entry."""
    if model.domain_ids != [dataset.domain_id]:
        raise TrainingError(f"model heads {model.domain_ids} do not match dataset domain {dataset.domain_id!r}")
    report = StageReport(dataset.domain_id, config.strategy)
    start = time.perf_counter()
    if config.epochs > 0:
        _run_epochs(model, dataset, config, model.parameters(), report)
        model.version_tag += 1
    entry = build_replay(dataset, config.replay_cap, config.seed)
    store = ReplayStore([entry])
    _finish_stage(model, store, eval_sets, report)
    report.wall_time = time.perf_counter() - start
    return model, entry, report


def lifelong_stage(model: MultiHeadModel, old_snapshot: MultiHeadModel, new_dataset: Dataset,
                   replay_store: ReplayStore, config: TrainConfig,
                   eval_sets: Mapping[str, Dataset] | None = None, stage: int = 2
                   ) -> tuple[MultiHeadModel, ReplayStore, StageReport]:
    """Learn a new domain whose head was already added, while protecting the old ones."""
    if not old_snapshot.frozen:
        raise TrainingError("old_snapshot must be a frozen snapshot")
    new_id = new_dataset.domain_id
    if new_id not in model.heads:
        raise TrainingError(f"add a head for {new_id!r} before starting its stage")
    if new_id in old_snapshot.heads:
        raise TrainingError(f"{new_id!r} is already an old domain")
    old_ids = old_snapshot.domain_ids
    old_specs = []
    for i in old_ids:
        if i not in replay_store:
            raise TrainingError(f"missing replay entry for old domain {i!r}")
        old_specs.append(replay_store[i].spec)
        if config.strategy == "ours":
            config.weights.lam(i)
    if config.strategy == "fal":
        trainable = list(model.head(new_id).params.values())
    else:
        trainable = model.parameters()
    report = StageReport(new_id, config.strategy, stage=stage)
    start = time.perf_counter()
    store = replay_store.copy()
    if config.epochs > 0:
        _run_epochs(model, new_dataset, config, trainable, report, old_snapshot, old_specs, store)
        model.version_tag += 1
    store.add(build_replay(new_dataset, config.replay_cap, config.seed))
    _finish_stage(model, store, eval_sets, report)
    report.wall_time = time.perf_counter() - start
    return model, store, report


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceResult:
    order: list[str]
    reports: list[StageReport]
    records: list[StageRecord]
    model: MultiHeadModel
    store: ReplayStore

    @property
    def curve(self) -> dict[str, list[tuple[int, float]]]:
        return forgetting_curve(self.records)

    def final_metrics(self) -> dict[str, MetricsRecord]:
        last = max(r.stage for r in self.records)
        return {r.domain: r.metrics for r in self.records if r.stage == last}

    def final_average(self) -> MetricsRecord:
        return aggregate(self.final_metrics())


def _with_lambdas(config: TrainConfig, specs: Sequence[DomainSpec]) -> TrainConfig:
    lam = {s.domain_id: s.lambda_hint for s in specs}
    lam.update(config.weights.lambda_per_domain)
    return replace(config, weights=replace(config.weights, lambda_per_domain=lam))


def run_sequence(order: Sequence[DomainSpec], train_sets: Mapping[str, Dataset], test_sets: Mapping[str, Dataset],
                 encoder_config: EncoderConfig, configs: TrainConfig | Sequence[TrainConfig], seed: int
                 ) -> SequenceResult:
    """Learn the domains in ``order`` one after another, evaluating every learned domain after each stage.

    Lambdas missing from a stage config default to each domain's ``lambda_hint``.
    """
    ids = [s.domain_id for s in order]
    if not ids:
        raise TrainingError("learning order is empty")
    if len(set(ids)) != len(ids):
        raise TrainingError(f"learning order repeats a domain: {ids}")
    for i in ids:
        if i not in train_sets or i not in test_sets:
            raise TrainingError(f"no train/test data for domain {i!r}")
    if isinstance(configs, TrainConfig):
        configs = [configs] * len(order)
    if len(configs) != len(order):
        raise TrainingError(f"{len(configs)} stage configs for {len(order)} stages")
    configs = [_with_lambdas(c, order) for c in configs]

    reports, records = [], []
    model = build_model(encoder_config, order[0], seed)
    model, entry, report = train_first_domain(model, train_sets[ids[0]], configs[0], test_sets)
    store = ReplayStore([entry])
    reports.append(report)
    records.extend(StageRecord(1, d, m) for d, m in report.metrics.items())
    for k, spec in enumerate(order[1:], start=2):
        old = snapshot(model)
        add_head(model, spec, seed)
        model, store, report = lifelong_stage(model, old, train_sets[spec.domain_id], store, configs[k - 1],
                                              test_sets, stage=k)
        reports.append(report)
        records.extend(StageRecord(k, d, report.metrics[d]) for d in model.domain_ids)
    return SequenceResult(ids, reports, records, model, store)
