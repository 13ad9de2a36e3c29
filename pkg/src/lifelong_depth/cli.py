"""Command-line entry point: gen-data, run, eval, infer, route-report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from lifelong_depth import __version__, config as cfgmod
from lifelong_depth.container import FormatError
from lifelong_depth.data import Dataset, generate_split, load_dataset, save_dataset
from lifelong_depth.depth_net import ModelError, load_checkpoint, save_checkpoint
from lifelong_depth.inference import (
    DomainIndex,
    RoutingError,
    batch_evaluate_routing,
    evaluate,
    identify_domain,
    predict,
)
from lifelong_depth.metrics import StageRecord, records_to_csv
from lifelong_depth.trainer import TrainingError, run_sequence, traces_to_csv

OUT_ENV = "LIFELONG_DEPTH_OUT"
MANIFEST = "manifest.json"
REPORTS = ("metrics.csv", "loss_traces.csv", "routing.csv")

logger = logging.getLogger("lifelong_depth")


class CliError(Exception):
    """Expected failure with a message for the operator; ``code`` is the exit status."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_out(explicit: str | None, cfg: cfgmod.ExperimentConfig | None = None, name: str = "run") -> Path:
    if explicit:
        return Path(explicit)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _datasets(cfg: cfgmod.ExperimentConfig) -> tuple[dict[str, Dataset], dict[str, Dataset]]:
    train, test = {}, {}
    for d in cfg.order:
        train[d], test[d] = generate_split(cfg.domains[d], cfg.n_train, cfg.n_test, cfg.size, cfg.seed)
    return train, test


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: cfgmod.ExperimentConfig, out: Path) -> list[Path]:
    """Write ``<domain>_train.lld`` and ``<domain>_test.lld`` for every domain in the order."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = _datasets(cfg)
    paths = []
    for d in cfg.order:
        for split, ds in (("train", train[d]), ("test", test[d])):
            p = out / f"{d}_{split}.lld"
            save_dataset(ds, p)
            paths.append(p)
    return paths


def cmd_run(cfg: cfgmod.ExperimentConfig, out: Path, write_data: bool = True) -> dict:
    """Train the learning sequence and write checkpoint, replay store, CSV reports and manifest."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = _datasets(cfg)
    if write_data:
        (out / "data").mkdir(exist_ok=True)
        for d in cfg.order:
            save_dataset(train[d], out / "data" / f"{d}_train.lld")
            save_dataset(test[d], out / "data" / f"{d}_test.lld")
    result = run_sequence(cfg.order_specs, train, test, cfg.encoder, cfg.stage_configs, cfg.seed)
    model, store = result.model, result.store
    store.refresh_features(model, cfg.feature_kind)
    index = DomainIndex.from_store(store, standardize=cfg.standardize, model=model)

    stage = len(cfg.order)
    routing = batch_evaluate_routing([test[d] for d in cfg.order], model, index)
    records = list(result.records)
    records.extend(StageRecord(stage, d, routing.routed[d], "routed") for d in cfg.order)
    (out / "metrics.csv").write_text(records_to_csv(records), encoding="utf-8")
    (out / "loss_traces.csv").write_text(traces_to_csv(result.reports), encoding="utf-8")
    (out / "routing.csv").write_text(_routing_csv(index, routing), encoding="utf-8")

    extra = {"index": index.to_meta(), "config_sha256": cfg.config_hash(), "seed": cfg.seed, "order": cfg.order}
    save_checkpoint(model, out / "checkpoint.lld", extra, index.to_arrays())
    store.save(out / "replay.lld")

    files = sorted(["checkpoint.lld", "replay.lld", *REPORTS])
    manifest = {
        "tool": "lifelong_depth",
        "version": __version__,
        "command": "run",
        "seed": cfg.seed,
        "config_sha256": cfg.config_hash(),
        "config": cfg.raw,
        "outputs": {f: _sha256(out / f) for f in files},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _routing_csv(index: DomainIndex, report) -> str:
    lines = ["true_domain,routed_domain,count"]
    for i, t in enumerate(index.domain_ids):
        for j, r in enumerate(index.domain_ids):
            lines.append(f"{t},{r},{int(report.confusion[i, j])}")
    return "\n".join(lines) + "\n"


def _load_checkpoint(path: str | Path):
    try:
        model, extra, arrays = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except (FormatError, ModelError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None
    if "index" not in extra:
        raise CliError(f"checkpoint {path} carries no domain index")
    index = DomainIndex.from_meta(extra["index"], arrays)
    try:
        index.check(model)
    except RoutingError as exc:
        raise CliError(f"checkpoint {path}: {exc}") from None
    return model, index


def _load_datasets(paths: Sequence[str]) -> list[Dataset]:
    out = []
    for p in paths:
        try:
            out.append(load_dataset(p))
        except FileNotFoundError:
            raise CliError(f"dataset not found: {p}") from None
        except FormatError as exc:
            raise CliError(f"cannot load dataset {p}: {exc}") from None
    return out


def cmd_eval(checkpoint: str | Path, datasets: Sequence[str]) -> str:
    """Metrics CSV of each dataset under its own domain's head."""
    model, _ = _load_checkpoint(checkpoint)
    records = []
    for ds in _load_datasets(datasets):
        if ds.domain_id not in model.heads:
            raise CliError(f"dataset domain {ds.domain_id!r} has no head; known: {', '.join(model.domain_ids)}")
        records.append(StageRecord(len(model.heads), ds.domain_id, evaluate(model, ds)))
    return records_to_csv(records)


def _read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise CliError(f"image not found: {path}")
    if path.suffix.lower() == ".npy":
        img = np.load(path, allow_pickle=False).astype(np.float64)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise CliError(f"expected an H x W x 3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise CliError("image contains non-finite values")
    return img


def write_depth(depth: np.ndarray, stem: Path) -> tuple[Path, Path]:
    """``<stem>.npy`` in meters plus ``<stem>.png``, 16-bit millimeters."""
    from PIL import Image

    npy, png = stem.with_suffix(".npy"), stem.with_suffix(".png")
    np.save(npy, np.asarray(depth, dtype="<f8"))
    mm = np.clip(np.rint(depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(png)
    return npy, png


def cmd_infer(checkpoint: str | Path, image: str | Path, out: Path) -> tuple[str, dict[str, float], list[Path]]:
    model, index = _load_checkpoint(checkpoint)
    img = _read_image(Path(image))
    if img.shape[:2] != model.config.input_size:
        raise CliError(f"image is {img.shape[0]}x{img.shape[1]} but the model expects "
                       f"{model.config.input_size[0]}x{model.config.input_size[1]}")
    _, distances = identify_domain(img, model, index)
    depth, _, domain = predict(img, model, index)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_depth(depth, out / f"{Path(image).stem}_depth")
    return domain, distances, list(paths)


def cmd_route_report(checkpoint: str | Path, datasets: Sequence[str]) -> str:
    model, index = _load_checkpoint(checkpoint)
    try:
        rep = batch_evaluate_routing(_load_datasets(datasets), model, index)
    except RoutingError as exc:
        raise CliError(str(exc)) from None
    lines = ["domain,n_images,accuracy,delta1_oracle,delta1_routed,delta1_drop"]
    for d in rep.oracle:
        i = index.domain_ids.index(d)
        lines.append(f"{d},{int(rep.confusion[i].sum())},{rep.accuracy[d]!r},{rep.oracle[d].delta1!r},"
                     f"{rep.routed[d].delta1!r},{rep.delta1_drop[d]!r}")
    lines.append("")
    lines.append("confusion (rows: true, cols: routed)," + ",".join(index.domain_ids))
    for i, d in enumerate(index.domain_ids):
        lines.append(d + "," + ",".join(str(int(c)) for c in rep.confusion[i]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument handling


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=f"output directory (default: config output_dir, else ${OUT_ENV}/<config name>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lifelong-depth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test datasets for the configured domains")
    _add_config_args(p)

    p = sub.add_parser("run", help="train a learning sequence and write reports")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="experiment YAML file")
    src.add_argument("--manifest", help="re-run the experiment recorded in a manifest.json and compare outputs")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=f"output directory (default: config output_dir, else ${OUT_ENV}/<config name>)")
    p.add_argument("--strategy", choices=("ours", "ft", "fal"), help="override the training strategy")
    p.add_argument("--no-uncertainty", action="store_true", help="drop uncertainty estimation")
    p.add_argument("--no-replay", action="store_true", help="drop the replay loss")
    p.add_argument("--no-uncertainty-consistency", action="store_true",
                   help="consistency on depth only, not on uncertainty")
    p.add_argument("--no-data", action="store_true", help="do not write the generated datasets")

    p = sub.add_parser("eval", help="evaluate a checkpoint on datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True, help="dataset files (.lld)")
    p.add_argument("--out", help="also write eval.csv here")

    p = sub.add_parser("infer", help="route one image and write its depth map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".npy (H x W x 3 in [0,1]) or an 8-bit image file")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/infer)")

    p = sub.add_parser("route-report", help="routing confusion and delta1 with oracle vs learned routing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", help="also write route_report.csv here")
    return parser


def _run_from_args(args) -> int:
    overrides = dict(seed=args.seed, strategy=args.strategy, no_uncertainty=args.no_uncertainty,
                     no_replay=args.no_replay, no_uncertainty_consistency=args.no_uncertainty_consistency)
    if args.manifest:
        mpath = Path(args.manifest)
        try:
            recorded = json.loads(mpath.read_text(encoding="utf-8"))
            cfg = cfgmod.parse_config(recorded["config"], source=str(mpath))
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot read manifest {mpath}: {exc}", 2) from None
        if any(v not in (None, False) for v in overrides.values()):
            raise CliError("overrides cannot be combined with --manifest", 2)
        out = Path(args.out) if args.out else mpath.parent.with_name(mpath.parent.name + "-rerun")
    else:
        cfg = cfgmod.with_overrides(cfgmod.load(args.config), **overrides)
        recorded = None
        out = resolve_out(args.out, cfg, Path(args.config).stem)
    manifest = cmd_run(cfg, out, write_data=not args.no_data)
    print(f"wrote {out} (config {manifest['config_sha256'][:12]}, seed {cfg.seed})")
    if recorded is not None:
        diff = [f for f, h in recorded.get("outputs", {}).items() if manifest["outputs"].get(f) != h]
        if diff:
            print("outputs differ from the manifest: " + ", ".join(diff), file=sys.stderr)
            return 1
        print("all outputs match the manifest")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cfg = cfgmod.with_overrides(cfgmod.load(args.config), seed=args.seed)
            out = resolve_out(args.out, cfg, Path(args.config).stem)
            for p in cmd_gen_data(cfg, out):
                print(p)
        elif args.command == "run":
            return _run_from_args(args)
        elif args.command == "eval":
            text = cmd_eval(args.checkpoint, args.data)
            sys.stdout.write(text)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "eval.csv").write_text(text, encoding="utf-8")
        elif args.command == "infer":
            domain, distances, paths = cmd_infer(args.checkpoint, args.image, resolve_out(args.out, name="infer"))
            print(f"domain: {domain}")
            for d, v in distances.items():
                print(f"distance {d}: {v!r}")
            for p in paths:
                print(f"wrote {p}")
        elif args.command == "route-report":
            text = cmd_route_report(args.checkpoint, args.data)
            sys.stdout.write(text)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "route_report.csv").write_text(text, encoding="utf-8")
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
