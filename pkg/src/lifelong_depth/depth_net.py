"""Shared-encoder / multi-head depth network.

The encoder is a small pyramid: ``len(stage_widths)`` stride-2 stages of two
3x3 convolutions each.  Every stage output is compressed by a 1x1 convolution,
upsampled back to input resolution and concatenated into the fused feature
map that all heads read.  A head is two convolutions for depth and two for the
log-uncertainty ``s``.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from lifelong_depth import autodiff as ad
from lifelong_depth import container
from lifelong_depth.autodiff import Tensor
from lifelong_depth.data import DomainSpec

UNCERTAINTY_CLAMP = 10.0
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class UnknownDomainError(ModelError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 3
    stage_widths: tuple[int, ...] = (8, 16, 32)
    fused_feature_channels: int = 16
    input_size: tuple[int, int] = (64, 64)
    head_hidden: int = 8
    head_kernel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.stage_widths) < 2:
            raise ValueError("encoder needs at least 2 stages")
        if any(w < 1 for w in self.stage_widths) or self.input_channels < 1:
            raise ValueError(f"channel counts must be positive: {self}")
        if self.fused_feature_channels < len(self.stage_widths):
            raise ValueError("fused_feature_channels must give every stage at least one channel")
        if self.head_hidden < 1 or self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head_hidden must be positive and head_kernel a positive odd number")
        f = self.downsample_factor
        if any(s % f or s < f for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be a multiple of {f}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.stage_widths)

    @property
    def compressed_channels(self) -> tuple[int, ...]:
        """Fused channels split across stages; the remainder goes to the earliest stages."""
        k = len(self.stage_widths)
        base, extra = divmod(self.fused_feature_channels, k)
        return tuple(base + (1 if i < extra else 0) for i in range(k))

    def encoder_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.input_channels
        for i, w in enumerate(self.stage_widths, start=1):
            shapes[f"stage{i}.down.weight"] = (w, cin, 3, 3)
            shapes[f"stage{i}.down.bias"] = (w,)
            shapes[f"stage{i}.conv.weight"] = (w, w, 3, 3)
            shapes[f"stage{i}.conv.bias"] = (w,)
            cin = w
        for i, (w, c) in enumerate(zip(self.stage_widths, self.compressed_channels), start=1):
            shapes[f"compress{i}.weight"] = (c, w, 1, 1)
            shapes[f"compress{i}.bias"] = (c,)
        return shapes

    def head_shapes(self) -> dict[str, tuple[int, ...]]:
        k, hid, c = self.head_kernel, self.head_hidden, self.fused_feature_channels
        shapes = {}
        for branch in ("depth", "uncertainty"):
            shapes[f"{branch}.conv1.weight"] = (hid, c, k, k)
            shapes[f"{branch}.conv1.bias"] = (hid,)
            shapes[f"{branch}.conv2.weight"] = (1, hid, 1, 1)
            shapes[f"{branch}.conv2.bias"] = (1,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        return cls(**d)


def _init_params(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = ad.parameter(data, name=name)
    return params


def _seed_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))])


class PredictorHead:
    """Depth and uncertainty branches for one domain."""

    def __init__(self, domain_id: str, depth_range: tuple[float, float], params: dict[str, Tensor]):
        self.domain_id = domain_id
        self.depth_range = (float(depth_range[0]), float(depth_range[1]))
        self.params = params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, fused: Tensor, padding: int) -> tuple[Tensor, Tensor]:
        p = self.params
        h = ad.relu(ad.conv2d(fused, p["depth.conv1.weight"], p["depth.conv1.bias"], padding=padding))
        z = ad.conv2d(h, p["depth.conv2.weight"], p["depth.conv2.bias"])
        lo, hi = self.depth_range
        depth = lo + (hi - lo) * ad.unit_squash(z)
        h = ad.relu(ad.conv2d(fused, p["uncertainty.conv1.weight"], p["uncertainty.conv1.bias"], padding=padding))
        s = ad.conv2d(h, p["uncertainty.conv2.weight"], p["uncertainty.conv2.bias"])
        return depth, ad.clamp(s, -UNCERTAINTY_CLAMP, UNCERTAINTY_CLAMP)


class MultiHeadModel:
    def __init__(self, config: EncoderConfig, encoder: dict[str, Tensor], heads: list[PredictorHead] | None = None,
                 version_tag: int = 0, frozen: bool = False):
        self.config = config
        self.encoder = encoder
        self.heads: dict[str, PredictorHead] = {h.domain_id: h for h in heads or []}
        self.version_tag = version_tag
        self.frozen = frozen

    # -- structure ---------------------------------------------------------

    @property
    def domain_ids(self) -> list[str]:
        return list(self.heads)

    def head(self, domain_id: str) -> PredictorHead:
        try:
            return self.heads[domain_id]
        except KeyError:
            raise UnknownDomainError(
                f"unknown domain {domain_id!r}; known domains: {', '.join(self.heads) or '(none)'}"
            ) from None

    def encoder_parameters(self) -> list[Tensor]:
        return list(self.encoder.values())

    def parameters(self) -> list[Tensor]:
        out = self.encoder_parameters()
        for h in self.heads.values():
            out.extend(h.params.values())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {f"encoder/{k}": v for k, v in self.encoder.items()}
        for h in self.heads.values():
            named.update({f"head/{h.domain_id}/{k}": v for k, v in h.params.items()})
        return named

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def shared_fraction(self) -> float:
        return sum(p.size for p in self.encoder.values()) / self.num_parameters()

    # -- computation -------------------------------------------------------

    def encode(self, x: Tensor | np.ndarray) -> dict[str, Tensor]:
        """Fused feature map plus the deepest stage output, for NCHW input."""
        x = ad.as_tensor(x)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != cfg.input_size:
            raise ModelError(f"expected input N x {cfg.input_channels} x {cfg.input_size[0]} x "
                             f"{cfg.input_size[1]}, got {x.shape}")
        p = self.encoder
        h = x
        compressed = []
        for i in range(1, len(cfg.stage_widths) + 1):
            h = ad.relu(ad.conv2d(h, p[f"stage{i}.down.weight"], p[f"stage{i}.down.bias"], stride=2, padding=1))
            h = ad.relu(ad.conv2d(h, p[f"stage{i}.conv.weight"], p[f"stage{i}.conv.bias"], padding=1))
            c = ad.relu(ad.conv2d(h, p[f"compress{i}.weight"], p[f"compress{i}.bias"]))
            compressed.append(ad.upsample_nearest(c, 2 ** i))
        return {"fused": ad.concat(compressed, axis=1), "deepest": h}

    @staticmethod
    def pool(feature_map: Tensor) -> Tensor:
        """Global average pool, N x C x H x W -> N x C."""
        return ad.mean(feature_map, axis=(2, 3))

    def apply_head(self, domain_id: str, fused: Tensor) -> tuple[Tensor, Tensor]:
        return self.head(domain_id)(fused, padding=self.config.head_kernel // 2)

    def __call__(self, x, domain_id: str) -> tuple[Tensor, Tensor, Tensor]:
        head = self.head(domain_id)
        fused = self.encode(x)["fused"]
        depth, s = head(fused, padding=self.config.head_kernel // 2)
        return depth, s, self.pool(fused)

    # -- state -------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}


def build_model(config: EncoderConfig, first_domain: DomainSpec, seed: int) -> MultiHeadModel:
    """Encoder plus a single head for ``first_domain``; initialization is a pure function of ``seed``."""
    encoder = _init_params(config.encoder_shapes(), _seed_rng(seed, "encoder"))
    model = MultiHeadModel(config, encoder)
    _attach_head(model, first_domain, seed)
    return model


def _attach_head(model: MultiHeadModel, domain: DomainSpec, seed: int) -> None:
    if domain.domain_id in model.heads:
        raise ModelError(f"domain {domain.domain_id!r} already has a head")
    params = _init_params(model.config.head_shapes(), _seed_rng(seed, "head:" + domain.domain_id))
    model.heads[domain.domain_id] = PredictorHead(domain.domain_id, domain.depth_range, params)


def add_head(model: MultiHeadModel, domain: DomainSpec, seed: int) -> MultiHeadModel:
    """Append a head for a new domain in place; existing parameters are not touched."""
    if model.frozen:
        raise ModelError("cannot add a head to a frozen snapshot")
    _attach_head(model, domain, seed)
    model.version_tag += 1
    return model


def snapshot(model: MultiHeadModel) -> MultiHeadModel:
    """Deep, frozen copy.  Its parameters do not require gradients."""
    encoder = {k: ad.Tensor(v.data.copy(), name=k) for k, v in model.encoder.items()}
    heads = [
        PredictorHead(h.domain_id, h.depth_range, {k: ad.Tensor(v.data.copy(), name=k) for k, v in h.params.items()})
        for h in model.heads.values()
    ]
    for p in list(encoder.values()) + [p for h in heads for p in h.params.values()]:
        p.data.flags.writeable = False
    return MultiHeadModel(model.config, encoder, heads, model.version_tag, frozen=True)


def clone(model: MultiHeadModel) -> MultiHeadModel:
    """Deep, trainable copy (also thaws a snapshot)."""
    encoder = {k: ad.parameter(v.data.copy(), name=k) for k, v in model.encoder.items()}
    heads = [
        PredictorHead(h.domain_id, h.depth_range, {k: ad.parameter(v.data.copy(), name=k) for k, v in h.params.items()})
        for h in model.heads.values()
    ]
    return MultiHeadModel(model.config, encoder, heads, model.version_tag)


def param_report(model: MultiHeadModel) -> dict[str, int]:
    """Parameter counts for the encoder and each head, plus the total."""
    report = {"encoder": sum(p.size for p in model.encoder.values())}
    for h in model.heads.values():
        report[f"head:{h.domain_id}"] = h.num_parameters()
    report["total"] = model.num_parameters()
    return report


def forward_head(model: MultiHeadModel, image: np.ndarray, domain_id: str):
    """Depth, uncertainty and pooled feature for an H x W x C image (or N x H x W x C batch).

    Returns numpy arrays; a single image gives (H x W, H x W, C_fused).
    """
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    x = image[None] if single else image
    model.head(domain_id)
    depth, s, feat = model(x.transpose(0, 3, 1, 2), domain_id)
    depth, s, feat = depth.data[:, 0], s.data[:, 0], feat.data
    if single:
        return depth[0], s[0], feat[0]
    return depth, s, feat


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MultiHeadModel, path: str | Path, extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "version_tag": model.version_tag,
        "heads": [{"domain_id": h.domain_id, "depth_range": list(h.depth_range)} for h in model.heads.values()],
        "extra": extra or {},
    }
    arrays = dict(model.state_arrays())
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    container.write(path, "checkpoint", meta, arrays)


def load_checkpoint(path: str | Path) -> tuple[MultiHeadModel, dict, dict[str, np.ndarray]]:
    """Model, extra metadata and extra arrays stored alongside it."""
    meta, arrays = container.read(path, "checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ModelError(f"checkpoint version {meta.get('checkpoint_version')} is not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    config = EncoderConfig.from_dict(meta["config"])
    try:
        encoder = {k: ad.parameter(arrays[f"encoder/{k}"], name=k) for k in config.encoder_shapes()}
        heads = []
        for h in meta["heads"]:
            prefix = f"head/{h['domain_id']}/"
            heads.append(PredictorHead(h["domain_id"], tuple(h["depth_range"]),
                                       {k: ad.parameter(arrays[prefix + k], name=k) for k in config.head_shapes()}))
    except KeyError as exc:
        raise ModelError(f"checkpoint is missing array {exc.args[0]}") from None
    for name, shape in config.encoder_shapes().items():
        if encoder[name].shape != shape:
            raise ModelError(f"encoder/{name} has shape {encoder[name].shape}, expected {shape}")
    model = MultiHeadModel(config, encoder, heads, meta["version_tag"])
    extra_arrays = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, meta["extra"], extra_arrays
