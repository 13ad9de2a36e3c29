"""Procedural multi-domain RGB-D scenes.

Every sample is a small parametric scene (planes and boxes indoors, a ground
plane with obstacles outdoors) rendered twice from the same description: once
to a metric depth map and once to an image whose colour, haze and texture
depend on that depth.  Sensor artifacts (missing returns, gross outliers) are
applied afterwards.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from lifelong_depth import container

TEXTURE_FAMILIES = ("indoor_blocks", "indoor_rooms", "outdoor_road")
DOWNSAMPLE_FACTOR = 8


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    depth_range: tuple[float, float]
    texture_family: str
    outlier_rate: float = 0.0
    missing_rate: float = 0.0
    lambda_hint: float = 10.0
    scale_variant: bool = True

    def __post_init__(self):
        lo, hi = self.depth_range
        object.__setattr__(self, "depth_range", (float(lo), float(hi)))
        if not 0 <= lo < hi:
            raise ValueError(f"{self.domain_id}: depth_range must satisfy 0 <= min < max, got {self.depth_range}")
        if self.texture_family not in TEXTURE_FAMILIES:
            raise ValueError(f"{self.domain_id}: unknown texture_family {self.texture_family!r}")
        for name in ("outlier_rate", "missing_rate"):
            rate = getattr(self, name)
            if not 0 <= rate < 1:
                raise ValueError(f"{self.domain_id}: {name} must lie in [0, 1), got {rate}")
        if not np.isfinite(self.lambda_hint) or self.lambda_hint < 0:
            raise ValueError(f"{self.domain_id}: lambda_hint must be finite and >= 0")

    @property
    def max_depth(self) -> float:
        return self.depth_range[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        d = dict(d)
        d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


def domain_presets() -> list[DomainSpec]:
    """Two indoor domains with similar statistics and one outdoor domain."""
    return [
        DomainSpec("indoor_A", (0.0, 10.0), "indoor_blocks", outlier_rate=0.02, missing_rate=0.05, lambda_hint=10.0),
        DomainSpec("outdoor_B", (0.0, 80.0), "outdoor_road", outlier_rate=0.03, missing_rate=0.3, lambda_hint=100.0),
        DomainSpec("indoor_C", (0.0, 6.0), "indoor_rooms", outlier_rate=0.01, missing_rate=0.05, lambda_hint=10.0),
    ]


def preset(name: str) -> DomainSpec:
    by_id = {s.domain_id: s for s in domain_presets()}
    if name not in by_id:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(by_id)}")
    return by_id[name]


# ---------------------------------------------------------------------------
# scenes


def _domain_key(domain_id: str) -> int:
    return zlib.crc32(domain_id.encode("utf-8"))


def sample_rng(seed: int, domain_id: str, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, _domain_key(domain_id), int(index), stream])


_INDOOR_PALETTES = {
    "indoor_blocks": {
        "wall": (0.62, 0.66, 0.72),
        "floor": (0.55, 0.42, 0.30),
        "ceiling": (0.85, 0.85, 0.88),
        "side": (0.50, 0.56, 0.64),
    },
    "indoor_rooms": {
        "wall": (0.74, 0.66, 0.54),
        "floor": (0.50, 0.36, 0.26),
        "ceiling": (0.88, 0.84, 0.78),
        "side": (0.68, 0.58, 0.46),
    },
}


# per-family camera colour response, standing in for different sensors
_WHITE_BALANCE = {
    "indoor_blocks": (1.0, 1.0, 1.0),
    "indoor_rooms": (1.12, 1.0, 0.8),
}


def make_scene(spec: DomainSpec, rng: np.random.Generator) -> dict:
    """Draw the parametric description of one scene."""
    m = spec.max_depth
    if spec.texture_family == "outdoor_road":
        horizon = float(rng.uniform(0.35, 0.5))
        ground_k = float(rng.uniform(1.5, 2.5))
        obstacles = []
        for _ in range(int(rng.integers(2, 6))):
            d = float(rng.uniform(0.08, 0.75) * m)
            bottom = horizon + ground_k / d
            scale = (bottom - horizon) / 1.65
            height = float(rng.uniform(1.4, 3.0)) * scale
            width = float(rng.uniform(1.6, 4.0)) * scale
            uc = float(rng.uniform(0.05, 0.95))
            obstacles.append({
                "depth": d,
                "u0": uc - width / 2, "u1": uc + width / 2,
                "v0": bottom - height, "v1": bottom,
                "color": [float(c) for c in rng.uniform(0.15, 0.95, size=3)],
            })
        return {
            "family": spec.texture_family,
            "max_depth": m,
            "horizon": horizon,
            "ground_k": ground_k,
            "lane_phase": float(rng.uniform(0, 1)),
            "obstacles": obstacles,
        }

    horizon = float(rng.uniform(0.4, 0.6))
    wall = float(rng.uniform(0.55, 0.95) * m)
    floor_k = float(rng.uniform(0.08, 0.15) * m)
    ceil_k = float(rng.uniform(0.06, 0.12) * m)
    n_boxes = int(rng.integers(2, 5)) if spec.texture_family == "indoor_blocks" else int(rng.integers(1, 3))
    boxes = []
    for _ in range(n_boxes):
        d = float(rng.uniform(0.25, 0.85) * wall)
        bottom = min(horizon + floor_k / d, 1.0)
        size = (bottom - horizon) / floor_k * m
        height = float(rng.uniform(0.04, 0.12)) * size
        width = float(rng.uniform(0.05, 0.15)) * size
        uc = float(rng.uniform(0.1, 0.9))
        boxes.append({
            "depth": d,
            "u0": uc - width / 2, "u1": uc + width / 2,
            "v0": bottom - height, "v1": bottom,
            "color": [float(c) for c in rng.uniform(0.1, 0.9, size=3)],
        })
    scene = {
        "family": spec.texture_family,
        "max_depth": m,
        "horizon": horizon,
        "wall": wall,
        "floor_k": floor_k,
        "ceil_k": ceil_k,
        "boxes": boxes,
        "side_k": None,
    }
    if spec.texture_family == "indoor_rooms":
        scene["side_k"] = float(rng.uniform(0.05, 0.1) * m)
        scene["side_u"] = float(rng.uniform(0.2, 0.35))
    return scene


def _grid(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    return np.meshgrid(u, v)


def _render_layers(scene: dict, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Depth (meters) and integer surface label per pixel, via a z-buffer."""
    uu, vv = _grid(size)
    m = scene["max_depth"]
    hz = scene["horizon"]
    with np.errstate(divide="ignore"):
        if scene["family"] == "outdoor_road":
            below = vv > hz
            depth = np.full(size, m)
            ground = scene["ground_k"] / np.where(below, vv - hz, 1.0)
            depth = np.where(below, np.minimum(ground, m), m)
            label = np.where(below, 1, 0)
            objects = scene["obstacles"]
            first_obj = 2
        else:
            depth = np.full(size, scene["wall"])
            label = np.zeros(size, dtype=np.int64)
            floor = scene["floor_k"] / np.where(vv > hz, vv - hz, 1e-12)
            ceil = scene["ceil_k"] / np.where(vv < hz, hz - vv, 1e-12)
            for lab, surf, valid in ((1, floor, vv > hz), (2, ceil, vv < hz)):
                closer = valid & (surf < depth)
                depth = np.where(closer, surf, depth)
                label = np.where(closer, lab, label)
            if scene.get("side_k") is not None:
                su = scene["side_u"]
                side = scene["side_k"] / np.where(uu < su, su - uu, 1e-12)
                closer = (uu < su) & (side < depth)
                depth = np.where(closer, side, depth)
                label = np.where(closer, 3, label)
            objects = scene["boxes"]
            first_obj = 4
    for k, ob in enumerate(objects):
        inside = (uu >= ob["u0"]) & (uu < ob["u1"]) & (vv >= ob["v0"]) & (vv < ob["v1"])
        closer = inside & (ob["depth"] < depth)
        depth = np.where(closer, ob["depth"], depth)
        label = np.where(closer, first_obj + k, label)
    return np.minimum(depth, m), label.astype(np.int64)


def render_depth(scene: dict, size: tuple[int, int]) -> np.ndarray:
    return _render_layers(scene, size)[0]


def render_image(scene: dict, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """H x W x 3 image in [0, 1] whose shading is tied to the rendered depth."""
    depth, label = _render_layers(scene, size)
    uu, vv = _grid(size)
    m = scene["max_depth"]
    rel = depth / m
    img = np.zeros(size + (3,))
    if scene["family"] == "outdoor_road":
        sky = np.stack([0.35 + 0.4 * vv, 0.55 + 0.35 * vv, np.full(size, 0.95)], axis=-1)
        stripes = (np.floor(depth / 4.0 + scene["lane_phase"]) % 2 == 0) & (np.abs(uu - 0.5) < 0.02 + 0.2 * (vv - scene["horizon"]))
        road = np.where(stripes[..., None], 0.55, 0.3) * np.ones(3)
        img = np.where((label == 0)[..., None], sky, img)
        img = np.where((label == 1)[..., None], road, img)
        for k, ob in enumerate(scene["obstacles"]):
            img = np.where((label == 2 + k)[..., None], np.asarray(ob["color"]), img)
        haze = np.array([0.75, 0.8, 0.9])
        a = (0.7 * rel)[..., None]
        img = np.where((label == 0)[..., None], img, (1 - a) * img + a * haze)
    else:
        pal = _INDOOR_PALETTES[scene["family"]]
        for lab, key in ((0, "wall"), (1, "floor"), (2, "ceiling"), (3, "side")):
            img = np.where((label == lab)[..., None], np.asarray(pal[key]), img)
        for k, ob in enumerate(scene["boxes"]):
            img = np.where((label == 4 + k)[..., None], np.asarray(ob["color"]), img)
        tiles = (np.floor(depth * 8.0 / m) % 2 == 0) & (label == 1)
        img = img * np.where(tiles, 1.1, 1.0)[..., None]
        if scene["family"] == "indoor_rooms":
            # striped wallpaper on the walls
            stripes = (np.floor(uu * 12.0) % 2 == 0) & ((label == 0) | (label == 3))
            img = img * np.where(stripes, 0.55, 1.0)[..., None]
        img = img * (1.0 - 0.65 * rel)[..., None]
        img = img * np.asarray(_WHITE_BALANCE[scene["family"]])
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def corrupt_depth(depth: np.ndarray, mask: np.ndarray, outlier_rate: float, missing_rate: float,
                  seed, max_depth: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inject gross outliers (uniform in [0, 2*max]) and missing returns.

    Outliers stay flagged valid; missing pixels are flagged invalid.
    """
    for name, rate in (("outlier_rate", outlier_rate), ("missing_rate", missing_rate)):
        if not 0 <= rate < 1:
            raise ValueError(f"{name} must lie in [0, 1), got {rate}")
    depth = np.array(depth, dtype=np.float64)
    mask = np.array(mask, dtype=bool)
    if outlier_rate == 0 and missing_rate == 0:
        return depth, mask
    top = float(depth.max()) if max_depth is None else float(max_depth)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    outliers = rng.random(depth.shape) < outlier_rate
    depth[outliers] = rng.uniform(0.0, 2.0 * top, size=int(outliers.sum()))
    missing = rng.random(depth.shape) < missing_rate
    mask[missing] = False
    return depth, mask


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, meters, after corruption
    mask: np.ndarray  # H x W bool
    clean_depth: np.ndarray
    scene: dict
    index: int


@dataclass
class Dataset:
    spec: DomainSpec
    seed: int
    images: np.ndarray  # N x H x W x 3
    depths: np.ndarray  # N x H x W
    masks: np.ndarray  # N x H x W bool
    clean_depths: np.ndarray
    indices: np.ndarray  # source sample indices
    scenes: list = field(default_factory=list)

    @property
    def domain_id(self) -> str:
        return self.spec.domain_id

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.depths[i], self.masks[i], self.clean_depths[i],
                      self.scenes[i] if self.scenes else {}, int(self.indices[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def batch(self, rows: Sequence[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(images NCHW, depths N1HW, masks N1HW float) for the given rows."""
        rows = np.asarray(rows, dtype=np.int64)
        x = self.images[rows].transpose(0, 3, 1, 2)
        return (np.ascontiguousarray(x), self.depths[rows][:, None].copy(),
                self.masks[rows][:, None].astype(np.float64))

    def subset(self, rows: Sequence[int] | np.ndarray) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.spec, self.seed, self.images[rows], self.depths[rows], self.masks[rows],
                       self.clean_depths[rows], self.indices[rows],
                       [self.scenes[i] for i in rows] if self.scenes else [])


def generate_sample(spec: DomainSpec, size: tuple[int, int], seed: int, index: int) -> Sample:
    rng = sample_rng(seed, spec.domain_id, index)
    scene = make_scene(spec, rng)
    clean = render_depth(scene, size)
    image = render_image(scene, size, rng)
    depth, mask = corrupt_depth(clean, np.ones(size, dtype=bool), spec.outlier_rate, spec.missing_rate,
                                sample_rng(seed, spec.domain_id, index, stream=1), max_depth=spec.max_depth)
    return Sample(image, depth, mask, clean, scene, index)


def generate_domain(spec: DomainSpec, n: int, size: tuple[int, int] = (64, 64), seed: int = 0,
                    start: int = 0, factor: int = DOWNSAMPLE_FACTOR) -> Dataset:
    """Samples ``start .. start+n-1`` of the domain; each is a pure function of (spec, seed, index)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = size
    if h % factor or w % factor or h < factor or w < factor:
        raise ValueError(f"image size {h}x{w} must be a positive multiple of the downsampling factor {factor}")
    samples = [generate_sample(spec, (h, w), seed, start + i) for i in range(n)]
    return Dataset(
        spec=spec,
        seed=seed,
        images=np.stack([s.image for s in samples]),
        depths=np.stack([s.depth for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        clean_depths=np.stack([s.clean_depth for s in samples]),
        indices=np.arange(start, start + n, dtype=np.int64),
        scenes=[s.scene for s in samples],
    )


def generate_split(spec: DomainSpec, n_train: int, n_test: int, size: tuple[int, int] = (64, 64),
                   seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train uses indices [0, n_train), test uses [n_train, n_train + n_test)."""
    return (generate_domain(spec, n_train, size, seed),
            generate_domain(spec, n_test, size, seed, start=n_train))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    meta = {"spec": ds.spec.to_dict(), "seed": ds.seed, "count": len(ds), "size": list(ds.size),
            "scenes": ds.scenes}
    container.write(path, "dataset", meta, {
        "images": ds.images, "depths": ds.depths, "masks": ds.masks,
        "clean_depths": ds.clean_depths, "indices": ds.indices,
    })


def load_dataset(path: str | Path) -> Dataset:
    meta, arr = container.read(path, "dataset")
    return Dataset(DomainSpec.from_dict(meta["spec"]), meta["seed"], arr["images"], arr["depths"],
                   arr["masks"].astype(bool), arr["clean_depths"], arr["indices"], meta["scenes"])
