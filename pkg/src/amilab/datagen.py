"""Procedural "attribute-face" images.

Each class is one combination of glyph variants (eyes x nose x mouth by
default). Attribute regions are rendered clean: the jittered glyph stamp on a
zero backdrop. Pixels outside every region carry uniform noise in
``[0, noise]``. Keeping the regions noise-free means a region is fully
described by (variant, jitter offset), which makes substitution exact and
reversible.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AttributeLookupError, ConfigurationError, FormatError
from .rng import Rng

DATASET_MAGIC = b"AMLD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    region: tuple[int, int, int, int]  # row, col, height, width
    variants: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.variants) < 2:
            raise ConfigurationError(f"attribute {self.name!r} needs at least 2 variants")
        shapes = {v.shape for v in self.variants}
        if len(shapes) != 1:
            raise ConfigurationError(f"attribute {self.name!r} variants differ in shape")

    @property
    def stamp_shape(self) -> tuple[int, int]:
        return self.variants[0].shape

    def contains(self, r: int, c: int) -> bool:
        r0, c0, h, w = self.region
        return r0 <= r < r0 + h and c0 <= c < c0 + w

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        r0, c0, h, w = self.region
        m[r0:r0 + h, c0:c0 + w] = True
        return m

    def render(self, variant: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
        """Region-sized patch with the stamp centred, shifted by ``offset``."""
        r0, c0, h, w = self.region
        sh, sw = self.stamp_shape
        top = (h - sh) // 2 + int(offset[0])
        left = (w - sw) // 2 + int(offset[1])
        if top < 0 or left < 0 or top + sh > h or left + sw > w:
            raise ConfigurationError(f"offset {offset} pushes {self.name!r} glyph outside its region")
        patch = np.zeros((h, w), dtype=np.float64)
        patch[top:top + sh, left:left + sw] = self.variants[variant]
        return patch

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "region": list(self.region),
            "variants": [v.astype(int).tolist() for v in self.variants],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AttributeSpec":
        return cls(d["name"], tuple(d["region"]), tuple(np.array(v, dtype=np.float64) for v in d["variants"]))


def _stamp(rows: list[str]) -> np.ndarray:
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])


def default_attributes(jitter: int = 1) -> list[AttributeSpec]:
    """Eyes, nose and mouth, two stamps each, stacked top to bottom on a 16x16 canvas (jitter <= 1)."""
    eyes = (
        _stamp(["##....##", "##....##", "........"]),
        _stamp(["###..###", "........", "###..###"]),
    )
    nose = (
        _stamp([".##.", ".##.", ".##.", "####"]),
        _stamp(["#...", "##..", "###.", "####"]),
    )
    mouth = (
        _stamp(["#......#", ".######.", "........"]),
        _stamp(["........", "########", "........"]),
    )
    pad = 2 * jitter
    top = (16 - (10 + 3 * pad)) // 2
    wide = (16 - (8 + pad)) // 2
    narrow = (16 - (4 + pad)) // 2
    return [
        AttributeSpec("eyes", (top, wide, 3 + pad, 8 + pad), eyes),
        AttributeSpec("nose", (top + 3 + pad, narrow, 4 + pad, 4 + pad), nose),
        AttributeSpec("mouth", (top + 7 + 2 * pad, wide, 3 + pad, 8 + pad), mouth),
    ]


@dataclass
class DataConfig:
    classes: int = 8
    per_class: int = 200
    height: int = 16
    width: int = 16
    noise: float = 0.1
    jitter: int = 1
    seed: int = 42
    attributes: list[AttributeSpec] | None = None

    def resolved_attributes(self) -> list[AttributeSpec]:
        if self.attributes is not None:
            return self.attributes
        return default_attributes(self.jitter)


@dataclass
class Dataset:
    images: np.ndarray  # (count, 1, H, W)
    labels: np.ndarray  # (count,)
    attributes: list[AttributeSpec]
    attribute_table: list[tuple[int, ...]]
    offsets: np.ndarray  # (count, n_attributes, 2) jitter per glyph
    seed: int
    noise: float
    jitter: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.attribute_table)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def attribute(self, name: str) -> tuple[int, AttributeSpec]:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i, a
        raise AttributeLookupError(f"unknown attribute {name!r}")

    def variant_of(self, index: int, name: str) -> int:
        ai, _ = self.attribute(name)
        return self.attribute_table[int(self.labels[index])][ai]

    def substitute(self, index: int, name: str, donor_variant: int) -> np.ndarray:
        """Image ``index`` with attribute ``name`` re-rendered as ``donor_variant``."""
        ai, spec = self.attribute(name)
        return substitute_region(self.images[index], spec, donor_variant, tuple(self.offsets[index, ai]))

    def region_masks(self) -> np.ndarray:
        h, w = self.images.shape[2:]
        return np.stack([a.mask(h, w) for a in self.attributes])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.attributes, self.attribute_table,
                       self.offsets[idx], self.seed, self.noise, self.jitter, dict(self.extra))

    def digest(self) -> str:
        return hashlib.sha256(dataset_to_bytes(self)).hexdigest()


def substitute_region(image: np.ndarray, spec: AttributeSpec, donor_variant: int,
                      offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    if not 0 <= donor_variant < len(spec.variants):
        raise AttributeLookupError(f"{spec.name!r} has no variant {donor_variant}")
    out = np.array(image, dtype=np.float64, copy=True)
    r0, c0, h, w = spec.region
    out[..., r0:r0 + h, c0:c0 + w] = spec.render(donor_variant, offset)
    return out


def _check_regions(attrs: list[AttributeSpec], height: int, width: int, jitter: int) -> None:
    masks = []
    for a in attrs:
        r0, c0, h, w = a.region
        if r0 < 0 or c0 < 0 or r0 + h > height or c0 + w > width:
            raise ConfigurationError(f"region of {a.name!r} leaves the {height}x{width} image")
        sh, sw = a.stamp_shape
        if sh + 2 * jitter > h or sw + 2 * jitter > w:
            raise ConfigurationError(f"region of {a.name!r} too small for jitter {jitter}")
        masks.append(a.mask(height, width))
    if len({a.name for a in attrs}) != len(attrs):
        raise ConfigurationError("duplicate attribute names")
    if np.any(np.sum(masks, axis=0) > 1):
        raise ConfigurationError("attribute regions overlap")


def generate(config: DataConfig) -> Dataset:
    """Render ``classes * per_class`` images, class-major.

    Stream order per image: ``H*W`` noise draws, then two jitter draws per
    attribute. The first ``classes`` variant combinations in lexicographic
    order become the classes.
    """
    attrs = config.resolved_attributes()
    _check_regions(attrs, config.height, config.width, config.jitter)
    combos = list(itertools.product(*(range(len(a.variants)) for a in attrs)))
    if config.classes < 1 or config.classes > len(combos):
        raise ConfigurationError(f"{config.classes} classes requested but only {len(combos)} variant combinations exist")
    if config.per_class < 1:
        raise ConfigurationError("per_class must be positive")
    table = combos[: config.classes]
    rng = Rng(config.seed)
    count = config.classes * config.per_class
    h, w = config.height, config.width
    images = np.empty((count, 1, h, w), dtype=np.float64)
    offsets = np.zeros((count, len(attrs), 2), dtype=np.int64)
    labels = np.repeat(np.arange(config.classes, dtype=np.int64), config.per_class)
    for i in range(count):
        img = rng.random(h * w).reshape(h, w) * config.noise
        offs = rng.integers(-config.jitter, config.jitter, 2 * len(attrs)).reshape(len(attrs), 2)
        for ai, a in enumerate(attrs):
            img = substitute_region(img, a, table[labels[i]][ai], tuple(offs[ai]))
        images[i, 0] = img
        offsets[i] = offs
    return Dataset(images, labels, attrs, table, offsets, config.seed, config.noise, config.jitter)


def decode_variants(image: np.ndarray, attrs: list[AttributeSpec], jitter: int) -> tuple[int, ...]:
    """Recover (variant per attribute) from a clean image by exhaustive matching."""
    img = np.asarray(image).reshape(np.shape(image)[-2:])
    found = []
    for a in attrs:
        r0, c0, h, w = a.region
        patch = img[r0:r0 + h, c0:c0 + w]
        hits = [
            v for v in range(len(a.variants))
            for dy in range(-jitter, jitter + 1) for dx in range(-jitter, jitter + 1)
            if np.array_equal(patch, a.render(v, (dy, dx)))
        ]
        if len(set(hits)) != 1:
            raise ValueError(f"could not decode attribute {a.name!r}")
        found.append(hits[0])
    return tuple(found)


# ---------------------------------------------------------------- binary format


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def dataset_to_bytes(ds: Dataset, trailer_extra: dict | None = None) -> bytes:
    """Serialize as ``AMLD``: header, f64 LE images, u32 LE labels, u32-length JSON trailer."""
    count, _, h, w = ds.images.shape
    trailer = {
        "attributes": [a.to_json() for a in ds.attributes],
        "attribute_table": [list(r) for r in ds.attribute_table],
        "offsets": ds.offsets.tolist(),
        "seed": int(ds.seed),
        "noise": float(ds.noise),
        "jitter": int(ds.jitter),
        "extra": ds.extra,
    }
    if trailer_extra:
        trailer.update(trailer_extra)
    body = canonical_json(trailer)
    parts = [
        DATASET_MAGIC,
        struct.pack("<5I", DATASET_VERSION, ds.num_classes, count, h, w),
        ds.images.astype("<f8").tobytes(order="C"),
        ds.labels.astype("<u4").tobytes(),
        struct.pack("<I", len(body)),
        body,
    ]
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> tuple[Dataset, dict]:
    """Inverse of :func:`dataset_to_bytes`; also returns the raw trailer dict."""
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    try:
        version, k, count, h, w = struct.unpack_from("<5I", buf, 4)
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        pos = 24
        n_img = count * h * w
        images = np.frombuffer(buf, dtype="<f8", count=n_img, offset=pos).astype(np.float64).reshape(count, 1, h, w)
        pos += 8 * n_img
        labels = np.frombuffer(buf, dtype="<u4", count=count, offset=pos).astype(np.int64)
        pos += 4 * count
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n != len(buf):
            raise FormatError("trailing bytes after JSON trailer")
        trailer = json.loads(buf[pos:pos + n].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt dataset file: {exc}") from exc
    attrs = [AttributeSpec.from_json(a) for a in trailer["attributes"]]
    table = [tuple(r) for r in trailer["attribute_table"]]
    if len(table) != k:
        raise FormatError("class count in header disagrees with attribute table")
    offsets = np.array(trailer["offsets"], dtype=np.int64).reshape(count, len(attrs), 2)
    ds = Dataset(images, labels, attrs, table, offsets, trailer["seed"], trailer["noise"], trailer["jitter"],
                 trailer.get("extra", {}))
    return ds, trailer


def save_dataset(ds: Dataset, path, trailer_extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds, trailer_extra))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())[0]
