"""Image ingestion and patch extraction.

Pipeline: 8-bit RGB -> full-range BT.601 YCbCr in [0, 1] -> 4:2:0 chroma
(2x2 mean) -> luma downsampled to chroma resolution with the 6-tap
``[1 2 1; 1 2 1] / 8`` filter -> aligned N x N blocks with their reference
arrays.

Reference array layout (length ``2N + 1``): left column read bottom to top,
then the top-left corner, then the top row read left to right. Samples outside
the picture are replaced by ``PAD_VALUE``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError, ShapeError

PAD_VALUE = 0.5

# full-range BT.601, rows give Y, Cb, Cr from normalized R, G, B
BT601 = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
CHROMA_OFFSET = 0.5

IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass
class YCbCrImage:
    y: np.ndarray  # (H, W)
    cb: np.ndarray  # (ceil(H/2), ceil(W/2))
    cr: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        want = ((h + 1) // 2, (w + 1) // 2)
        if self.cb.shape != want or self.cr.shape != want:
            raise ShapeError(f"chroma planes {self.cb.shape}/{self.cr.shape} inconsistent with luma {self.y.shape} in 4:2:0")


@dataclass
class PatchSample:
    luma: np.ndarray  # X, (N, N)
    boundary: np.ndarray  # S, (3, 2N+1), rows Y, Cb, Cr
    target_cb: np.ndarray  # (N, N)
    target_cr: np.ndarray
    image_index: int = 0
    y: int = 0  # block origin in chroma samples
    x: int = 0

    @property
    def n(self) -> int:
        return self.luma.shape[-1]

    @property
    def target(self) -> np.ndarray:
        return np.stack([self.target_cb, self.target_cr])


@dataclass
class DatasetManifest:
    block_size: int
    sample_count: int
    seed: int
    per_image: int
    images: list[str] = field(default_factory=list)
    per_image_counts: list[int] = field(default_factory=list)


# --------------------------------------------------------------------------
# colour and resampling


def load_rgb(path) -> np.ndarray:
    """Read a PNG or binary PPM as an ``(H, W, 3)`` uint8 array."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P", "LA", "1"):
            raise FormatError(f"{path}: unsupported image mode {im.mode!r}; only 8-bit images are accepted")
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _chroma_420(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    p = np.pad(plane, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def rgb_to_ycbcr(rgb: np.ndarray) -> YCbCrImage:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise FormatError(f"expected 8-bit RGB input, got dtype {rgb.dtype}")
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB array, got shape {rgb.shape}")
    ycc = (rgb.astype(np.float64) / 255.0) @ BT601.T
    ycc[..., 1:] += CHROMA_OFFSET
    ycc = np.clip(ycc, 0.0, 1.0)
    return YCbCrImage(ycc[..., 0], _chroma_420(ycc[..., 1]), _chroma_420(ycc[..., 2]))


def downsample_luma_420(y: np.ndarray) -> np.ndarray:
    """Downsample a luma plane or region by two with the 6-tap 4:2:0 filter.

    Output sample ``(r, c)`` averages rows ``2r, 2r+1`` and columns
    ``2c-1, 2c, 2c+1`` with weights ``[1 2 1]`` per row, normalized by 8.
    Taps outside the array replicate the nearest edge sample. Odd extents
    round up.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"expected a 2-D luma plane, got shape {y.shape}")
    h, w = y.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    rows0 = np.arange(ho) * 2
    rows1 = np.minimum(rows0 + 1, h - 1)
    cols = np.arange(wo) * 2
    left, right = np.maximum(cols - 1, 0), np.minimum(cols + 1, w - 1)
    out = np.zeros((ho, wo))
    for rows in (rows0, rows1):
        r = y[rows]
        out += r[:, left] + 2.0 * r[:, cols] + r[:, right]
    return out / 8.0


def bilinear_rescale(rgb: np.ndarray, factor: int) -> np.ndarray:
    """Shrink an RGB image by an integer factor with bilinear resampling."""
    if factor == 1:
        return rgb
    h, w = rgb.shape[:2]
    size = (max(1, w // factor), max(1, h // factor))
    return np.asarray(Image.fromarray(rgb).resize(size, Image.BILINEAR), dtype=np.uint8)


# --------------------------------------------------------------------------
# references and blocks


def build_reference_array(plane: np.ndarray, origin: tuple[int, int], n: int, pad: float = PAD_VALUE) -> np.ndarray:
    """Reference samples of the ``n x n`` block at ``origin = (row, col)``."""
    y0, x0 = origin
    h, w = plane.shape

    def at(r, c):
        return float(plane[r, c]) if 0 <= r < h and 0 <= c < w else pad

    left = [at(y0 + k, x0 - 1) for k in range(n - 1, -1, -1)]
    corner = [at(y0 - 1, x0 - 1)]
    top = [at(y0 - 1, x0 + k) for k in range(n)]
    return np.array(left + corner + top)


def assemble_boundary_volume(b_y, b_cb, b_cr) -> np.ndarray:
    arrays = [np.asarray(a, dtype=np.float64) for a in (b_y, b_cb, b_cr)]
    if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
        raise ShapeError(f"reference arrays must be 1-D with equal length, got {[a.shape for a in arrays]}")
    return np.stack(arrays)


def block_positions(chroma_shape: tuple[int, int], n: int) -> list[tuple[int, int]]:
    hc, wc = chroma_shape
    return [(r, c) for r in range(0, hc - n + 1, n) for c in range(0, wc - n + 1, n)]


def make_sample(img: YCbCrImage, luma_ds: np.ndarray, origin: tuple[int, int], n: int, image_index: int = 0) -> PatchSample:
    r, c = origin
    boundary = assemble_boundary_volume(
        build_reference_array(luma_ds, origin, n),
        build_reference_array(img.cb, origin, n),
        build_reference_array(img.cr, origin, n),
    )
    f32 = np.float32
    return PatchSample(
        luma=luma_ds[r:r + n, c:c + n].astype(f32),
        boundary=boundary.astype(f32),
        target_cb=img.cb[r:r + n, c:c + n].astype(f32),
        target_cr=img.cr[r:r + n, c:c + n].astype(f32),
        image_index=image_index,
        y=r,
        x=c,
    )


def extract_patches(img: YCbCrImage, n: int, m: int, seed, image_index: int = 0) -> list[PatchSample]:
    """Draw ``min(m, available)`` distinct block-aligned patches uniformly."""
    positions = block_positions(img.cb.shape, n)
    if not positions:
        raise ShapeError(f"image with chroma planes {img.cb.shape} is smaller than one {n}x{n} block")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(positions), size=min(m, len(positions)), replace=False))
    luma_ds = downsample_luma_420(img.y)
    return [make_sample(img, luma_ds, positions[i], n, image_index) for i in pick]


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def extract_from_image(path, index: int, n: int, m: int, seed: int, pyramid: bool = False) -> list[PatchSample]:
    """Per-image extraction with a seed derived from ``(seed, index)``.

    With ``pyramid`` set, one of the scales 1, 1/2, 1/3, 1/4 is drawn first
    and the image is bilinearly shrunk to it.
    """
    rng = np.random.default_rng([seed, index])
    rgb = load_rgb(path)
    if pyramid:
        rgb = bilinear_rescale(rgb, int(rng.choice([1, 2, 3, 4])))
    return extract_patches(rgb_to_ycbcr(rgb), n, m, rng, image_index=index)


# --------------------------------------------------------------------------
# "ACPD" dataset files

DATASET_MAGIC = b"ACPD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


def record_floats(n: int) -> int:
    return 3 + n * n + 3 * (2 * n + 1) + 2 * n * n


def write_dataset(f: BinaryIO, samples: Sequence[PatchSample], n: int, seed: int) -> None:
    f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, len(samples), seed))
    for s in samples:
        if s.n != n:
            raise ShapeError(f"sample block size {s.n} does not match dataset block size {n}")
        rec = np.concatenate(
            [
                np.array([s.image_index, s.y, s.x], dtype=np.float32),
                s.luma.ravel(),
                s.boundary.ravel(),
                s.target_cb.ravel(),
                s.target_cr.ravel(),
            ]
        )
        f.write(rec.astype("<f4").tobytes())


def read_dataset(f: BinaryIO) -> tuple[list[PatchSample], int, int]:
    """Return ``(samples, block_size, seed)``."""
    head = f.read(_HEADER.size)
    if len(head) < 4 or head[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic: expected {DATASET_MAGIC!r}, found {head[:4]!r}")
    if len(head) != _HEADER.size:
        raise FormatError(f"truncated dataset header: {len(head)} of {_HEADER.size} bytes")
    _, version, n, count, seed = _HEADER.unpack(head)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version} (expected {DATASET_VERSION})")
    nf = record_floats(n)
    b = 2 * n + 1
    samples = []
    for k in range(count):
        raw = f.read(4 * nf)
        if len(raw) != 4 * nf:
            offset = _HEADER.size + 4 * nf * k
            raise FormatError(f"truncated dataset: record {k} of {count} at byte offset {offset} has {len(raw)} of {4 * nf} bytes")
        v = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        i = 3
        luma = v[i:i + n * n].reshape(n, n); i += n * n
        boundary = v[i:i + 3 * b].reshape(3, b); i += 3 * b
        cb = v[i:i + n * n].reshape(n, n); i += n * n
        cr = v[i:i + n * n].reshape(n, n)
        samples.append(PatchSample(luma, boundary, cb, cr, int(v[0]), int(v[1]), int(v[2])))
    return samples, n, seed


def save_dataset(path, samples: Sequence[PatchSample], n: int, seed: int) -> None:
    with open(path, "wb") as f:
        write_dataset(f, samples, n, seed)


def load_dataset(path) -> tuple[list[PatchSample], int, int]:
    with open(path, "rb") as f:
        return read_dataset(f)


def manifest_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest")


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [
        f"block_size = {manifest.block_size}",
        f"sample_count = {manifest.sample_count}",
        f"seed = {manifest.seed}",
        f"per_image = {manifest.per_image}",
    ]
    lines += [f"image = {name} {count}" for name, count in zip(manifest.images, manifest.per_image_counts)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    values: dict[str, str] = {}
    images, counts = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, val = key.strip(), val.strip()
        if key == "image":
            name, _, count = val.rpartition(" ")
            images.append(name)
            counts.append(int(count))
        else:
            values[key] = val
    try:
        return DatasetManifest(
            int(values["block_size"]), int(values["sample_count"]), int(values["seed"]), int(values["per_image"]), images, counts
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from None


def stack_batch(samples: Iterable[PatchSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into ``luma (B,1,N,N)``, ``boundary (B,3,b)``, ``target (B,2,N,N)``."""
    samples = list(samples)
    luma = np.stack([s.luma for s in samples])[:, None]
    boundary = np.stack([s.boundary for s in samples])
    target = np.stack([s.target for s in samples])
    return luma, boundary, target
