"""Image/mask loading, mask export, manifests, and the synthetic blob dataset.

PGM/PPM is the zero-dependency interchange format; PNG is handled through
Pillow when available. Masks are binarized at 128/255 on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataIOError
from .tensor import Tensor, resize_bilinear_array

MASK_THRESHOLD = 128


@dataclass
class Sample:
    image: Tensor  # [1, 3, h, w] in [0, 1]
    mask: Tensor  # [1, 1, h, w] in {0, 1}
    id: str = ""

    def __post_init__(self):
        ish, msh = self.image.shape, self.mask.shape
        if len(ish) != 4 or ish[1] != 3:
            raise ContractViolation(f"sample image must be [1,3,h,w], got {ish}")
        if len(msh) != 4 or msh[1] != 1 or msh[2:] != ish[2:]:
            raise ContractViolation(
                f"sample mask {msh} does not match image {ish}"
            )
        vals = np.unique(self.mask.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ContractViolation("sample mask must be strictly binary")


@dataclass
class Manifest:
    name: str
    entries: list = field(default_factory=list)
    expected_count: int = None

    def __post_init__(self):
        paths = [p for pair in self.entries for p in pair]
        if len(set(paths)) != len(paths):
            raise ContractViolation(f"manifest {self.name}: duplicate paths")
        if (self.expected_count is not None
                and len(self.entries) != self.expected_count):
            raise ContractViolation(
                f"manifest {self.name}: {len(self.entries)} entries, "
                f"expected {self.expected_count}"
            )


def read_manifest(path) -> Manifest:
    """Tab-separated `image<TAB>mask` per line; `#` starts a comment."""
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ContractViolation(
                        f"{path}:{lineno}: expected image<TAB>mask"
                    )
                entries.append((parts[0], parts[1]))
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    name = os.path.splitext(os.path.basename(path))[0]
    return Manifest(name=name, entries=entries)


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for img, mask in entries:
            fh.write(f"{img}\t{mask}\n")


# ---------------------------------------------------------------------------
# pixel IO


def _read_pnm(path):
    """Returns uint8 array, [h, w] for PGM or [h, w, 3] for PPM."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    i = 0
    while len(fields) < 4 and i < len(raw):
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] not in b"\r\n":
                i += 1
        elif raw[i : i + 1].isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            fields.append(raw[i:j])
            i = j
    if len(fields) < 4:
        raise DataIOError(f"{path}: truncated PNM header")
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DataIOError(f"{path}: unsupported PNM magic {magic!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise DataIOError(f"{path}: only 8-bit PNM supported")
    i += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    pixels = np.frombuffer(raw[i : i + need], dtype=np.uint8)
    if pixels.size != need:
        raise DataIOError(f"{path}: truncated PNM payload")
    arr = pixels.reshape(h, w, channels)
    return arr[:, :, 0] if channels == 1 else arr


def _write_pnm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        header = f"P5 {arr.shape[1]} {arr.shape[0]} 255\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = f"P6 {arr.shape[1]} {arr.shape[0]} 255\n"
    else:
        raise ContractViolation(f"cannot write PNM of shape {arr.shape}")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(arr.tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_image_u8(path):
    """8-bit image as [h, w] or [h, w, 3] uint8; PGM/PPM native, PNG via Pillow."""
    if not os.path.exists(path):
        raise DataIOError(f"no such file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataIOError(
            f"{path}: non-PNM formats need Pillow installed"
        ) from exc
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        return np.asarray(im, dtype=np.uint8)


def write_image_u8(path, arr):
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        _write_pnm(path, arr)
        return
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataIOError(f"{path}: non-PNM formats need Pillow") from exc
    try:
        Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def resize_nearest(arr, target_h, target_w):
    h, w = arr.shape[:2]
    rows = np.minimum(np.floor((np.arange(target_h) + 0.5) * h / target_h), h - 1)
    cols = np.minimum(np.floor((np.arange(target_w) + 0.5) * w / target_w), w - 1)
    return arr[rows.astype(int)][:, cols.astype(int)]


def load_sample(image_path, mask_path, target=None) -> Sample:
    """Load an RGB image and binary mask, resizing to `target` (h, w)."""
    img = read_image_u8(image_path)
    mask = read_image_u8(mask_path)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    if target is not None:
        th, tw = target
        img = resize_bilinear_array(
            img.astype(np.float64).transpose(2, 0, 1), th, tw
        ).transpose(1, 2, 0)
        mask = resize_nearest(mask, th, tw)
    imgf = np.asarray(img, dtype=np.float64) / 255.0
    maskb = (np.asarray(mask) >= MASK_THRESHOLD).astype(np.float64)
    sample_id = os.path.splitext(os.path.basename(image_path))[0]
    return Sample(
        image=Tensor(imgf.transpose(2, 0, 1)[None]),
        mask=Tensor(maskb[None, None]),
        id=sample_id,
    )


def write_mask(mask_prob, path):
    """Write a probability map as an 8-bit grayscale image (round-half-up)."""
    arr = mask_prob.data if isinstance(mask_prob, Tensor) else np.asarray(mask_prob)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ContractViolation(f"write_mask needs a 2-d map, got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ContractViolation("write_mask values must be in [0, 1]")
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    write_image_u8(path, q)


# ---------------------------------------------------------------------------
# synthetic data


def _value_noise(rs, h, w, cells=8):
    grid = rs.uniform(0.0, 1.0, size=(cells, cells))
    return resize_bilinear_array(grid, h, w)


def _ellipse_mask(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * dx + st * dy) / rx
    v = (-st * dx + ct * dy) / ry
    return u * u + v * v <= 1.0


def synth_generate(seed, count, size):
    """Deterministic textured backgrounds with 1-3 elliptical blobs.

    Foreground fraction of every mask lands in [0.02, 0.4] by construction
    (blob radii are resampled until the union fits the band).
    """
    h, w = (size, size) if isinstance(size, int) else size
    if h % 32 or w % 32:
        raise ConfigurationError(f"size must be divisible by 32, got {h}x{w}")
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    rs = np.random.RandomState(seed)
    samples = []
    for i in range(count):
        base = np.array([0.55, 0.35, 0.30]) + rs.uniform(-0.1, 0.1, 3)
        img = np.empty((3, h, w))
        for c in range(3):
            img[c] = np.clip(
                base[c] + 0.25 * (_value_noise(rs, h, w) - 0.5), 0.0, 1.0
            )
        for attempt in range(100):
            nblobs = rs.randint(1, 4)
            mask = np.zeros((h, w), dtype=bool)
            blobs = []
            for _ in range(nblobs):
                cy = rs.uniform(0.25 * h, 0.75 * h)
                cx = rs.uniform(0.25 * w, 0.75 * w)
                ry = rs.uniform(0.12 * h, 0.24 * h)
                rx = ry * rs.uniform(0.75, 1.33)  # bounded eccentricity
                theta = rs.uniform(0, np.pi)
                blobs.append((cy, cx, ry, rx, theta))
                mask |= _ellipse_mask(h, w, cy, cx, ry, rx, theta)
            frac = mask.mean()
            if 0.02 <= frac <= 0.4:
                break
        else:
            raise ContractViolation("synthetic blob sampling failed to converge")
        # soft-edged color shift over the blob region
        soft = resize_bilinear_array(
            resize_nearest(mask.astype(np.float64), h // 4, w // 4), h, w
        )
        soft = np.clip(soft, 0.0, 1.0)
        shift = rs.uniform(0.1, 0.25, 3)
        for c in range(3):
            img[c] = np.clip(img[c] + shift[c] * soft, 0.0, 1.0)
        samples.append(Sample(
            image=Tensor(img[None]),
            mask=Tensor(mask.astype(np.float64)[None, None]),
            id=f"synth_{seed}_{i:03d}",
        ))
    return samples
