"""Dataset plumbing: PNG pairs, manifests, splits, synthetic scenes.

Images are float32 in [0, 1] (pixel/255, no further normalization) shaped
(1, 3, H, W); masks are strictly binary float32 shaped (1, 1, H, W).
A dataset on disk is `images/*.png` + `masks/*.png` with matching stems,
optionally indexed by a `manifest.csv` with columns id,image,mask,split
(paths relative to the manifest's directory).
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, InvalidInputError, ShapeError
from .rng import Rng
from .tensor import Tensor

MASK_THRESHOLD = 128  # stored masks are 0/255; anything >= this reads as 1


@dataclass
class SamplePair:
    sample_id: str
    image: Tensor   # (1, 3, H, W) float32 in [0, 1]
    mask: Tensor    # (1, 1, H, W) float32 binary

    def __post_init__(self):
        si, sm = self.image.data.shape, self.mask.data.shape
        if si[0] != 1 or si[1] != 3:
            raise ShapeError(f"sample image must be (1,3,H,W), got {si}")
        if sm != (1, 1, si[2], si[3]):
            raise ShapeError(f"sample mask must be (1,1,{si[2]},{si[3]}), got {sm}")
        if self.image.data.min() < 0.0 or self.image.data.max() > 1.0:
            raise InvalidInputError(f"sample {self.sample_id}: image outside [0, 1]")
        md = self.mask.data
        if not np.all((md == 0.0) | (md == 1.0)):
            raise InvalidInputError(f"sample {self.sample_id}: mask is not binary")


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    mask_path: str
    split: str = "train"


# ---------------------------------------------------------------------------
# PNG loading / saving
# ---------------------------------------------------------------------------


def _open_image(path: str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None


def load_pair(image_path: str, mask_path: str, sample_id: str | None = None,
              size: int | None = None) -> SamplePair:
    """Load one image/mask PNG pair as tensors.

    If `size` is given, the image is resized bilinearly and the mask with
    nearest so it stays binary; otherwise the two files must already agree
    on spatial dims.
    """
    img = _open_image(image_path).convert("RGB")
    msk = _open_image(mask_path).convert("L")
    if size is not None:
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        if msk.size != (size, size):
            msk = msk.resize((size, size), Image.NEAREST)
    if img.size != msk.size:
        raise DataError(f"size mismatch: image {img.size} vs mask {msk.size} "
                        f"({image_path}, {mask_path})")
    image = np.asarray(img, dtype=np.float32) / 255.0
    mask = (np.asarray(msk) >= MASK_THRESHOLD).astype(np.float32)
    if sample_id is None:
        sample_id = os.path.splitext(os.path.basename(image_path))[0]
    return SamplePair(sample_id,
                      Tensor(image.transpose(2, 0, 1)[None]),
                      Tensor(mask[None, None]))


def load_image(image_path: str, size: int | None = None) -> tuple[str, Tensor]:
    """Load a lone image (no mask) as (stem, (1,3,H,W) tensor in [0, 1])."""
    img = _open_image(image_path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return stem, Tensor(arr.transpose(2, 0, 1)[None])


def save_pair(pair: SamplePair, images_dir: str, masks_dir: str) -> None:
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    img = pair.image.data[0].transpose(1, 2, 0)
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(os.path.join(images_dir, pair.sample_id + ".png"))
    mask = (pair.mask.data[0, 0] * 255.0).astype(np.uint8)
    Image.fromarray(mask, mode="L").save(os.path.join(masks_dir, pair.sample_id + ".png"))


def save_mask_png(mask_hw: np.ndarray, path: str) -> None:
    """Write a binary (H, W) mask as an 8-bit 0/255 PNG."""
    arr = (np.asarray(mask_hw) != 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# manifests and directory scanning
# ---------------------------------------------------------------------------

_MANIFEST_COLUMNS = ["id", "image", "mask", "split"]


def write_manifest(entries: list[ManifestEntry], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow([e.sample_id, e.image_path, e.mask_path, e.split])


def read_manifest(path: str) -> list[ManifestEntry]:
    """Read a manifest; relative paths stay relative to the manifest's dir."""
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _MANIFEST_COLUMNS:
            raise DataError(f"manifest {path}: expected header "
                            f"{','.join(_MANIFEST_COLUMNS)}, got {header}")
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"manifest {path} line {lineno}: expected 4 columns")
            sample_id, image_rel, mask_rel, split = row
            entries.append(ManifestEntry(sample_id,
                                         os.path.join(base, image_rel),
                                         os.path.join(base, mask_rel),
                                         split))
    return entries


def scan_directory(root: str) -> list[ManifestEntry]:
    """Entries from images/ + masks/ with matching stems (all split 'train')."""
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isdir(images_dir):
        raise DataError(f"no images/ directory under {root}")
    entries = []
    for name in sorted(os.listdir(images_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() != ".png":
            continue
        mask_path = os.path.join(masks_dir, name)
        if not os.path.isfile(mask_path):
            raise DataError(f"missing mask for {name} under {masks_dir}")
        entries.append(ManifestEntry(stem, os.path.join(images_dir, name), mask_path))
    if not entries:
        raise DataError(f"no PNG images under {images_dir}")
    return entries


def load_dataset(root: str, split: str = "all", size: int | None = None) -> list[SamplePair]:
    """Load pairs from a dataset directory, via manifest.csv when present."""
    manifest_path = os.path.join(root, "manifest.csv")
    if os.path.isfile(manifest_path):
        entries = read_manifest(manifest_path)
    else:
        entries = scan_directory(root)
    if split != "all":
        entries = [e for e in entries if e.split == split]
    if not entries:
        raise DataError(f"no samples with split {split!r} under {root}")
    return [load_pair(e.image_path, e.mask_path, e.sample_id, size=size)
            for e in entries]


def make_splits(entries: list[ManifestEntry], ratios: tuple[float, float, float],
                seed: int) -> list[ManifestEntry]:
    """Assign train/val/test splits by seeded shuffle.

    Non-train splits get floor(ratio * n) entries each and train takes the
    remainder, so e.g. 617 entries at (0.8, 0, 0.2) give 494 train / 123 test.
    Entry order is preserved; only the split labels change.
    """
    r_train, r_val, r_test = (float(r) for r in ratios)
    if min(r_train, r_val, r_test) < 0 or abs(r_train + r_val + r_test - 1.0) > 1e-6:
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    n = len(entries)
    n_val = int(np.floor(r_val * n))
    n_test = int(np.floor(r_test * n))
    n_train = n - n_val - n_test
    perm = Rng(seed).permutation(n)
    labels = [""] * n
    for pos, idx in enumerate(perm):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return [replace(e, split=labels[i]) for i, e in enumerate(entries)]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

FG_FRACTION_RANGE = (0.01, 0.6)
_MAX_SCENE_TRIES = 100


def _draw_scene(rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    count = 1 + rng.index(3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    regions = []
    for _ in range(count):
        cx = (0.15 + 0.7 * rng.uniform(1)[0]) * size
        cy = (0.15 + 0.7 * rng.uniform(1)[0]) * size
        rx = (0.06 + 0.22 * rng.uniform(1)[0]) * size
        ry = (0.06 + 0.22 * rng.uniform(1)[0]) * size
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        regions.append(inside)
        mask |= inside
    background = 0.2 + 0.15 * rng.uniform(3)
    image = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        image[c] = background[c]
    for inside in regions:
        color = 0.7 + 0.2 * rng.uniform(3)
        for c in range(3):
            image[c][inside] = color[c]
    noise = rng.normal(3 * size * size, std=0.03).reshape(3, size, size)
    image = np.clip(image + noise, 0.0, 1.0)
    return image.astype(np.float32), mask.astype(np.float32)


def synth_dataset(count: int, seed: int, size: int = 256) -> list[SamplePair]:
    """Seeded synthetic blobs: 1-3 filled ellipses on a dark background.

    Foreground/background contrast is strong by construction and each mask's
    foreground fraction is forced into FG_FRACTION_RANGE by redrawing the
    scene (the RNG stream keeps advancing, so results stay reproducible).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = Rng(seed)
    pairs = []
    lo, hi = FG_FRACTION_RANGE
    for k in range(count):
        for _ in range(_MAX_SCENE_TRIES):
            image, mask = _draw_scene(rng, size)
            fraction = float(mask.mean())
            if lo <= fraction <= hi:
                break
        else:
            raise RuntimeError(f"could not draw a scene with foreground fraction "
                               f"in {FG_FRACTION_RANGE} after {_MAX_SCENE_TRIES} tries")
        pairs.append(SamplePair(f"synth{k:04d}",
                                Tensor(image[None]),
                                Tensor(mask[None, None])))
    return pairs


def save_dataset(pairs: list[SamplePair], root: str,
                 splits: list[str] | None = None) -> str:
    """Write pairs under root/images + root/masks and emit a manifest.csv."""
    os.makedirs(root, exist_ok=True)
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    entries = []
    for i, pair in enumerate(pairs):
        save_pair(pair, images_dir, masks_dir)
        split = splits[i] if splits is not None else "train"
        entries.append(ManifestEntry(pair.sample_id,
                                     os.path.join("images", pair.sample_id + ".png"),
                                     os.path.join("masks", pair.sample_id + ".png"),
                                     split))
    manifest_path = os.path.join(root, "manifest.csv")
    write_manifest(entries, manifest_path)
    return manifest_path
