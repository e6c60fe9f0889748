"""Dataset layout adapters and image/label/FOV loading.

Canonical on-disk layout (8-bit PNG is the interchange format for all
generated maps; source images may also be .tif/.jpg):

    <root>/images/<stem>.png|.tif|.jpg
    <root>/labels/<stem>.png     vessel = 255
    <root>/fov/<stem>.png        inside = 255 (optional for CHASE_DB1,
                                 auto-generated when absent)

Files pair by shared stem. Samples keep images as 8-bit HWC arrays and
binary maps as bool; Sample.tensor() yields the (1,3,H,W) float32 [0,1]
view the network consumes.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".gif")


class DataError(ValueError):
    pass


@dataclass
class Sample:
    """One training/eval unit; label and fov dims match the image."""
    image: np.ndarray   # (H, W, 3) uint8
    label: np.ndarray   # (H, W) bool
    fov: np.ndarray     # (H, W) bool
    id: str
    tag: str = "orig"

    def __post_init__(self):
        if self.label.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: label {self.label.shape} does not "
                            f"match image {self.image.shape[:2]}")
        if self.fov.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: fov {self.fov.shape} does not "
                            f"match image {self.image.shape[:2]}")

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def name(self):
        return self.id if self.tag == "orig" else f"{self.id}__{self.tag}"

    def tensor(self):
        """Image as (1, 3, H, W) float32 scaled to [0, 1]."""
        return (self.image.astype(np.float32) / 255.0
                ).transpose(2, 0, 1)[None]

    def with_maps(self, image, label, fov, tag=None):
        return replace(self, image=image, label=label, fov=fov,
                       tag=self.tag if tag is None else tag)


@dataclass
class DatasetSpec:
    name: str
    root: Path
    split: str          # "drive" | "chase-20/8" | "chase-14/14" | "hrf"
    crop_size: int
    iterations: int
    resize_hw: tuple = None   # HRF only: evaluate at this (H, W)


_DEFAULTS = {
    "drive": dict(split="drive", crop_size=512, iterations=100_000),
    "chase": dict(split="chase-20/8", crop_size=632, iterations=100_000),
    "hrf": dict(split="hrf", crop_size=588, iterations=70_000,
                resize_hw=(600, 900)),
}


def make_spec(name, root, chase_split="20/8"):
    name = name.lower()
    if name not in _DEFAULTS:
        raise DataError(f"unknown dataset {name!r}; expected one of "
                        f"{sorted(_DEFAULTS)}")
    kw = dict(_DEFAULTS[name])
    if name == "chase":
        if chase_split not in ("20/8", "14/14"):
            raise DataError(f"chase split must be 20/8 or 14/14, got "
                            f"{chase_split!r}")
        kw["split"] = f"chase-{chase_split}"
    return DatasetSpec(name=name, root=Path(root), **kw)


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr


def load_mask(path):
    return np.asarray(Image.open(path).convert("L")) > 127


def save_gray(path, arr):
    """Write a (H, W) uint8 array as an 8-bit grayscale PNG."""
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def save_mask(path, mask):
    save_gray(path, np.where(mask, 255, 0).astype(np.uint8))


def save_image(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


def list_image_stems(root):
    images_dir = Path(root) / "images"
    if not images_dir.is_dir():
        raise DataError(f"missing directory: {images_dir}")
    stems = {}
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            stems[p.stem] = p
    if not stems:
        raise DataError(f"no images found under {images_dir}")
    return stems


def _load_sample(root, stem, img_path, fov_optional):
    from .augment import fov_generate

    image = load_image(img_path)
    label_path = Path(root) / "labels" / f"{stem}.png"
    if not label_path.is_file():
        raise DataError(f"missing label file: {label_path}")
    label = load_mask(label_path)
    fov_path = Path(root) / "fov" / f"{stem}.png"
    if fov_path.is_file():
        fov = load_mask(fov_path)
    elif fov_optional:
        fov = fov_generate(image)
    else:
        raise DataError(f"missing FOV mask: {fov_path}")
    return Sample(image=image, label=label, fov=fov, id=stem)


def _split_stems(spec, stems):
    ordered = sorted(stems)
    if spec.split == "drive":
        # official stems name their membership; otherwise the first 20 of the
        # 40 sorted stems are the test images (official numbering: 01..20
        # test, 21..40 training)
        train = [s for s in ordered if "train" in s.lower()]
        test = [s for s in ordered if "test" in s.lower()]
        if len(train) + len(test) == len(ordered) and train and test:
            return train, test
        return ordered[20:], ordered[:20]
    if spec.split.startswith("chase-"):
        n_train = 20 if spec.split.endswith("20/8") else 14
        return ordered[:n_train], ordered[n_train:]
    if spec.split == "hrf":
        return ordered[:15], ordered[15:]
    raise DataError(f"unknown split rule {spec.split!r}")


def load_split(spec):
    """Load (train, test) sample lists in deterministic order."""
    from .augment import hrf_resize

    stems = list_image_stems(spec.root)
    train_stems, test_stems = _split_stems(spec, stems)
    fov_optional = spec.name == "chase"

    def load_many(names):
        out = []
        for stem in names:
            s = _load_sample(spec.root, stem, stems[stem], fov_optional)
            if spec.resize_hw is not None:
                s = hrf_resize(s, spec.resize_hw)
            out.append(s)
        return out

    return load_many(train_stems), load_many(test_stems)


def load_augmented(root):
    """Load a pre-built augmented training set (cmd: dpn augment)."""
    stems = list_image_stems(root)
    out = []
    for stem, img_path in sorted(stems.items()):
        base, _, tag = stem.partition("__")
        s = _load_sample(root, stem, img_path, fov_optional=False)
        s.id, s.tag = base, tag or "orig"
        out.append(s)
    return out
