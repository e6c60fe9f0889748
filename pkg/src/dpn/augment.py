"""Offline augmentation and the per-iteration crop/mirror stream.

Each training image expands 11x: the original, horizontal and vertical
flips, and rotations by 22/45/90/135/180/225/270/315 degrees. Images are
resampled bilinearly, labels and FOV masks nearest-neighbor (they stay
binary); right-angle rotations are exact index permutations. Non-axis
rotations keep the canvas and zero-fill the corners.
"""

import logging

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DataError

log = logging.getLogger(__name__)

ROTATION_ANGLES = (22, 45, 90, 135, 180, 225, 270, 315)
HRF_NATIVE_HW = (2336, 3504)


def hflip(sample):
    return sample.with_maps(sample.image[:, ::-1].copy(),
                            sample.label[:, ::-1].copy(),
                            sample.fov[:, ::-1].copy(), tag="hflip")


def vflip(sample):
    return sample.with_maps(sample.image[::-1].copy(),
                            sample.label[::-1].copy(),
                            sample.fov[::-1].copy(), tag="vflip")


def rotate(sample, degrees):
    """Rotate about the image center. Right angles permute indices exactly
    (90/270 swap H and W); other angles keep the canvas, bilinear for the
    image, nearest-neighbor for the binary maps, zero fill outside."""
    if degrees not in ROTATION_ANGLES:
        raise DataError(f"rotate: angle {degrees} not in {ROTATION_ANGLES}")
    tag = f"rot{degrees}"
    if degrees % 90 == 0:
        k = degrees // 90
        return sample.with_maps(np.rot90(sample.image, k, axes=(0, 1)).copy(),
                                np.rot90(sample.label, k).copy(),
                                np.rot90(sample.fov, k).copy(), tag=tag)
    img = ndimage.rotate(sample.image.astype(np.float32), degrees,
                         axes=(1, 0), reshape=False, order=1,
                         mode="constant", cval=0.0)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    label = ndimage.rotate(sample.label.astype(np.uint8), degrees,
                           axes=(1, 0), reshape=False, order=0,
                           mode="constant", cval=0) > 0
    fov = ndimage.rotate(sample.fov.astype(np.uint8), degrees,
                         axes=(1, 0), reshape=False, order=0,
                         mode="constant", cval=0) > 0
    return sample.with_maps(img, label, fov, tag=tag)


def augment_offline(samples):
    """The 11x offline expansion, deterministic order per input sample."""
    out = []
    for s in samples:
        out.append(s)
        out.append(hflip(s))
        out.append(vflip(s))
        out.extend(rotate(s, a) for a in ROTATION_ANGLES)
    return out


def random_crop(sample, size, rng):
    """Uniform top-left corner; image, label and fov cropped jointly."""
    h, w = sample.height, sample.width
    if size > h or size > w:
        raise DataError(f"random_crop: size {size} exceeds sample "
                        f"{h}x{w} ({sample.name})")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return crop_at(sample, y0, x0, size)


def crop_at(sample, y0, x0, size):
    sl = np.s_[y0:y0 + size, x0:x0 + size]
    return sample.with_maps(sample.image[sl].copy(),
                            sample.label[sl].copy(),
                            sample.fov[sl].copy())


def random_mirror(sample, rng):
    """Horizontal flip with probability 1/2."""
    if rng.random() < 0.5:
        flipped = hflip(sample)
        flipped.tag = sample.tag
        return flipped
    return sample


def hrf_resize(sample, target_hw=(600, 900)):
    """Shrink a native-resolution HRF sample; evaluation stays at this size.

    Image bilinear, label/FOV nearest-neighbor (kept binary).
    """
    if (sample.height, sample.width) != HRF_NATIVE_HW:
        log.warning("hrf_resize: %s is %dx%d, expected %dx%d", sample.name,
                    sample.height, sample.width, *HRF_NATIVE_HW)
    th, tw = target_hw
    img = np.asarray(Image.fromarray(sample.image).resize(
        (tw, th), Image.BILINEAR))
    label = np.asarray(Image.fromarray(
        sample.label.astype(np.uint8) * 255).resize(
        (tw, th), Image.NEAREST)) > 127
    fov = np.asarray(Image.fromarray(
        sample.fov.astype(np.uint8) * 255).resize(
        (tw, th), Image.NEAREST)) > 127
    return sample.with_maps(img, label, fov)


def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def fov_generate(image, threshold_frac=0.1, close_radius=5):
    """Derive a field-of-view mask from a fundus image.

    Thresholds the red channel at a fraction of its max, keeps the largest
    connected component and closes it with a disk. Raises on degenerate
    (empty) results.
    """
    red = image[:, :, 0].astype(np.float32)
    peak = float(red.max())
    mask = red >= threshold_frac * peak if peak > 0 else np.zeros(
        red.shape, bool)
    if not mask.any():
        raise DataError("fov_generate: thresholding produced an empty mask")
    labels, n = ndimage.label(mask)
    if n > 1:
        counts = np.bincount(labels.reshape(-1))
        counts[0] = 0
        mask = labels == counts.argmax()
    mask = ndimage.binary_closing(mask, structure=_disk(close_radius))
    if not mask.any():
        raise DataError("fov_generate: morphology produced an empty mask")
    return mask
