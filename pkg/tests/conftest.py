import numpy as np
import pytest
from PIL import Image


def synth_sample(rng, h, w):
    """Fundus-like synthetic image: bright disk on black, dark thin vessels.

    Returns (image uint8 HWC, label bool, fov bool).
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = 0.48 * min(h, w)
    fov = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2

    image = np.zeros((h, w, 3), np.uint8)
    base = int(rng.integers(150, 210))
    image[fov] = (base, base // 2, base // 4)
    image = image + rng.integers(0, 10, (h, w, 3)).astype(np.uint8)

    label = np.zeros((h, w), bool)
    for _ in range(8):
        ang = rng.uniform(0, np.pi)
        off = rng.uniform(-0.5, 0.5) * radius
        thick = int(rng.integers(1, 3))
        for t in np.arange(-radius, radius, 0.4):
            y = int(round(cy + t * np.sin(ang) + off * np.cos(ang)))
            x = int(round(cx + t * np.cos(ang) - off * np.sin(ang)))
            if 0 <= y < h and 0 <= x < w:
                label[y:y + thick, x:x + thick] = True
    label &= fov
    image[label] = (70, 25, 20)
    return image, label, fov


def write_dataset(root, names, h, w, seed=0, fov_for=None):
    """Write a canonical-layout dataset; fov_for limits which stems get a
    FOV file (None -> all)."""
    rng = np.random.default_rng(seed)
    for sub in ("images", "labels", "fov"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for name in names:
        image, label, fov = synth_sample(rng, h, w)
        Image.fromarray(image, "RGB").save(root / "images" / f"{name}.png")
        Image.fromarray(np.where(label, 255, 0).astype(np.uint8), "L").save(
            root / "labels" / f"{name}.png")
        if fov_for is None or name in fov_for:
            Image.fromarray(np.where(fov, 255, 0).astype(np.uint8),
                            "L").save(root / "fov" / f"{name}.png")


DRIVE_NAMES = [f"{i:02d}_test" for i in range(1, 21)] + \
              [f"{i:02d}_training" for i in range(21, 41)]
CHASE_NAMES = [f"Image_{i:02d}{s}" for i in range(1, 15) for s in "LR"]
HRF_NAMES = [f"{i:02d}_h" for i in range(1, 46)]


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory):
    """DRIVE-like synthetic set: 40 images at the native 565x584."""
    root = tmp_path_factory.mktemp("drive")
    write_dataset(root, DRIVE_NAMES, h=584, w=565, seed=1)
    return root


@pytest.fixture(scope="session")
def chase_root(tmp_path_factory):
    """CHASE-like synthetic set, reduced dims; half the FOV files missing."""
    root = tmp_path_factory.mktemp("chase")
    write_dataset(root, CHASE_NAMES, h=240, w=250, seed=2,
                  fov_for=set(CHASE_NAMES[::2]))
    return root


@pytest.fixture(scope="session")
def hrf_root(tmp_path_factory):
    """HRF-like synthetic set, reduced dims with the native 2:3 aspect."""
    root = tmp_path_factory.mktemp("hrf")
    write_dataset(root, HRF_NAMES, h=300, w=450, seed=3)
    return root


@pytest.fixture()
def sample_96(tmp_path):
    from dpn.data import Sample
    rng = np.random.default_rng(7)
    image, label, fov = synth_sample(rng, 96, 96)
    return Sample(image=image, label=label, fov=fov, id="s96")
