"""Whole-image inference, the disk-to-disk timing protocol, evaluation."""

import logging
import statistics
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor
from .data import DataError, load_image, load_split, save_gray, save_mask
from .metrics import ImageEval, aggregate
from .model import dpn_forward

log = logging.getLogger(__name__)


def predict_probability(model, image_u8):
    """Forward one (H, W, 3) uint8 image; returns the (H, W) float32
    probability map of the final head."""
    x = (image_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    padded, (h0, w0) = tensor.pad_to_multiple(x, 4)
    logits = dpn_forward(padded, model)[-1]
    prob = tensor.sigmoid(tensor.crop(logits, h0, w0))
    return prob[0, 0]


def prob_to_png(prob):
    return np.rint(prob * 255.0).astype(np.uint8)


def predict_paths(model, paths, out_dir, threshold=0.5):
    """The fps protocol: per image, time from reading the raw file to
    writing both maps. Model load is amortized outside the timed region.

    Returns (results, n_failed); results are (path, seconds, fps).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    failed = 0
    for path in paths:
        path = Path(path)
        t0 = time.perf_counter()
        try:
            image = load_image(path)
        except Exception as exc:
            log.error("skipping unreadable image %s: %s", path, exc)
            failed += 1
            continue
        prob = predict_probability(model, image)
        quantized = prob_to_png(prob)
        save_gray(out_dir / f"{path.stem}_prob.png", quantized)
        # threshold the quantized map so reloading the probability PNG and
        # re-thresholding reproduces the binary PNG exactly
        save_mask(out_dir / f"{path.stem}_bin.png",
                  quantized.astype(np.float32) / 255.0 >= threshold)
        seconds = time.perf_counter() - t0
        results.append((path, seconds, 1.0 / seconds))
    return results, failed


def _load_predicted(pred_dir, stem):
    path = Path(pred_dir) / f"{stem}_prob.png"
    if not path.is_file():
        path = Path(pred_dir) / f"{stem}.png"
    if not path.is_file():
        raise DataError(f"no prediction found for {stem} under {pred_dir}")
    raw = np.asarray(Image.open(path).convert("L"))
    return raw.astype(np.float32) / 255.0


def evaluate(cfg):
    """Per-image + dataset-level metrics over the test split."""
    spec = cfg.dataset_spec()
    _, test = load_split(spec)
    if not test:
        raise DataError("evaluate: empty test split")

    if cfg.pred_dir:
        def prob_of(sample):
            return _load_predicted(cfg.pred_dir, sample.id), 0.0
    else:
        from .checkpoint import load_checkpoint
        if not cfg.checkpoint:
            raise DataError("evaluate needs --checkpoint or --pred-dir")
        model, _ = load_checkpoint(cfg.checkpoint)

        def prob_of(sample):
            t0 = time.perf_counter()
            prob = predict_probability(model, sample.image)
            return prob, (time.perf_counter() - t0) * 1000.0

    evals = []
    for sample in test:
        prob, ms = prob_of(sample)
        if prob.shape != sample.label.shape:
            raise DataError(f"{sample.id}: prediction {prob.shape} vs "
                            f"ground truth {sample.label.shape}")
        evals.append(ImageEval(id=sample.id, prob=prob, gt=sample.label,
                               fov=sample.fov, ms=ms))
    return aggregate(evals, mode=cfg.eval_mode, threshold=cfg.threshold)


def benchmark(cfg, min_runs=20):
    """fps statistics with the disk-to-disk protocol over the test split."""
    spec = cfg.dataset_spec()
    from .checkpoint import load_checkpoint
    if not cfg.checkpoint:
        raise DataError("benchmark needs --checkpoint")
    model, _ = load_checkpoint(cfg.checkpoint)

    stems = sorted((Path(spec.root) / "images").iterdir())
    stems = [p for p in stems if p.suffix.lower() in
             (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".gif")]
    if not stems:
        raise DataError(f"benchmark: no images under {spec.root}/images")
    _, test = load_split(spec)
    test_ids = {s.id for s in test}
    paths = [p for p in stems if p.stem in test_ids] or stems

    out_dir = Path(cfg.out) / "benchmark_maps"
    # warm-up pass compiles kernels and touches the page cache
    predict_paths(model, paths[:1], out_dir,
                  threshold=cfg.threshold or 0.5)
    runs = []
    while len(runs) < min_runs:
        todo = paths[:min_runs - len(runs)]
        results, failed = predict_paths(model, todo, out_dir,
                                        threshold=cfg.threshold or 0.5)
        if failed:
            raise DataError("benchmark: unreadable image in the test set")
        runs.extend(r[2] for r in results)
    return {
        "runs": len(runs),
        "fps_mean": statistics.mean(runs),
        "fps_median": statistics.median(runs),
        "fps_min": min(runs),
    }
