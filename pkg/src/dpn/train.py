"""The training loop: batch size 1, random crop + mirror per iteration."""

import logging
import time
from pathlib import Path

import numpy as np

from .augment import augment_offline, crop_at, random_crop, random_mirror
from .autograd import Tape, backward
from .checkpoint import save_checkpoint
from .data import load_augmented, load_split
from .losses import total_objective
from .model import DpnModel, dpn_record, init_xavier
from .optim import OptimizerError, adam_step

log = logging.getLogger(__name__)


def load_training_set(cfg, spec):
    if cfg.augmented_root:
        samples = load_augmented(cfg.augmented_root)
        log.info("loaded %d pre-augmented training samples from %s",
                 len(samples), cfg.augmented_root)
    elif cfg.fixed_crop:
        samples, _ = load_split(spec)  # only samples[0] is consumed
    else:
        train, _ = load_split(spec)
        samples = augment_offline(train)
        log.info("augmented %d originals to %d training samples",
                 len(train), len(samples))
    return samples


def _save(model, path, step):
    tmp = Path(path).with_suffix(".tmp")
    save_checkpoint(model, tmp, step=step)
    tmp.replace(path)
    return Path(path)


class TrainLog:
    def __init__(self, path, n_heads):
        self.path = Path(path)
        heads = ",".join(f"head{i + 1}" for i in range(n_heads))
        self.path.write_text(f"iteration,total,beta,n_pos,n_neg,{heads}\n")
        self._buf = []

    def append(self, iteration, report):
        heads = ",".join(f"{v:.6f}" for v in report.head_losses)
        self._buf.append(f"{iteration},{report.total:.6f},"
                         f"{report.beta:.6f},{report.n_pos},"
                         f"{report.n_neg},{heads}\n")
        if len(self._buf) >= 200:
            self.flush()

    def flush(self):
        if self._buf:
            with open(self.path, "a") as fh:
                fh.writelines(self._buf)
            self._buf.clear()


def train(cfg):
    """Run the configured recipe; returns the final checkpoint path.

    Deterministic for a fixed seed at thread count 1. On a non-finite loss
    the run aborts and the last periodic checkpoint is retained.
    """
    spec = cfg.dataset_spec()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = load_training_set(cfg, spec)
    model = DpnModel(cfg.model_config())
    init_xavier(model, seed=cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    n_heads = len(model.heads)
    tlog = TrainLog(out_dir / "train_log.csv", n_heads)
    latest = out_dir / "ckpt_latest.dpnw"
    final = out_dir / "ckpt_final.dpnw"

    fixed = None
    if cfg.fixed_crop:
        base = samples[0]
        fixed = crop_at(base, (base.height - spec.crop_size) // 2,
                        (base.width - spec.crop_size) // 2, spec.crop_size)
        log.info("fixed-crop mode: training on one %dx%d crop of %s",
                 spec.crop_size, spec.crop_size, base.name)

    t_start = time.perf_counter()
    first_loss = None
    for it in range(1, spec.iterations + 1):
        if fixed is not None:
            patch = fixed
        else:
            patch = samples[int(rng.integers(len(samples)))]
            patch = random_crop(patch, spec.crop_size, rng)
            patch = random_mirror(patch, rng)

        model.zero_grads()
        tape = Tape()
        _, head_ids = dpn_record(tape, patch.tensor(), model)
        loss_id, report = total_objective(tape, head_ids, patch.label,
                                          lam=cfg.weight_decay)
        if not np.isfinite(report.total):
            tlog.flush()
            raise OptimizerError(
                f"iteration {it}: non-finite loss {report.total}; aborting "
                f"(last checkpoint: {latest if latest.exists() else 'none'})")
        backward(tape, loss_id)
        adam_step(model.params(), it, lr=cfg.lr,
                  weight_decay=cfg.weight_decay)

        if first_loss is None:
            first_loss = report.total
        tlog.append(it, report)
        if it % cfg.log_every == 0 or it == 1:
            rate = it / (time.perf_counter() - t_start)
            log.info("iter %d/%d loss %.4f beta %.4f (%.2f it/s)",
                     it, spec.iterations, report.total, report.beta, rate)
        if it % cfg.checkpoint_every == 0:
            _save(model, latest, it)
    tlog.flush()
    _save(model, latest, spec.iterations)
    _save(model, final, spec.iterations)
    log.info("finished %d iterations; final checkpoint %s",
             spec.iterations, final)
    return final
