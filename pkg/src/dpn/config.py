"""Run configuration: dataset-recipe defaults, config files, flag merging.

A config file is line-based ``key = value`` with ``#`` comments. Precedence:
built-in defaults (the DRIVE recipe) < config file < explicit command-line
flags. The effective configuration is echoed verbatim at run start so any
run can be reproduced from its log.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .data import make_spec
from .model import DpnConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "drive"
    data_root: str = None
    augmented_root: str = None
    chase_split: str = "20/8"
    seed: int = 0
    iters: int = None          # None -> dataset recipe default
    crop_size: int = None      # None -> dataset recipe default
    lr: float = 1e-3
    weight_decay: float = 5e-4
    checkpoint: str = None
    out: str = "out"
    threshold: float = None    # None -> pooled optimal threshold
    threads: int = 1
    eval_mode: str = "pooled"
    pred_dir: str = None
    fixed_crop: bool = False   # overfit mode: one deterministic crop
    checkpoint_every: int = 5000
    log_every: int = 100
    # architecture / ablations
    filters: str = "16,8,8"
    branches: str = "os1,os2,os4"
    blocks: int = 8
    aux: bool = True

    def dataset_spec(self):
        if self.data_root is None:
            raise ConfigError("data_root is required (flag --data-root or "
                              "config key data_root)")
        spec = make_spec(self.dataset, self.data_root, self.chase_split)
        if self.crop_size is not None:
            spec.crop_size = self.crop_size
        if self.iters is not None:
            spec.iterations = self.iters
        return spec

    def model_config(self):
        try:
            c0, c1, c2 = (int(v) for v in self.filters.split(","))
        except ValueError:
            raise ConfigError(f"filters must be three integers 'c0,c1,c2', "
                              f"got {self.filters!r}") from None
        branches = tuple(b.strip() for b in self.branches.split(",") if
                         b.strip())
        aux_positions = tuple(p for p in DpnConfig.aux_positions
                              if p < self.blocks)
        cfg = DpnConfig(c0=c0, c1=c1, c2=c2, num_blocks=self.blocks,
                        branches=branches, aux_losses=self.aux,
                        aux_positions=aux_positions)
        cfg.validate()
        return cfg


_BOOL_KEYS = {"aux", "fixed_crop"}
_INT_KEYS = {"seed", "iters", "crop_size", "threads", "blocks",
             "checkpoint_every", "log_every"}
_FLOAT_KEYS = {"lr", "weight_decay", "threshold"}
_VALID_KEYS = {f.name for f in fields(RunConfig)}


def _coerce(key, raw):
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got "
                          f"{raw!r}")
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: bad numeric value "
                          f"{raw!r}") from None
    return raw


def parse_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _VALID_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key "
                              f"{key!r}")
        values[key] = _coerce(key, raw)
    return values


def build_config(config_file=None, **flag_values):
    """Merge defaults, file values and explicitly-set flags."""
    cfg = RunConfig()
    if config_file:
        for key, value in parse_config_file(config_file).items():
            setattr(cfg, key, value)
    for key, value in flag_values.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def echo_config(cfg):
    lines = ["effective configuration:"]
    for f in sorted(fields(cfg), key=lambda f: f.name):
        lines.append(f"  {f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines)
