"""Structured-text serialization for model and training configuration.

Format: `[section]` headers with dotted nesting and `key = value` lines.
Blank lines and `#` comments are ignored. Unknown sections or keys are
errors. A full document looks like:

    [model]
    image_shape = 3 8 8
    growth_rate = 4
    ...
    [model.coupling]
    proj_channels = 16
    ...
    [model.block.1]
    units = 2
    modules_per_unit = 3
    [train]
    lr = 0.001
    ...

Writing is canonical (fixed section and key order) so that a parsed config
re-serializes byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .coupling import CouplingNetConfig
from .errors import DataFormatError
from .model import BlockConfig, FlowConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    max_steps: int = 0  # 0 = no cap
    warmup_steps: int = 100
    decay_factor: float = 0.98
    finetune_lr: float = 2e-5
    finetune_epochs: int = 0
    grad_clip_norm: float = 100.0
    hflip: bool = True
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise DataFormatError("train.lr must be > 0")
        if not (0 < self.decay_factor <= 1):
            raise DataFormatError("train.decay_factor must be in (0, 1]")
        if self.warmup_steps < 0:
            raise DataFormatError("train.warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise DataFormatError("train counts must be non-negative")
        return self


def full_scale_train_config():
    """Full-scale optimization settings: Adamax at 1e-3, linear
    warm-up over the first 5000 steps, decay 0.95 per epoch, fine-tuning
    at 2e-5 with horizontal-flip augmentation."""
    return TrainConfig(
        lr=1e-3, batch_size=64, epochs=20, warmup_steps=5000,
        decay_factor=0.95, finetune_lr=2e-5, finetune_epochs=2, hflip=True,
    )


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(str(v) for v in value)
    return str(value)


def _parse_scalar(raw):
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


MODEL_KEYS = (
    "image_shape", "growth_rate", "dequantization", "cross_unit_context",
    "factor_prior", "preconditioned_noise", "seed",
)
COUPLING_KEYS = (
    "kind", "proj_channels", "dense_layers", "dense_growth", "attn_heads",
    "attn_landmarks", "pinv_iters",
)
BLOCK_KEYS = ("units", "modules_per_unit")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
STATE_KEYS = ("step", "epoch")


def config_to_text(flow_config, train_config=None, state=None):
    lines = ["[model]"]
    lines.append(f"image_shape = {_fmt(flow_config.image_shape)}")
    lines.append(f"growth_rate = {flow_config.growth_rate}")
    lines.append(f"dequantization = {flow_config.dequantization}")
    lines.append(f"cross_unit_context = {flow_config.cross_unit_context}")
    lines.append(f"factor_prior = {flow_config.factor_prior}")
    lines.append(f"preconditioned_noise = {_fmt(flow_config.preconditioned_noise)}")
    lines.append(f"seed = {flow_config.seed}")
    lines.append("[model.coupling]")
    for key in COUPLING_KEYS:
        lines.append(f"{key} = {_fmt(getattr(flow_config.coupling, key))}")
    for i, blk in enumerate(flow_config.blocks):
        lines.append(f"[model.block.{i + 1}]")
        lines.append(f"units = {blk.units}")
        lines.append(f"modules_per_unit = {blk.modules_per_unit}")
    if train_config is not None:
        lines.append("[train]")
        for key in TRAIN_KEYS:
            lines.append(f"{key} = {_fmt(getattr(train_config, key))}")
    if state is not None:
        lines.append("[state]")
        for key in STATE_KEYS:
            lines.append(f"{key} = {state[key]}")
    return "\n".join(lines) + "\n"


def _parse_sections(text):
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name in sections:
                raise DataFormatError(f"line {lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = sections[name]
            continue
        if "=" not in line:
            raise DataFormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise DataFormatError(f"line {lineno}: key outside any [section]")
        key, _, raw_val = line.partition("=")
        key = key.strip()
        if key in current:
            raise DataFormatError(f"line {lineno}: duplicate key '{key}'")
        current[key] = raw_val.strip()
    return sections


def _take(section_name, section, allowed):
    for key in section:
        if key not in allowed:
            raise DataFormatError(f"unknown key '{key}' in section [{section_name}]")
    return {k: _parse_scalar(v) for k, v in section.items()}


def config_from_text(text):
    """Parse a config document; returns (FlowConfig, TrainConfig or None,
    state dict or None)."""
    sections = _parse_sections(text)
    if "model" not in sections:
        raise DataFormatError("missing [model] section")
    known = {"model", "model.coupling", "train", "state"}
    block_ids = []
    for name in sections:
        if name.startswith("model.block."):
            suffix = name[len("model.block."):]
            if not suffix.isdigit() or int(suffix) < 1:
                raise DataFormatError(f"bad block section [{name}]")
            block_ids.append(int(suffix))
        elif name not in known:
            raise DataFormatError(f"unknown section [{name}]")
    if sorted(block_ids) != list(range(1, len(block_ids) + 1)):
        raise DataFormatError(f"block sections must be numbered 1..n, got {sorted(block_ids)}")
    if not block_ids:
        raise DataFormatError("config needs at least one [model.block.N] section")

    model_kv = _take("model", sections["model"], MODEL_KEYS)
    if "image_shape" in model_kv:
        parts = str(model_kv["image_shape"]).split()
        if len(parts) != 3:
            raise DataFormatError("image_shape must be three integers 'c h w'")
        model_kv["image_shape"] = tuple(int(p) for p in parts)
    coupling = CouplingNetConfig()
    if "model.coupling" in sections:
        kv = _take("model.coupling", sections["model.coupling"], COUPLING_KEYS)
        coupling = replace(coupling, **kv)
    blocks = []
    for i in sorted(block_ids):
        kv = _take(f"model.block.{i}", sections[f"model.block.{i}"], BLOCK_KEYS)
        missing = [k for k in BLOCK_KEYS if k not in kv]
        if missing:
            raise DataFormatError(f"[model.block.{i}] missing keys {missing}")
        blocks.append(BlockConfig(**kv))
    flow = FlowConfig(blocks=tuple(blocks), coupling=coupling, **model_kv)
    flow.validate()

    train = None
    if "train" in sections:
        kv = _take("train", sections["train"], TRAIN_KEYS)
        train = TrainConfig(**kv).validate()
    state = None
    if "state" in sections:
        kv = _take("state", sections["state"], STATE_KEYS)
        state = {k: int(v) for k, v in kv.items()}
    return flow, train, state
