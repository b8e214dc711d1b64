"""Run configuration: a flat key-value file mapped onto one dataclass.

Hyper-parameter defaults follow the published training setup where that
setup applies (patience, epoch cap, batch size, loss mixing weight, the
two learning-rate stages); sizes default to desk scale so everything runs
on a CPU in minutes.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV_VAR = "MSAM_SEED"


@dataclass
class Config:
    chunk_len: int = 512          # tokens per chunk, separator included
    overlap: int = 255            # content tokens shared by consecutive chunks
    hidden: int = 64              # encoder width
    heads: int = 4                # attention heads, equals synonyms per code
    synonyms: int = 4             # synonym vectors kept per code
    num_codes: int = 20
    encoder_blocks: int = 1
    quant_lambda: float = 100.0
    huber_delta: float = 0.01
    quant_loss_kind: str = "mse"  # "mse" | "huber"
    lr_stage1: float = 2e-5
    lr_stage2: float = 2e-7
    lr_refiner: float = 2e-5
    lr_joint: float = 2e-5
    patience: int = 5
    max_epochs: int = 300
    batch_size: int = 16
    mlp_hidden: int = 8
    calibration_bins: int = 20
    precision_cutoff: int = 5
    seed: int = 0
    train_path: str = "data/train.jsonl"
    valid_path: str = "data/valid.jsonl"
    test_path: str = "data/test.jsonl"
    vocab_path: str = "data/vocab.txt"
    codebook_path: str = "data/codebook.jsonl"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} must be divisible by heads "
                             f"{self.heads}")
        if self.heads != self.synonyms:
            raise ValueError(f"heads ({self.heads}) must equal synonyms per code "
                             f"({self.synonyms})")
        if not 0 <= self.overlap < self.chunk_len - 1:
            raise ValueError(f"overlap {self.overlap} must be in [0, chunk_len-1)")
        if not 1 <= self.mlp_hidden < self.num_codes:
            raise ValueError(f"mlp_hidden {self.mlp_hidden} must be in "
                             f"[1, num_codes)")
        if self.quant_loss_kind not in ("mse", "huber"):
            raise ValueError(f"unknown quant_loss_kind {self.quant_loss_kind!r}")

    def apply_env_overrides(self) -> "Config":
        seed = os.environ.get(SEED_ENV_VAR)
        if seed is not None:
            self.seed = int(seed)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def hash(self) -> str:
        canonical = "\n".join(sorted(self.to_text().splitlines()))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_config(text: str) -> Config:
    """Parse ``key = value`` lines; '#' starts a comment, unknown keys fail."""
    known = {f.name: f.type for f in fields(Config)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
        values[key] = casts[known[key]](value)
    return Config(**values)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))
