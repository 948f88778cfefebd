"""Experiment configuration, stored as one JSON document.

Desk-scale defaults are sized for minutes-long runs on a laptop CPU. The
full-scale translation reference for comparison: donor LM 4096-unit LSTM
projected to 1024, 3-layer seq2seq (upper layers 1000 units), Adam at 5e-5
decayed ×0.8 every 50K steps after 400K, clip norm 5.0, dropout 0.2,
beam 10, ~89.5K BPE merges.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .lm import LmConfig
from .seq2seq import Seq2SeqConfig
from .synth import TaskSpec
from .training import TrainConfig
from .transfer import AblationMode, JointLossWeights

FORMAT = "s2sp-config/1"


def _finetune_default() -> TrainConfig:
    return TrainConfig(batch_size=32, max_steps=1200, lr=2e-3, decay_factor=0.8, decay_every=200,
                       warm_steps=600, clip_norm=5.0, eval_every=100, patience=4)


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    data_seed: int = 0
    bpe_merges: int = 1000
    shared_lm: bool = False
    lm: LmConfig = field(default_factory=LmConfig)
    model: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    mode: AblationMode = field(default_factory=AblationMode)
    weights: JointLossWeights = field(default_factory=JointLossWeights)
    finetune: TrainConfig = field(default_factory=_finetune_default)
    dropout: float = 0.2
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    fractions: list[float] = field(default_factory=lambda: [0.2, 1.0])
    beam: int = 10
    length_norm: bool = False
    valid_bleu_limit: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {"format": FORMAT, **dataclasses.asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        body = self.to_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        fmt = d.pop("format", FORMAT)
        if fmt != FORMAT:
            raise ValueError(f"unsupported config format {fmt!r}")
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, d: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t) and isinstance(v, dict):
            v = _build(t, v)
        kwargs[k] = v
    return cls(**kwargs)
