"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Every key is a field of
:class:`RunConfig`; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import ImpressionSpec, RetrievalSpec, SyntheticSpec
from .distill import DistillConfig
from .encoder import ConfigError, EncoderConfig
from .train import RUN_MODES, TrainSettings

TASKS = ("classify", "recsys", "retrieval")
SOURCES = ("synthetic", "mind", "jsonl")


@dataclass
class RunConfig:
    task: str = "classify"
    mode: str = "joint"
    seed: int = 0
    out_dir: str = "runs/default"
    # encoder geometry (teacher)
    teacher_depth: int = 4
    K: int = 2
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    max_seq_len: int = 16
    dropout: float = 0.2
    attn_dim: int = 16
    vocab_size: int = 200
    # distillation
    temperature: float = 1.0
    beta: float = 0.1
    enable_hidden_layer_loss: bool = True
    enable_pooled_hidden_loss: bool = True
    enable_distill_loss: bool = True
    enable_momentum: bool = True
    prob_temperature: bool = False
    mix_embeddings: bool = False
    # optimisation
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    teacher_epochs: int = 0
    negatives: int = 4
    eval_every: int = 1
    # data
    data: str = "synthetic"
    num_classes: int = 4
    signal: float = 0.7
    tokens_per_class: int = 8
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 1000
    focus: float = 1.0
    history_len: int = 8
    noise: float = 0.0
    news_path: str = ""
    behaviors_path: str = ""
    train_path: str = ""
    test_path: str = ""
    vocab_path: str = ""
    init_checkpoint: str = ""

    def validate(self, check_paths=True):
        if self.task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {self.task!r}")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode: must be one of {RUN_MODES}, got {self.mode!r}")
        if self.data not in SOURCES:
            raise ConfigError(f"data: must be one of {SOURCES}, got {self.data!r}")
        if self.K < 1 or self.teacher_depth < 1 or self.teacher_depth % self.K:
            raise ConfigError(f"teacher_depth: {self.teacher_depth} must be a positive multiple of K={self.K}")
        if self.task == "retrieval" and self.mode not in ("student-only", "teacher-only"):
            raise ConfigError("mode: retrieval fine-tuning runs in student-only mode")
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        self.encoder_config()
        self.distill_config()
        if check_paths:
            for name in ("news_path", "behaviors_path", "train_path", "test_path", "vocab_path",
                         "init_checkpoint"):
                p = getattr(self, name)
                if p and not Path(p).exists():
                    raise ConfigError(f"{name}: path {p!r} does not exist")
            if self.data == "mind" and not (self.news_path and self.behaviors_path):
                raise ConfigError("news_path/behaviors_path: required when data = mind")
            if self.data == "jsonl" and not (self.train_path and self.test_path):
                raise ConfigError("train_path/test_path: required when data = jsonl")
        return self

    def encoder_config(self, vocab_size=None):
        return EncoderConfig(vocab_size=vocab_size or self.vocab_size, max_seq_len=self.max_seq_len,
                             hidden_dim=self.hidden_dim, num_heads=self.num_heads, ffn_dim=self.ffn_dim,
                             num_layers=self.teacher_depth, dropout=self.dropout)

    def distill_config(self):
        return DistillConfig(
            temperature=self.temperature, beta=self.beta,
            enable_hidden_layer_loss=self.enable_hidden_layer_loss,
            enable_pooled_hidden_loss=self.enable_pooled_hidden_loss,
            enable_distill_loss=self.enable_distill_loss, enable_momentum=self.enable_momentum,
            mode="disjoint" if self.mode == "disjoint" else "joint",
            prob_temperature=self.prob_temperature, mix_embeddings=self.mix_embeddings)

    def train_settings(self):
        return TrainSettings(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                             attn_dim=self.attn_dim, negatives=self.negatives,
                             teacher_epochs=self.teacher_epochs or None)

    def synthetic_spec(self):
        return SyntheticSpec(seed=self.seed, vocab_size=self.vocab_size, num_classes=self.num_classes,
                             seq_len=self.max_seq_len, signal=self.signal,
                             tokens_per_class=self.tokens_per_class, n_train=self.n_train,
                             n_valid=self.n_valid, n_test=self.n_test)

    def impression_spec(self):
        return ImpressionSpec(seed=self.seed, vocab_size=self.vocab_size, num_topics=self.num_classes,
                              seq_len=self.max_seq_len, history_len=self.history_len,
                              negatives=self.negatives, focus=self.focus, n_train=self.n_train,
                              n_valid=self.n_valid, n_test=self.n_test)

    def retrieval_spec(self):
        return RetrievalSpec(seed=self.seed, vocab_size=self.vocab_size, num_topics=self.num_classes,
                             doc_len=self.max_seq_len, noise=self.noise, n_train=self.n_train,
                             n_valid=self.n_valid, n_test=self.n_test)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name, typ, raw):
    try:
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def from_dict(d):
    known = {f.name: f.type for f in fields(RunConfig)}
    kw = {}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{k}: unknown configuration key")
        kw[k] = _coerce(k, known[k], v) if isinstance(v, str) else v
    return RunConfig(**kw)


def parse_config(text):
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   delimiters=("=",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    return from_dict(dict(cp["run"]))


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))
