"""Model construction and training loops for every mode.

Modes: ``joint`` (teacher and student learned together through shared heads),
``disjoint`` (teacher first, then the student against the frozen teacher),
``teacher-only`` and ``student-only`` (plain supervised training of one path).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import distill as D
from .encoder import init_encoder, init_student_from_teacher
from .heads import init_dense, init_pooling
from .tasks import classify as task_classify
from .tasks import recsys as task_recsys
from .tasks import retrieval as task_retrieval
from .tensor import Tensor

log = logging.getLogger(__name__)

RUN_MODES = ("joint", "disjoint", "student-only", "teacher-only")
MAIN_METRIC = {"classify": "accuracy", "recsys": "auc", "retrieval": "auc"}


@dataclass
class TrainSettings:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    attn_dim: int = 16
    negatives: int = 4
    # disjoint mode: epochs of the teacher-only phase (defaults to ``epochs``)
    teacher_epochs: int | None = None


def rngs(seed):
    """Independent streams for initialisation, data order and dropout."""
    return {
        "init": np.random.default_rng([seed, 0]),
        "data": np.random.default_rng([seed, 1]),
        "dropout": np.random.default_rng([seed, 2]),
    }


def build_pair(task, enc_cfg, K, mode, seed, num_classes=None, attn_dim=16):
    """Teacher (depth ``enc_cfg.num_layers``), student of depth num_layers / K, fresh heads.

    The student always starts as a copy of the teacher's embedding layer and
    first layers, so every mode begins from the same weights for a given seed.
    """
    if enc_cfg.num_layers % K:
        raise D.ConfigError(f"teacher depth {enc_cfg.num_layers} not divisible by K={K}")
    rng = np.random.default_rng([seed, 0])
    teacher = init_encoder(enc_cfg, rng, prefix="teacher.")
    heads = init_pooling(enc_cfg.hidden_dim, attn_dim, rng, prefix="pool.")
    if task == "classify":
        heads.update(init_dense(enc_cfg.hidden_dim, num_classes, rng, prefix="dense."))
    elif task == "recsys":
        heads.update(init_pooling(enc_cfg.hidden_dim, attn_dim, rng, prefix="user."))
    student = init_student_from_teacher(teacher, enc_cfg.num_layers // K)
    if mode == "teacher-only":
        student = None
    elif mode == "student-only":
        teacher = None
    return D.ModelPair(teacher, student, heads, K)


def copy_heads(heads, tag="student_heads."):
    return {k: Tensor(t.data.copy(), requires_grad=True, name=tag + k) for k, t in heads.items()}


@dataclass
class TaskAdapter:
    name: str
    losses: object
    evaluate: object
    train_batches: object  # (data, settings, rng) -> iterator of batches


def adapter(task):
    if task == "classify":
        return TaskAdapter("classify", task_classify.losses, task_classify.evaluate,
                           lambda d, s, r: task_classify.batches(d, s.batch_size, r))
    if task == "recsys":
        def rec_batches(d, s, r):
            inst = task_recsys.training_instances(d, s.negatives, r)
            return task_recsys.batches(inst, d, s.batch_size, r)
        return TaskAdapter("recsys", task_recsys.losses, task_recsys.evaluate, rec_batches)
    if task == "retrieval":
        return TaskAdapter("retrieval", task_retrieval.losses, task_retrieval.evaluate,
                           lambda d, s, r: task_retrieval.batches(d, s.batch_size, r))
    raise D.ConfigError(f"unknown task {task!r}")


def metric_value(records, name):
    for r in records:
        if r["metric"] == name:
            return r["value"]
    raise KeyError(name)


@dataclass
class Trainer:
    """Stateful training run: model pair, optimizer, RNG streams, counters."""

    task: str
    pair: D.ModelPair
    cfg: D.DistillConfig
    settings: TrainSettings
    mode: str = "joint"
    step: int = 0
    epoch: int = 0
    phase: str = "main"
    rng: dict = field(default_factory=dict)
    opt: D.Adam | None = None
    full_pair: D.ModelPair | None = None

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise D.ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if not self.rng:
            self.rng = rngs(self.settings.seed)
        if self.opt is None:
            self.opt = D.Adam(lr=self.settings.lr)
        self.adapter = adapter(self.task)
        if self.mode == "disjoint" and self.phase == "main":
            # teacher phase sees no student; the full pair is restored afterwards
            self.full_pair = self.pair
            self.pair = D.ModelPair(self.pair.teacher, None, self.pair.heads, self.pair.K)
            self.phase = "teacher"
            # the student phase replays the data order a joint run with this seed sees
            self.rng["data_start"] = copy.deepcopy(self.rng["data"])

    # ------------------------------------------------------------ steps
    def train_step(self, batch):
        a, p, c = self.adapter, self.pair, self.cfg
        drop = self.rng["dropout"]
        if self.mode == "joint":
            rep = D.joint_step(p, batch, c, a.losses, self.opt, drop, self.step)
        elif self.mode == "teacher-only" or self.phase == "teacher":
            rep = D.single_path_step(p, batch, c, a.losses, self.opt, drop, "teacher", self.step)
        elif self.mode == "student-only":
            rep = D.single_path_step(p, batch, c, a.losses, self.opt, drop, "student", self.step)
        else:
            rep = D.frozen_teacher_step(p, batch, c, a.losses, self.opt, drop, self.step)
        self.step += 1
        return rep

    def run_epoch(self, data, on_step=None):
        reports = []
        for batch in self.adapter.train_batches(data, self.settings, self.rng["data"]):
            rep = self.train_step(batch)
            rep["epoch"] = self.epoch
            reports.append(rep)
            if on_step:
                on_step(rep)
        self.epoch += 1
        return reports

    def start_student_phase(self):
        """Freeze the trained teacher and hand the student a copy of its heads."""
        full = self.full_pair
        frozen = {t.name for t in full.teacher.params.values()} | {t.name for t in full.heads.values()}
        self.pair = D.ModelPair(full.teacher, full.student, full.heads, full.K,
                                student_heads=copy_heads(full.heads), frozen=frozen)
        self.full_pair = None
        self.opt = D.Adam(lr=self.settings.lr)
        self.phase = "student"
        if "data_start" in self.rng:
            self.rng["data"] = self.rng.pop("data_start")

    def evaluate(self, data, path=None):
        if path is None:
            path = "student" if self.pair.student is not None else "teacher"
        return self.adapter.evaluate(self.pair, data, path)

    # ------------------------------------------------------------ full runs
    def fit(self, train, valid=None, on_step=None, on_epoch=None):
        """Run all epochs (both phases in disjoint mode); returns per-epoch records."""
        history = []
        if self.phase == "teacher":
            t_epochs = self.settings.teacher_epochs or self.settings.epochs
            while self.epoch < t_epochs:
                self.run_epoch(train, on_step)
                history.append(self._epoch_record(valid, on_epoch))
            self.start_student_phase()
            self.epoch = 0
        while self.epoch < self.settings.epochs:
            self.run_epoch(train, on_step)
            history.append(self._epoch_record(valid, on_epoch))
        return history

    def _epoch_record(self, valid, on_epoch):
        rec = {"epoch": self.epoch - 1, "phase": self.phase, "step": self.step}
        if valid is not None:
            for path, enc in (("teacher", self.pair.teacher), ("student", self.pair.student)):
                if enc is not None:
                    rec[path] = self.evaluate(valid, path)
        if on_epoch:
            on_epoch(rec, self)
        return rec


def finetune_retrieval(encoder, heads, train, settings, cfg=None, on_step=None):
    """Student-only retrieval fine-tuning of ``encoder`` with a copy of the pooling ``heads``.

    ``encoder`` is trained in place; pass a :func:`clone_encoder` to keep the source.
    """
    pool = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in heads.items()
            if k.startswith("pool.")}
    pair = D.ModelPair(None, encoder, pool, K=1)
    tr = Trainer("retrieval", pair, cfg or D.DistillConfig(), settings, mode="student-only")
    tr.fit(train, on_step=on_step)
    return tr


def clone_encoder(enc, prefix="student."):
    out = copy.deepcopy(enc)
    for k, t in out.params.items():
        t.name = prefix + k
        t.grad = None
    return out
