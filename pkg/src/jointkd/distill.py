"""Distillation losses, gradient-momentum mixing, Adam, and the joint step.

Teacher-side activations entering any student-loss term are detached: the
teacher is optimised by its own classification loss only, so the student loss
never writes gradient into teacher parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import LAYER_ROLES, BlockMap, ConfigError, Encoder, block_of
from .tensor import Tape, Tensor, backward

MODES = ("joint", "disjoint")


class ModeError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class DistillConfig:
    temperature: float = 1.0
    beta: float = 0.1
    enable_hidden_layer_loss: bool = True
    enable_pooled_hidden_loss: bool = True
    enable_distill_loss: bool = True
    enable_momentum: bool = True
    mode: str = "joint"
    # divide probabilities (rather than logits) by the temperature
    prob_temperature: bool = False
    # also mix embedding-layer gradients with the teacher's
    mix_embeddings: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ModelPair:
    """Teacher, student and head parameters.

    ``heads`` feeds the teacher path. With ``student_heads`` left as None the
    student reads the very same dict (joint mode); disjoint training gives the
    student its own copy.
    """

    teacher: Encoder | None
    student: Encoder | None
    heads: dict
    K: int = 2
    student_heads: dict | None = None
    frozen: set = field(default_factory=set)

    @property
    def s_heads(self):
        return self.heads if self.student_heads is None else self.student_heads

    @property
    def bmap(self):
        return BlockMap(self.K, self.student.config.num_layers)

    def named_parameters(self):
        out = {}
        for enc in (self.teacher, self.student):
            if enc is not None:
                out.update((t.name, t) for t in enc.params.values())
        out.update((t.name, t) for t in self.heads.values())
        if self.student_heads is not None:
            out.update((t.name, t) for t in self.student_heads.values())
        return out

    def trainable(self):
        return {n: t for n, t in self.named_parameters().items() if n not in self.frozen}


def owner(name):
    """Partition tag of a parameter name: teacher, student, or shared."""
    if name.startswith("teacher."):
        return "teacher"
    if name.startswith("student"):
        return "student"
    return "shared"


@dataclass
class LossBundle:
    teacher: Tensor | None
    student: Tensor | None
    components: dict = field(default_factory=dict)


# ---------------------------------------------------------------- losses

def _token_weight(state):
    m = state.attention_mask.astype(np.float64)
    return np.broadcast_to(m[:, :, None], state.embeddings.shape)


def hidden_layer_loss(teacher_state, student_state, bmap):
    """Embedding MSE plus MSE of each student layer against the last layer of its block.

    MSE averages over valid (unmasked) token positions and hidden units.
    """
    nt, ns = len(teacher_state.layer_hidden), len(student_state.layer_hidden)
    if ns != bmap.N or nt != bmap.N * bmap.K:
        raise ValueError(f"depths teacher={nt}, student={ns} do not fit K={bmap.K}, N={bmap.N}")
    if teacher_state.embeddings.shape != student_state.embeddings.shape:
        raise ValueError(
            f"state shapes differ: {teacher_state.embeddings.shape} vs {student_state.embeddings.shape}")
    w = _token_weight(student_state)
    loss = T.mse(teacher_state.embeddings.detach(), student_state.embeddings, w)
    for i in range(1, bmap.N + 1):
        ht = teacher_state.layer_hidden[i * bmap.K - 1].detach()
        loss = T.add(loss, T.mse(ht, student_state.layer_hidden[i - 1], w))
    return loss


def pooled_hidden_loss(h_t, h_s):
    return T.mse(h_t.detach(), h_s)


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distillation_loss(teacher_logits, student_logits, t=1.0, prob_temperature=False):
    """Cross entropy of temperature-softened student against teacher soft labels."""
    if t <= 0:
        raise ConfigError(f"temperature must be positive, got {t}")
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    if prob_temperature:
        # CE(p/t, q/t) = (CE(p, q) + log t) / t
        p = _softmax_np(teacher_logits.data)
        ce = T.soft_cross_entropy(p, student_logits)
        return T.add(T.scale(ce, 1.0 / t), Tensor(math.log(t) / t))
    p = _softmax_np(teacher_logits.data / t)
    return T.soft_cross_entropy(p, T.scale(student_logits, 1.0 / t))


def total_distill_loss(hidden_l, hidden_p, distill, cfg):
    terms = []
    if cfg.enable_hidden_layer_loss:
        terms.append(hidden_l)
    if cfg.enable_pooled_hidden_loss:
        terms.append(hidden_p)
    if cfg.enable_distill_loss:
        terms.append(distill)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def student_loss(l_d, student_logits, labels):
    return T.add(l_d, T.cross_entropy(student_logits, labels))


def teacher_loss(teacher_logits, labels):
    return T.cross_entropy(teacher_logits, labels)


# ---------------------------------------------------------------- momentum

def block_gradient_average(teacher_grads, bmap, i, prefix="teacher."):
    """Role -> mean gradient over the teacher layers of block ``i`` (1-based)."""
    layers = block_of(bmap, i)
    out = {}
    for role in LAYER_ROLES:
        keys = [f"{prefix}layers.{l - 1}.{role}" for l in layers]
        missing = [k for k in keys if k not in teacher_grads]
        if missing:
            raise KeyError(f"teacher gradients missing for {missing}")
        first = teacher_grads[keys[0]]
        # mean written as first + mean deviation: exact when all K agree
        dev = np.zeros_like(first)
        for k in keys[1:]:
            dev += teacher_grads[k] - first
        # where() also keeps the sign of zeros (-0.0 + 0.0 would give +0.0)
        out[role] = np.where(dev == 0.0, first, first + dev / bmap.K)
    return out


def momentum_mix(student_grad, block_grad, beta):
    """beta * block_grad + (1 - beta) * student_grad."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    gs = np.asarray(student_grad, dtype=np.float64)
    gt = np.asarray(block_grad, dtype=np.float64)
    if gs.shape != gt.shape:
        raise ValueError(f"gradient shapes differ: {gs.shape} vs {gt.shape}")
    mixed = beta * gt + (1.0 - beta) * gs
    # rounding guard keeps every element inside its two sources
    return np.clip(mixed, np.minimum(gs, gt), np.maximum(gs, gt))


def apply_momentum(grads, teacher_grads, bmap, beta, mix_embeddings=False):
    """Rewrite student layer gradients in ``grads`` in place."""
    for k in range(1, bmap.N + 1):
        avg = block_gradient_average(teacher_grads, bmap, k)
        for role, g in avg.items():
            name = f"student.layers.{k - 1}.{role}"
            grads[name] = momentum_mix(grads[name], g, beta)
    if mix_embeddings:
        for name in [n for n in grads if n.startswith("student.emb.")]:
            grads[name] = momentum_mix(grads[name], teacher_grads["teacher." + name[len("student."):]], beta)
    return grads


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        if set(params) != set(grads):
            extra = sorted(set(grads) - set(params))[:3]
            missing = sorted(set(params) - set(grads))[:3]
            raise ValueError(f"gradient/parameter mismatch: missing={missing} extra={extra}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p, g = params[name], grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------- training steps

def _collect(params):
    out = {}
    for n, p in params.items():
        out[n] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None
    return out


def _norm(grads, part):
    sq = 0.0
    for n, g in grads.items():
        if owner(n) == part:
            sq += float((g * g).sum())
    return math.sqrt(sq)


def compute_gradients(pair, batch, cfg, loss_fn, rng, teacher_train=True):
    """Forward once, then backprop the teacher and student losses separately.

    Returns ``(bundle, g_teacher, g_student)``; each gradient set covers every
    named parameter (zeros where a loss does not reach).
    """
    params = pair.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        bundle = loss_fn(pair, batch, cfg, rng, train=True, teacher_train=teacher_train)
    _check_finite(bundle)
    if bundle.teacher is not None:
        backward(bundle.teacher, tape)
    g_t = _collect(params)
    if bundle.student is not None:
        backward(bundle.student, tape)
    g_s = _collect(params)
    return bundle, g_t, g_s


def _check_finite(bundle):
    for k, v in bundle.components.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {k}: {v}")


def combine_joint(g_t, g_s):
    """Teacher partition from L^t, student partition from L^s, shared heads summed."""
    out = {}
    for n in g_t:
        part = owner(n)
        if part == "teacher":
            out[n] = g_t[n]
        elif part == "student":
            out[n] = g_s[n]
        else:
            out[n] = g_t[n] + g_s[n]
    return out


def _report(step, bundle, grads):
    c = bundle.components
    return {
        "step": step,
        "L_t": c.get("L_t"),
        "L_s": c.get("L_s"),
        "L_hidden_l": c.get("L_hidden_l"),
        "L_hidden_p": c.get("L_hidden_p"),
        "L_distill": c.get("L_distill"),
        "grad_norm_teacher": _norm(grads, "teacher"),
        "grad_norm_student": _norm(grads, "student"),
    }


def joint_step(pair, batch, cfg, loss_fn, opt, rng, step=0):
    """One joint teacher/student update; returns the step report."""
    if cfg.mode != "joint":
        raise ModeError(f"joint_step called in {cfg.mode!r} mode")
    bundle, g_t, g_s = compute_gradients(pair, batch, cfg, loss_fn, rng)
    grads = combine_joint(g_t, g_s)
    if cfg.enable_momentum and pair.student is not None:
        apply_momentum(grads, g_t, pair.bmap, cfg.beta, cfg.mix_embeddings)
    _finite_grads(grads)
    opt.step(pair.named_parameters(), grads)
    return _report(step, bundle, grads)


def frozen_teacher_step(pair, batch, cfg, loss_fn, opt, rng, step=0):
    """Student update against a frozen teacher (second phase of disjoint training).

    With momentum on, the teacher's gradients are still computed from its own
    loss on this batch, used for mixing, and then discarded.
    """
    bundle, g_t, g_s = compute_gradients(pair, batch, cfg, loss_fn, rng, teacher_train=False)
    trainable = pair.trainable()
    grads = {n: g_s[n] for n in trainable}
    if cfg.enable_momentum:
        apply_momentum(grads, g_t, pair.bmap, cfg.beta, cfg.mix_embeddings)
    _finite_grads(grads)
    opt.step(trainable, grads)
    return _report(step, bundle, grads)


def single_path_step(pair, batch, cfg, loss_fn, opt, rng, path, step=0):
    """Plain supervised update of one path ("teacher" or "student")."""
    bundle, g_t, g_s = compute_gradients(pair, batch, cfg, loss_fn, rng)
    src = g_t if path == "teacher" else g_s
    trainable = pair.trainable()
    grads = {n: src[n] for n in trainable}
    _finite_grads(grads)
    opt.step(trainable, grads)
    return _report(step, bundle, grads)


def _finite_grads(grads):
    for n, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")
