"""Finite-difference audit of every training loss.

For student-side losses the teacher outputs are computed once and held fixed,
matching the detachment used in training; finite differences are then taken
over student and head parameters only. The teacher loss is audited over
teacher and head parameters.
"""

from __future__ import annotations

import numpy as np

from . import distill as D
from . import tensor as T
from .tasks import classify as task_classify
from .tasks import recsys as task_recsys
from .tensor import Tape, backward

CLASSIFY_LOSSES = ("L_hidden_l", "L_hidden_p", "L_distill", "L_d", "L_s", "L_t")


def rel_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_scalar_fn(fn, params, n_samples, rng, step=1e-5):
    """Compare autodiff and central differences of ``fn()`` on sampled entries.

    ``params`` maps name -> Tensor. Returns (max relative error, n checked).
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}
    for p in params.values():
        p.grad = None

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    # half the picks among entries the loss actually reaches (most embedding
    # rows see no token in a small batch), the rest uniform over everything
    flat_grad = np.concatenate([analytic[n].reshape(-1) for n in names])
    live = np.flatnonzero(flat_grad)
    n_live = min(len(live), n_samples // 2)
    picks = set(rng.choice(live, size=n_live, replace=False).tolist()) if n_live else set()
    rest = np.setdiff1d(np.arange(total), np.fromiter(picks, dtype=np.int64, count=len(picks)))
    n_rest = min(len(rest), max(0, n_samples - len(picks)))
    picks.update(rng.choice(rest, size=n_rest, replace=False).tolist())
    picks = np.array(sorted(picks), dtype=np.int64)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[k], int(flat - offsets[k])
        arr = params[name].data.reshape(-1)
        orig = arr[local]
        arr[local] = orig + step
        up = fn().item()
        arr[local] = orig - step
        down = fn().item()
        arr[local] = orig
        numeric = (up - down) / (2 * step)
        worst = max(worst, float(rel_error(analytic[name].reshape(-1)[local], numeric)))
    return worst, len(picks)


def _params(pair, parts):
    return {n: t for n, t in pair.named_parameters().items() if D.owner(n) in parts}


def classify_terms(pair, batch, cfg):
    """name -> zero-arg closure building that loss (teacher outputs frozen)."""
    tokens, mask, labels = batch
    t_state, h_t, t_logits = task_classify.forward_path(pair.teacher, pair.heads, tokens, mask, False, None)

    def student():
        s_state, h_s, s_logits = task_classify.forward_path(pair.student, pair.s_heads, tokens, mask,
                                                            False, None)
        hl = D.hidden_layer_loss(t_state, s_state, pair.bmap)
        hp = D.pooled_hidden_loss(h_t, h_s)
        dl = D.distillation_loss(t_logits, s_logits, cfg.temperature, cfg.prob_temperature)
        ld = D.total_distill_loss(hl, hp, dl, cfg)
        return {"L_hidden_l": hl, "L_hidden_p": hp, "L_distill": dl, "L_d": ld,
                "L_s": D.student_loss(ld, s_logits, labels)}

    def teacher():
        _, _, lg = task_classify.forward_path(pair.teacher, pair.heads, tokens, mask, False, None)
        return D.teacher_loss(lg, labels)

    fns = {k: (lambda k=k: student()[k]) for k in CLASSIFY_LOSSES[:-1]}
    fns["L_t"] = teacher
    return fns


def recsys_terms(pair, batch, cfg):
    t_state, h_t, u_t, s_t = task_recsys._path_scores(pair.teacher, pair.heads, batch, False, None)

    def student():
        s_state, h_s, u_s, s_s = task_recsys._path_scores(pair.student, pair.s_heads, batch, False, None)
        hl = D.hidden_layer_loss(t_state, s_state, pair.bmap)
        hp = T.add(D.pooled_hidden_loss(h_t, h_s), D.pooled_hidden_loss(u_t, u_s))
        dl = D.distillation_loss(s_t, s_s, cfg.temperature, cfg.prob_temperature)
        ld = D.total_distill_loss(hl, hp, dl, cfg)
        return T.add(ld, T.cross_entropy(s_s, batch["pos"]))

    def teacher():
        return T.cross_entropy(task_recsys._path_scores(pair.teacher, pair.heads, batch, False, None)[3],
                               batch["pos"])

    return {"recsys_L_s": student, "recsys_L_t": teacher}


def run(pair, batch, cfg, task="classify", n_samples=200, seed=0, tol=1e-3):
    """Audit every loss; returns a report dict with a per-loss max relative error."""
    rng = np.random.default_rng(seed)
    terms = classify_terms(pair, batch, cfg) if task == "classify" else recsys_terms(pair, batch, cfg)
    student_side = _params(pair, ("student", "shared"))
    teacher_side = _params(pair, ("teacher", "shared"))
    rows = []
    for name, fn in terms.items():
        params = teacher_side if name.endswith("L_t") else student_side
        err, n = check_scalar_fn(fn, params, n_samples, rng)
        rows.append({"loss": name, "max_rel_error": err, "n_params": n, "pass": err < tol})
    return {"tolerance": tol, "losses": rows, "pass": all(r["pass"] for r in rows)}
