"""News topic classification through shared pooling and dense heads."""

from __future__ import annotations

import numpy as np

from .. import distill as D
from .. import tensor as T
from ..encoder import encode
from ..heads import attentive_pool, classify
from ..metrics import classification_report


def forward_path(enc, heads, tokens, mask, train, rng):
    state = encode(enc, tokens, mask, train=train, rng=rng)
    h = attentive_pool(heads, state.layer_hidden[-1], mask)
    return state, h, classify(heads, h)


def losses(pair, batch, cfg, rng=None, train=True, teacher_train=True):
    """Loss bundle for one classification batch ``(tokens, mask, labels)``."""
    tokens, mask, labels = batch
    comp = {}
    lt = ls = None
    if pair.teacher is not None:
        t_state, h_t, t_logits = forward_path(pair.teacher, pair.heads, tokens, mask,
                                              train and teacher_train, rng)
        lt = D.teacher_loss(t_logits, labels)
        comp["L_t"] = lt.item()
    if pair.student is not None:
        s_state, h_s, s_logits = forward_path(pair.student, pair.s_heads, tokens, mask, train, rng)
        if pair.teacher is not None:
            hl = D.hidden_layer_loss(t_state, s_state, pair.bmap)
            hp = D.pooled_hidden_loss(h_t, h_s)
            dl = D.distillation_loss(t_logits, s_logits, cfg.temperature, cfg.prob_temperature)
            comp.update(L_hidden_l=hl.item(), L_hidden_p=hp.item(), L_distill=dl.item())
            l_d = D.total_distill_loss(hl, hp, dl, cfg)
        else:
            l_d = T.Tensor(0.0)
        ls = D.student_loss(l_d, s_logits, labels)
        comp["L_s"] = ls.item()
    return D.LossBundle(lt, ls, comp)


def batches(data, batch_size, rng):
    order = rng.permutation(len(data))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield data.tokens[idx], data.mask[idx], data.labels[idx]


def logits(pair, data, path, batch_size=256):
    enc = pair.teacher if path == "teacher" else pair.student
    heads = pair.heads if path == "teacher" else pair.s_heads
    out = []
    for i in range(0, len(data), batch_size):
        _, _, lg = forward_path(enc, heads, data.tokens[i:i + batch_size], data.mask[i:i + batch_size],
                                False, None)
        out.append(lg.data)
    return np.concatenate(out) if out else np.zeros((0, data.num_classes))


def evaluate(pair, data, path):
    preds = logits(pair, data, path).argmax(axis=1)
    return classification_report(preds, data.labels, data.num_classes)
