"""Two-tower retrieval fine-tuning of a (distilled) encoder.

Query and document towers share one encoder and its pooling layer; the
relevance logit is their inner product, trained with binary cross entropy.
"""

from __future__ import annotations

import numpy as np

from .. import distill as D
from .. import tensor as T
from ..encoder import encode
from ..heads import attentive_pool
from ..metrics import RankedImpression, auc


def _tower(pair):
    if pair.student is not None:
        return pair.student, pair.s_heads
    return pair.teacher, pair.heads


def _embed(enc, heads, tokens, mask, train, rng):
    state = encode(enc, tokens, mask, train=train, rng=rng)
    return attentive_pool(heads, state.layer_hidden[-1], mask)


def scores(enc, heads, batch, train=False, rng=None):
    qt, qm, dt, dm, _ = batch
    q = _embed(enc, heads, qt, qm, train, rng)
    d = _embed(enc, heads, dt, dm, train, rng)
    B, Dm = q.shape
    return T.reshape(T.matmul(T.reshape(q, (B, 1, Dm)), T.reshape(d, (B, Dm, 1))), (B,))


def losses(pair, batch, cfg, rng=None, train=True, teacher_train=True):
    enc, heads = _tower(pair)
    loss = T.bce_with_logits(scores(enc, heads, batch, train, rng), batch[4])
    comp = {"L_s": loss.item()}
    if pair.student is not None:
        return D.LossBundle(None, loss, comp)
    comp["L_t"] = comp.pop("L_s")
    return D.LossBundle(loss, None, comp)


def batches(data, batch_size, rng):
    order = rng.permutation(len(data))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield (data.query_tokens[idx], data.query_mask[idx], data.doc_tokens[idx], data.doc_mask[idx],
               data.labels[idx])


def predict(pair, data, batch_size=256):
    enc, heads = _tower(pair)
    out = []
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        b = (data.query_tokens[sl], data.query_mask[sl], data.doc_tokens[sl], data.doc_mask[sl], None)
        out.append(scores(enc, heads, b).data)
    return np.concatenate(out)


def evaluate(pair, data, path=None):
    s = predict(pair, data)
    value = auc(RankedImpression(list(s), list(data.labels)))
    return [{"metric": "auc", "value": value, "n_instances": len(data), "n_excluded": 0}]
