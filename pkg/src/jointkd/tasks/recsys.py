"""Two-tower news recommendation.

Teacher and student encode news separately; the user encoder (an attentive
pooling layer over clicked-news embeddings, ``user.*`` heads) and the
inner-product click predictor are shared between the two paths.
"""

from __future__ import annotations

import numpy as np

from .. import distill as D
from .. import tensor as T
from ..encoder import encode
from ..heads import attentive_pool
from ..metrics import RankedImpression, ranking_report
from ..tensor import Tensor


def news_embed(enc, heads, tokens, mask, train=False, rng=None):
    """-> (EncoderState, (M, D) pooled news embeddings)."""
    state = encode(enc, tokens, mask, train=train, rng=rng)
    return state, attentive_pool(heads, state.layer_hidden[-1], mask)


def user_encode(heads, clicked):
    """User embedding from a (T, D) tensor of clicked-news embeddings.

    Rows are put in a canonical (lexicographic) order first, so any
    permutation of the history gives a bit-identical result. An empty
    history yields the zero vector.
    """
    if clicked is None or clicked.shape[0] == 0:
        return Tensor(np.zeros(heads["user.proj_weight"].shape[0]))
    order = np.lexsort(clicked.data.T[::-1])
    rows = T.take(clicked, order)
    u = attentive_pool(heads, rows, np.ones(rows.shape[0], dtype=bool), prefix="user.")
    return T.reshape(u, (rows.shape[1],))


def click_score(u, h_c):
    return T.sum(T.mul(u, h_c))


def make_batch(data, samples):
    """Gather the news needed by ``samples`` into one encoder batch.

    Histories are re-indexed into the batch and sorted, which keeps the
    batched user encoder order-free as well.
    """
    needed = sorted({n for s in samples for n in s.history} | {n for s in samples for n in s.candidates})
    local = {n: i for i, n in enumerate(needed)}
    B = len(samples)
    t_max = max(1, max(len(s.history) for s in samples))
    hist = np.zeros((B, t_max), dtype=np.int64)
    hmask = np.zeros((B, t_max), dtype=bool)
    for b, s in enumerate(samples):
        h = sorted(local[n] for n in s.history)
        hist[b, : len(h)] = h
        hmask[b, : len(h)] = True
    n_c = len(samples[0].candidates)
    if any(len(s.candidates) != n_c for s in samples):
        raise ValueError("training batch needs equal candidate counts")
    cands = np.array([[local[n] for n in s.candidates] for s in samples], dtype=np.int64)
    pos = np.array([int(np.argmax(s.labels)) for s in samples], dtype=np.int64)
    idx = np.array(needed, dtype=np.int64)
    return {
        "tokens": data.news_tokens[idx], "mask": data.news_mask[idx],
        "hist": hist, "hist_mask": hmask, "cands": cands, "pos": pos,
    }


def _path_scores(enc, heads, batch, train, rng):
    state, h = news_embed(enc, heads, batch["tokens"], batch["mask"], train, rng)
    B, t_max = batch["hist"].shape
    D_ = h.shape[1]
    warm = batch["hist_mask"].any(axis=1)
    hm = batch["hist_mask"].copy()
    hm[~warm, 0] = True  # placeholder slot for cold users, zeroed below
    H = T.reshape(T.take(h, batch["hist"].reshape(-1)), (B, t_max, D_))
    u = attentive_pool(heads, H, hm, prefix="user.")
    if not warm.all():
        u = T.mul(u, Tensor(np.repeat(warm[:, None].astype(np.float64), D_, axis=1)))
    n_c = batch["cands"].shape[1]
    C = T.reshape(T.take(h, batch["cands"].reshape(-1)), (B, n_c, D_))
    scores = T.reshape(T.matmul(C, T.reshape(u, (B, D_, 1))), (B, n_c))
    return state, h, u, scores


def losses(pair, batch, cfg, rng=None, train=True, teacher_train=True):
    comp = {}
    lt = ls = None
    if pair.teacher is not None:
        t_state, h_t, u_t, s_t = _path_scores(pair.teacher, pair.heads, batch, train and teacher_train, rng)
        lt = T.cross_entropy(s_t, batch["pos"])
        comp["L_t"] = lt.item()
    if pair.student is not None:
        s_state, h_s, u_s, s_s = _path_scores(pair.student, pair.s_heads, batch, train, rng)
        if pair.teacher is not None:
            hl = D.hidden_layer_loss(t_state, s_state, pair.bmap)
            hp = T.add(D.pooled_hidden_loss(h_t, h_s), D.pooled_hidden_loss(u_t, u_s))
            dl = D.distillation_loss(s_t, s_s, cfg.temperature, cfg.prob_temperature)
            comp.update(L_hidden_l=hl.item(), L_hidden_p=hp.item(), L_distill=dl.item())
            l_d = D.total_distill_loss(hl, hp, dl, cfg)
        else:
            l_d = Tensor(0.0)
        ls = T.add(l_d, T.cross_entropy(s_s, batch["pos"]))
        comp["L_s"] = ls.item()
    return D.LossBundle(lt, ls, comp)


def training_instances(data, negatives, rng):
    """One (1 positive + k negatives) instance per clicked candidate.

    Negatives are sampled from the impression's non-clicked items, with
    replacement when there are fewer than ``negatives``. Candidate order is
    shuffled.
    """
    out = []
    for s in data.samples:
        pos = [c for c, l in zip(s.candidates, s.labels) if l == 1]
        neg = [c for c, l in zip(s.candidates, s.labels) if l == 0]
        if not neg:
            continue
        for p in pos:
            pick = rng.choice(len(neg), size=negatives, replace=len(neg) < negatives)
            cands = [p] + [neg[i] for i in pick]
            labels = [1] + [0] * negatives
            order = rng.permutation(len(cands))
            out.append(type(s)(list(s.history), [cands[i] for i in order], [labels[i] for i in order]))
    return out


def batches(instances, data, batch_size, rng):
    order = rng.permutation(len(instances))
    for i in range(0, len(order), batch_size):
        yield make_batch(data, [instances[j] for j in order[i:i + batch_size]])


def score_impressions(pair, data, path, batch_size=256):
    """Per-impression candidate scores (evaluation mode)."""
    enc = pair.teacher if path == "teacher" else pair.student
    heads = pair.heads if path == "teacher" else pair.s_heads
    emb = []
    for i in range(0, len(data.news_tokens), batch_size):
        emb.append(news_embed(enc, heads, data.news_tokens[i:i + batch_size],
                              data.news_mask[i:i + batch_size])[1].data)
    emb = np.concatenate(emb)
    out = []
    for s in data.samples:
        u = user_encode(heads, Tensor(emb[s.history]) if s.history else None)
        out.append(emb[s.candidates] @ u.data)
    return out


def evaluate(pair, data, path):
    scores = score_impressions(pair, data, path)
    imps = [RankedImpression(list(sc), list(s.labels)) for sc, s in zip(scores, data.samples)]
    return ranking_report(imps)
