import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointkd import distill as D
from jointkd.data import (ImpressionSample, ImpressionSpec, RetrievalSpec, SyntheticSpec,
                          gen_synthetic_classification, gen_synthetic_impressions, gen_synthetic_retrieval)
from jointkd.encoder import EncoderConfig
from jointkd.tasks import classify as task_classify
from jointkd.tasks import recsys as task_recsys
from jointkd.tasks import retrieval as task_retrieval
from jointkd.tensor import Tensor
from jointkd.train import build_pair

CFG = EncoderConfig(vocab_size=200, max_seq_len=16, hidden_dim=16, num_heads=2, ffn_dim=24, num_layers=2)


@pytest.fixture(scope="module")
def rec_pair():
    return build_pair("recsys", CFG, 2, "joint", seed=0, attn_dim=8)


@pytest.fixture(scope="module")
def imps():
    return gen_synthetic_impressions(ImpressionSpec(seed=0, n_train=40, n_valid=5, n_test=20))


# ------------------------------------------------------------ recsys

@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(7))))
def test_user_encode_permutation_invariant_bitwise(perm):
    pair = build_pair("recsys", CFG, 2, "joint", seed=0, attn_dim=8)
    clicked = np.random.default_rng(0).normal(size=(7, 16))
    a = task_recsys.user_encode(pair.heads, Tensor(clicked)).data
    b = task_recsys.user_encode(pair.heads, Tensor(clicked[perm])).data
    assert a.tobytes() == b.tobytes()


def test_user_encode_empty_history(rec_pair):
    u = task_recsys.user_encode(rec_pair.heads, None)
    assert u.shape == (16,) and not u.data.any()
    assert task_recsys.user_encode(rec_pair.heads, Tensor(np.zeros((0, 16)))).data.shape == (16,)


def test_click_score_inner_product():
    u, h = np.arange(3.0), np.array([1.0, -1.0, 2.0])
    assert task_recsys.click_score(Tensor(u), Tensor(h)).item() == 3.0


def test_make_batch_maps_back_to_news(imps):
    data = imps["train"]
    samples = task_recsys.training_instances(data, 4, np.random.default_rng(0))[:6]
    b = task_recsys.make_batch(data, samples)
    for i, s in enumerate(samples):
        np.testing.assert_array_equal(b["tokens"][b["cands"][i]], data.news_tokens[s.candidates])
        assert s.labels[b["pos"][i]] == 1
        hist = b["hist"][i][b["hist_mask"][i]]
        assert sorted(data.news_tokens[s.history].tolist()) == sorted(b["tokens"][hist].tolist())


def test_training_instances_shape(imps):
    inst = task_recsys.training_instances(imps["train"], 3, np.random.default_rng(0))
    assert len(inst) == len(imps["train"])
    for s in inst:
        assert len(s.candidates) == 4 and sum(s.labels) == 1


def test_batched_scores_match_per_impression(rec_pair, imps):
    data = imps["test"]
    b = task_recsys.make_batch(data, data.samples)
    _, _, _, scores = task_recsys._path_scores(rec_pair.student, rec_pair.heads, b, False, None)
    ref = task_recsys.score_impressions(rec_pair, data, "student")
    np.testing.assert_allclose(scores.data, np.array(ref), rtol=1e-10, atol=1e-12)


def test_cold_user_scores_zero(rec_pair, imps):
    data = imps["test"]
    s = data.samples[0]
    cold = ImpressionSample([], s.candidates, s.labels)
    b = task_recsys.make_batch(data, [cold, s])
    _, _, u, scores = task_recsys._path_scores(rec_pair.teacher, rec_pair.heads, b, False, None)
    assert not scores.data[0].any() and scores.data[1].any()


def test_recsys_losses_and_evaluate(rec_pair, imps):
    b = task_recsys.make_batch(imps["train"], task_recsys.training_instances(imps["train"], 4,
                                                                              np.random.default_rng(1))[:8])
    bundle = task_recsys.losses(rec_pair, b, D.DistillConfig(), train=False)
    assert set(bundle.components) == {"L_t", "L_s", "L_hidden_l", "L_hidden_p", "L_distill"}
    rep = {r["metric"]: r for r in task_recsys.evaluate(rec_pair, imps["test"], "teacher")}
    assert set(rep) == {"auc", "mrr", "ndcg@5", "ndcg@10"}
    assert rep["auc"]["n_instances"] == 20


# ------------------------------------------------------------ classify

def test_classify_losses_and_evaluate():
    pair = build_pair("classify", CFG, 2, "joint", seed=0, num_classes=4, attn_dim=8)
    d = gen_synthetic_classification(SyntheticSpec(seed=0, n_train=20, n_valid=1, n_test=30))[0]
    bundle = task_classify.losses(pair, (d["train"].tokens, d["train"].mask, d["train"].labels),
                                  D.DistillConfig(), train=False)
    assert bundle.teacher is not None and bundle.student is not None
    rep = task_classify.evaluate(pair, d["test"], "student")
    assert [r["metric"] for r in rep] == ["accuracy", "macro_f1"]
    only = build_pair("classify", CFG, 2, "student-only", seed=0, num_classes=4, attn_dim=8)
    b2 = task_classify.losses(only, (d["train"].tokens, d["train"].mask, d["train"].labels), D.DistillConfig(),
                               np.random.default_rng(0))
    assert b2.teacher is None and set(b2.components) == {"L_s"}


def test_student_loss_is_distill_plus_ce():
    pair = build_pair("classify", CFG, 2, "joint", seed=0, num_classes=4, attn_dim=8)
    d = gen_synthetic_classification(SyntheticSpec(seed=0, n_train=20, n_valid=1, n_test=1))[0]["train"]
    batch = (d.tokens, d.mask, d.labels)
    c = task_classify.losses(pair, batch, D.DistillConfig(), train=False).components
    _, _, lg = task_classify.forward_path(pair.student, pair.heads, d.tokens, d.mask, False, None)
    ce = D.teacher_loss(lg, d.labels).item()
    assert c["L_s"] == pytest.approx(c["L_hidden_l"] + c["L_hidden_p"] + c["L_distill"] + ce, rel=1e-12)


# ------------------------------------------------------------ retrieval

def test_retrieval_scores_and_losses():
    pair = build_pair("retrieval", CFG, 2, "student-only", seed=0, attn_dim=8)
    pair.heads = {k: v for k, v in pair.heads.items() if k.startswith("pool.")}
    d = gen_synthetic_retrieval(RetrievalSpec(seed=0, n_train=10, n_valid=1, n_test=12))
    b = next(task_retrieval.batches(d["train"], 4, np.random.default_rng(0)))
    s = task_retrieval.scores(pair.student, pair.heads, b)
    q = task_retrieval._embed(pair.student, pair.heads, b[0], b[1], False, None).data
    doc = task_retrieval._embed(pair.student, pair.heads, b[2], b[3], False, None).data
    np.testing.assert_allclose(s.data, (q * doc).sum(1), rtol=1e-12)
    bundle = task_retrieval.losses(pair, b, D.DistillConfig(), np.random.default_rng(0))
    assert bundle.teacher is None and "L_s" in bundle.components
    rep = task_retrieval.evaluate(pair, d["test"])
    assert rep[0]["metric"] == "auc" and 0.0 <= rep[0]["value"] <= 1.0
