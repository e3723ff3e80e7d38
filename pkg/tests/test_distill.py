import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointkd import distill as D
from jointkd.encoder import BlockMap, EncoderConfig, LAYER_ROLES, encode, init_encoder, init_student_from_teacher
from jointkd.tasks import classify as task_classify
from jointkd.tensor import Tensor
from jointkd.train import build_pair, rngs

TINY = EncoderConfig(vocab_size=30, max_seq_len=6, hidden_dim=8, num_heads=2, ffn_dim=12, num_layers=4,
                     dropout=0.1)


@pytest.fixture
def pair():
    return build_pair("classify", TINY, 2, "joint", seed=0, num_classes=3, attn_dim=4)


@pytest.fixture
def batch():
    r = np.random.default_rng(7)
    tok = r.integers(2, 30, size=(5, 6))
    mask = np.ones((5, 6), bool)
    mask[1, 3:] = False
    tok[~mask] = 0
    return tok, mask, r.integers(0, 3, size=5)


def test_owner():
    assert D.owner("teacher.layers.0.attn.wq") == "teacher"
    assert D.owner("student.emb.token") == "student"
    assert D.owner("student_heads.pool.query") == "student"
    assert D.owner("pool.query") == "shared"
    assert D.owner("dense.weight") == "shared"


def test_config_validation():
    with pytest.raises(D.ConfigError):
        D.DistillConfig(temperature=0)
    with pytest.raises(D.ConfigError):
        D.DistillConfig(beta=1.5)
    with pytest.raises(D.ConfigError):
        D.DistillConfig(mode="sideways")


def test_hidden_loss_uses_block_last_layers(pair, batch):
    tok, mask, _ = batch
    ts = encode(pair.teacher, tok, mask)
    ss = encode(pair.student, tok, mask)
    w = mask[:, :, None].astype(float) * np.ones(8)

    def m(a, b):
        return float((w * (a - b) ** 2).sum() / w.sum())
    expected = m(ts.embeddings.data, ss.embeddings.data)
    expected += m(ts.layer_hidden[1].data, ss.layer_hidden[0].data)
    expected += m(ts.layer_hidden[3].data, ss.layer_hidden[1].data)
    assert D.hidden_layer_loss(ts, ss, pair.bmap).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        D.hidden_layer_loss(ts, ss, BlockMap(1, 2))


def test_student_losses_never_reach_teacher(pair, batch):
    cfg = D.DistillConfig()
    _, g_t, g_s = D.compute_gradients(pair, batch, cfg, task_classify.losses, rngs(0)["dropout"])
    for n, g in g_s.items():
        if D.owner(n) == "teacher":
            assert not g.any(), n
    for n, g in g_t.items():
        if D.owner(n) == "student":
            assert not g.any(), n
    assert any(g.any() for n, g in g_s.items() if D.owner(n) == "shared")


def _ce(p, q):
    return float(-(p * np.log(q)).sum(-1).mean())


def _sm(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 5.0])
def test_distillation_loss_logit_temperature(t, rng):
    zt, zs = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    got = D.distillation_loss(Tensor(zt), Tensor(zs), t).item()
    assert got == pytest.approx(_ce(_sm(zt / t), _sm(zs / t)), rel=1e-12)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 5.0])
def test_distillation_loss_probability_temperature(t, rng):
    zt, zs = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    got = D.distillation_loss(Tensor(zt), Tensor(zs), t, prob_temperature=True).item()
    oracle = float(-((_sm(zt) / t) * np.log(_sm(zs) / t)).sum(-1).mean())
    assert got == pytest.approx(oracle, rel=1e-12)


def test_distillation_t1_is_cross_entropy_and_min_at_teacher(rng):
    zt = rng.normal(size=(4, 3))
    p = _sm(zt)
    entropy = float(-(p * np.log(p)).sum(-1).mean())
    assert D.distillation_loss(Tensor(zt), Tensor(zt.copy())).item() == pytest.approx(entropy, abs=1e-12)
    assert D.distillation_loss(Tensor(zt), Tensor(rng.normal(size=(4, 3)))).item() > entropy


def test_total_distill_loss_toggles():
    a, b, c = Tensor(1.0), Tensor(10.0), Tensor(100.0)
    full = D.DistillConfig()
    assert D.total_distill_loss(a, b, c, full).item() == 111.0
    assert D.total_distill_loss(a, b, c, D.DistillConfig(enable_pooled_hidden_loss=False)).item() == 101.0
    none = D.DistillConfig(enable_hidden_layer_loss=False, enable_pooled_hidden_loss=False,
                           enable_distill_loss=False)
    assert D.total_distill_loss(a, b, c, none).item() == 0.0


# ------------------------------------------------------------ momentum algebra

def test_momentum_mix_endpoints(rng):
    gs, gt = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert D.momentum_mix(gs, gt, 0.0).tobytes() == gs.tobytes()
    assert D.momentum_mix(gs, gt, 1.0).tobytes() == gt.tobytes()
    np.testing.assert_allclose(D.momentum_mix(gs, gt, 0.3), 0.3 * gt + 0.7 * gs, rtol=1e-15)
    with pytest.raises(D.ConfigError):
        D.momentum_mix(gs, gt, -0.1)


finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite),
       st.floats(0.0, 1.0))
def test_momentum_mix_convex(gs, gt, beta):
    out = D.momentum_mix(gs, gt, beta)
    assert np.all(out >= np.minimum(gs, gt))
    assert np.all(out <= np.maximum(gs, gt))


def _grads_for(bm, rng, identical=False):
    g = {}
    base = {r: rng.normal(size=3) for r in LAYER_ROLES}
    for l in range(bm.K * bm.N):
        for r in LAYER_ROLES:
            g[f"teacher.layers.{l}.{r}"] = base[r].copy() if identical else rng.normal(size=3)
    return g, base


@pytest.mark.parametrize("K", [1, 2, 4])
@pytest.mark.parametrize("N", [1, 2, 4])
def test_block_gradient_average_oracle(K, N, rng):
    bm = BlockMap(K, N)
    g, _ = _grads_for(bm, rng)
    for i in range(1, N + 1):
        avg = D.block_gradient_average(g, bm, i)
        for r in LAYER_ROLES:
            members = [g[f"teacher.layers.{(i - 1) * K + j}.{r}"] for j in range(K)]
            np.testing.assert_allclose(avg[r], np.mean(members, axis=0), rtol=1e-14, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]),
       arrays(np.float64, 5, elements=finite))
def test_block_average_of_identical_is_exact(K, N, vec):
    bm = BlockMap(K, N)
    g = {f"teacher.layers.{l}.{r}": vec.copy() for l in range(K * N) for r in LAYER_ROLES}
    for i in range(1, N + 1):
        for r, v in D.block_gradient_average(g, bm, i).items():
            assert v.tobytes() == vec.tobytes()


def test_block_average_missing_raises(rng):
    g, _ = _grads_for(BlockMap(2, 1), rng)
    del g["teacher.layers.1.ffn.w1"]
    with pytest.raises(KeyError):
        D.block_gradient_average(g, BlockMap(2, 1), 1)


def test_apply_momentum_touches_only_student_layers(rng):
    bm = BlockMap(2, 2)
    gt, _ = _grads_for(bm, rng)
    grads = {f"student.layers.{j}.{r}": rng.normal(size=3) for j in range(2) for r in LAYER_ROLES}
    grads["student.emb.token"] = rng.normal(size=3)
    gt["teacher.emb.token"] = rng.normal(size=3)
    grads["dense.weight"] = rng.normal(size=3)
    before = {k: v.copy() for k, v in grads.items()}
    D.apply_momentum(grads, gt, bm, 1.0)
    assert grads["student.emb.token"].tobytes() == before["student.emb.token"].tobytes()
    assert grads["dense.weight"].tobytes() == before["dense.weight"].tobytes()
    for r in LAYER_ROLES:
        assert grads[f"student.layers.1.{r}"].tobytes() == \
            D.block_gradient_average(gt, bm, 2)[r].tobytes()
    D.apply_momentum(grads, gt, bm, 1.0, mix_embeddings=True)
    assert grads["student.emb.token"].tobytes() == gt["teacher.emb.token"].tobytes()


# ------------------------------------------------------------ optimizer and steps

def test_adam_first_steps_match_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), name="w")
    opt = D.Adam(lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    opt.step({"w": p}, {"w": g1})
    # first step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-7)
    p1 = p.data.copy()
    opt.step({"w": p}, {"w": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, p1 - step2, rtol=1e-12)


def test_adam_rejects_mismatched_sets():
    p = Tensor(np.zeros(2), name="w")
    with pytest.raises(ValueError):
        D.Adam().step({"w": p}, {"x": np.zeros(2)})
    with pytest.raises(ValueError):
        D.Adam().step({"w": p}, {"w": np.zeros(3)})


def test_combine_joint_partitions():
    g_t = {"teacher.a": np.array([1.0]), "student.a": np.array([2.0]), "pool.q": np.array([3.0])}
    g_s = {"teacher.a": np.array([10.0]), "student.a": np.array([20.0]), "pool.q": np.array([30.0])}
    out = D.combine_joint(g_t, g_s)
    assert out == {"teacher.a": 1.0, "student.a": 20.0, "pool.q": 33.0}


def test_joint_step_updates_everything_and_reports(pair, batch):
    before = {n: t.data.copy() for n, t in pair.named_parameters().items()}
    rep = D.joint_step(pair, batch, D.DistillConfig(), task_classify.losses, D.Adam(), rngs(0)["dropout"])
    for n, t in pair.named_parameters().items():
        assert not np.array_equal(t.data, before[n]) or n.endswith("emb.token") or "position" in n, n
    for k in ("L_t", "L_s", "L_hidden_l", "L_hidden_p", "L_distill", "grad_norm_teacher", "grad_norm_student"):
        assert math.isfinite(rep[k])
    assert rep["L_s"] >= rep["L_hidden_l"] + rep["L_hidden_p"] + rep["L_distill"] - 1e-12


def test_joint_step_refuses_disjoint_config(pair, batch):
    with pytest.raises(D.ModeError):
        D.joint_step(pair, batch, D.DistillConfig(mode="disjoint"), task_classify.losses, D.Adam(),
                     rngs(0)["dropout"])


def test_teacher_update_independent_of_student_loss(batch):
    """Teacher-owned parameters see only L_t: toggling student terms leaves them bitwise equal."""
    outs = []
    for cfg in (D.DistillConfig(), D.DistillConfig(enable_distill_loss=False, enable_momentum=False)):
        p = build_pair("classify", TINY, 2, "joint", seed=0, num_classes=3, attn_dim=4)
        D.joint_step(p, batch, cfg, task_classify.losses, D.Adam(), rngs(0)["dropout"])
        outs.append({t.name: t.data.tobytes() for t in p.teacher.tensors()})
    assert outs[0] == outs[1]


def test_frozen_teacher_step_leaves_teacher_alone(pair, batch):
    from jointkd.train import copy_heads
    frozen = {t.name for t in pair.teacher.tensors()} | {t.name for t in pair.heads.values()}
    p = D.ModelPair(pair.teacher, pair.student, pair.heads, 2, student_heads=copy_heads(pair.heads),
                    frozen=frozen)
    before = {n: t.data.copy() for n, t in p.named_parameters().items()}
    D.frozen_teacher_step(p, batch, D.DistillConfig(mode="disjoint"), task_classify.losses, D.Adam(),
                          rngs(0)["dropout"])
    for n, t in p.named_parameters().items():
        if n in frozen:
            assert np.array_equal(t.data, before[n]), n
    assert any(not np.array_equal(t.data, before[t.name]) for t in p.student_heads.values())


def test_nonfinite_loss_raises(pair, batch):
    pair.student.params["emb.token"].data[:] = np.nan
    with pytest.raises(D.NumericError):
        D.joint_step(pair, batch, D.DistillConfig(), task_classify.losses, D.Adam(), rngs(0)["dropout"])


def test_identical_networks_degenerate():
    cfg = TINY.with_layers(2)
    t = init_encoder(cfg, np.random.default_rng(0), prefix="teacher.")
    s = init_student_from_teacher(t, 2)
    tok = np.random.default_rng(1).integers(2, 30, size=(4, 6))
    mask = np.ones_like(tok, dtype=bool)
    a, b = encode(t, tok, mask), encode(s, tok, mask)
    assert D.hidden_layer_loss(a, b, BlockMap(1, 2)).item() == 0.0


# ------------------------------------------------------------ worked examples

def test_block_average_small_examples():
    bm = BlockMap(2, 1)
    g = {f"teacher.layers.{l}.{r}": np.array(v, float) for l, v in ((0, [1, 3]), (1, [3, 5]))
         for r in LAYER_ROLES}
    assert D.block_gradient_average(g, bm, 1)["ffn.b1"].tolist() == [2.0, 4.0]
    g = {f"teacher.layers.{l}.{r}": np.array(v, float) for l, v in ((0, [0, 0]), (1, [3, 5]))
         for r in LAYER_ROLES}
    assert D.block_gradient_average(g, bm, 1)["attn.wq"].tolist() == [1.5, 2.5]


def test_momentum_mix_direct_formula():
    assert D.momentum_mix(np.array([0.0]), np.array([10.0]), 0.1).tolist() == [1.0]


def test_adam_examples():
    p = Tensor(np.array([0.5, -1.0]), name="w")
    D.Adam().step({"w": p}, {"w": np.zeros(2)})
    assert p.data.tolist() == [0.5, -1.0]
    q = Tensor(np.array(0.0), name="q")
    D.Adam(lr=0.1).step({"q": q}, {"q": np.array(1.0)})
    assert q.item() == pytest.approx(-0.1, rel=1e-7)


def test_uniform_teacher_loss_is_log_c():
    assert D.teacher_loss(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_shared_head_additivity(pair, batch):
    cfg = D.DistillConfig()
    _, g_t, g_s = D.compute_gradients(pair, batch, cfg, task_classify.losses, rngs(0)["dropout"])
    combined = D.combine_joint(g_t, g_s)
    for n in pair.heads:
        np.testing.assert_allclose(combined[n], g_t[n] + g_s[n], rtol=0, atol=1e-12)


def test_toggles_off_is_plain_supervised_student(batch):
    """All distillation off: the student update equals student-alone CE training with the same heads."""
    off = D.DistillConfig(enable_hidden_layer_loss=False, enable_pooled_hidden_loss=False,
                          enable_distill_loss=False, enable_momentum=False)
    a = build_pair("classify", TINY, 2, "joint", seed=0, num_classes=3, attn_dim=4)
    _, _, g_s = D.compute_gradients(a, batch, off, task_classify.losses, rngs(0)["dropout"])
    # same student and head weights, no teacher, same dropout stream position
    b = build_pair("classify", TINY, 2, "student-only", seed=0, num_classes=3, attn_dim=4)
    r = rngs(0)["dropout"]
    # the joint forward draws teacher dropout masks first; replay them
    task_classify.forward_path(a.teacher, a.heads, batch[0], batch[1], True, r)
    _, _, g_b = D.compute_gradients(b, batch, off, task_classify.losses, r)
    for t in b.student.tensors():
        np.testing.assert_array_equal(g_s[t.name], g_b[t.name])
