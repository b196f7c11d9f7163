import numpy as np
import pytest

from sketchmgt import autodiff as ad
from sketchmgt.autodiff import Tensor
from sketchmgt.data import RawDrawing, flatten, pad_truncate, synthesize_sketch
from sketchmgt.gradcheck import TOLERANCE, check_function, check_model, tiny_config
from sketchmgt.model import (
    MGTConfig, attention_maps, build_graphs, classify, count_parameters, embed_input, forward,
    graph_attention, init_params, make_batch, mgmha, mgmha_unfused, mgt_layer, multi_head,
    parameter_breakdown, readout,
)


def small_cfg(**kw):
    base = dict(S=12, d_hat=4, L=2, heads_per_graph=2, dropout=0.0, graph_specs="khop:1,khop:2,global",
                num_classes=5)
    base.update(kw)
    return MGTConfig(**base)


def sketches(n, S, seed=0, label=0):
    rng = np.random.default_rng(seed)
    return [pad_truncate(flatten(synthesize_sketch(rng, int(rng.integers(1, 4)), (1, 5))), S, label=label)
            for _ in range(n)]


def batch_for(cfg, sks, seed=0):
    rng = np.random.default_rng(seed)
    return make_batch(sks, [build_graphs(cfg, s, rng) for s in sks])


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# --- embedding ---

def test_embed_layout():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(0), np.float64)
    sk = pad_truncate(flatten(RawDrawing([[(128, 0), (0, 64)]], "t")), cfg.S)
    h = embed_input(p, make_batch([sk], [build_graphs(cfg, sk)])).data[0]
    assert h.shape == (cfg.S, cfg.d)
    dh = cfg.d_hat
    W, T = p["embed.coord"].data, p["embed.table"].data
    np.testing.assert_allclose(h[0, :dh], 0.5 * W[0])
    np.testing.assert_allclose(h[1, :dh], 0.25 * W[1])
    np.testing.assert_allclose(h[0, dh:2 * dh], T[cfg.S + 0])  # ongoing flag
    np.testing.assert_allclose(h[1, dh:2 * dh], T[cfg.S + 1])  # stroke end
    np.testing.assert_allclose(h[5, dh:2 * dh], T[cfg.S + 2])  # padding
    np.testing.assert_allclose(h[5, :dh], -(W[0] + W[1]) / 256)
    for s in range(cfg.S):
        np.testing.assert_allclose(h[s, 2 * dh:], T[s])


# --- graph attention ---

def test_attention_two_node_example():
    q = k = t64(np.zeros((2, 1)))
    v = t64([[1.0], [2.0]])
    adj = np.eye(2, dtype=bool)
    post, _ = graph_attention(q, k, v, adj, "post_softmax")
    pre, _ = graph_attention(q, k, v, adj, "pre_softmax")
    np.testing.assert_allclose(post.data[:, 0], [0.5, 1.0])
    np.testing.assert_allclose(pre.data[:, 0], [1.0, 2.0])


def test_attention_all_ones_matches_plain():
    rng = np.random.default_rng(0)
    q, k, v = (t64(rng.standard_normal((4, 3))) for _ in range(3))
    ones = np.ones((4, 4), bool)
    s = q.data @ k.data.T / np.sqrt(3)
    w = np.exp(s - s.max(1, keepdims=True))
    ref = (w / w.sum(1, keepdims=True)) @ v.data
    for mode in ("pre_softmax", "post_softmax"):
        np.testing.assert_allclose(graph_attention(q, k, v, ones, mode)[0].data, ref, atol=1e-12)


def test_attention_one_hot_row():
    rng = np.random.default_rng(1)
    q, k, v = (t64(rng.standard_normal((4, 3))) for _ in range(3))
    adj = np.ones((4, 4), bool)
    adj[0] = [0, 0, 1, 0]
    out, _ = graph_attention(q, k, v, adj, "pre_softmax")
    np.testing.assert_array_equal(out.data[0], v.data[2])


def test_attention_bad_mode():
    x = t64(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        graph_attention(x, x, x, np.ones((2, 2)), "sideways")


@pytest.mark.parametrize("mode", ["pre_softmax", "post_softmax"])
def test_attention_gradcheck(mode):
    rng = np.random.default_rng(2)
    adj = rng.random((2, 5, 5)) < 0.5
    adj |= np.eye(5, dtype=bool)
    ins = [rng.standard_normal((2, 5, 3)) for _ in range(3)]
    assert check_function(lambda t: graph_attention(t[0], t[1], t[2], adj, mode)[0], ins) < TOLERANCE


# --- multi-head / mgmha ---

def test_multi_head_single_head_identity_wo():
    cfg = small_cfg(heads_per_graph=1, graph_specs="khop:1")
    p = init_params(cfg, np.random.default_rng(3), np.float64)
    p["layers.0.graph0.wo"].data = np.eye(cfg.d)
    b = batch_for(cfg, sketches(2, cfg.S))
    h = t64(np.random.default_rng(4).standard_normal((2, cfg.S, cfg.d)))
    out, _ = multi_head(h, b.adj[0], p, "layers.0.graph0", False, None)
    q, k, v = (ad.matmul(h, p[f"layers.0.graph0.{w}"]) for w in ("wq", "wk", "wv"))
    ref, _ = graph_attention(q, k, v, b.adj[0], cfg.mask_mode)
    assert out.shape == (2, cfg.S, cfg.d)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_multi_head_gradcheck_two_heads():
    cfg = small_cfg(S=6, d_hat=2, heads_per_graph=2, graph_specs="khop:1")
    p = init_params(cfg, np.random.default_rng(5), np.float64)
    b = batch_for(cfg, sketches(2, cfg.S))
    rng = np.random.default_rng(6)
    ws = [p[f"layers.0.graph0.{w}"].data for w in ("wq", "wk", "wv", "wo")]

    def f(t):
        for name, x in zip(("wq", "wk", "wv", "wo"), t[1:]):
            p.tensors[f"layers.0.graph0.{name}"] = x
        return multi_head(t[0], b.adj[0], p, "layers.0.graph0", False, None)[0]

    assert check_function(f, [rng.standard_normal((2, 6, cfg.d))] + ws) < TOLERANCE


@pytest.mark.parametrize("mode", ["pre_softmax", "post_softmax"])
def test_fused_matches_unfused(mode):
    cfg = small_cfg(mask_mode=mode)
    p = init_params(cfg, np.random.default_rng(7), np.float64)
    b = batch_for(cfg, sketches(3, cfg.S))
    h = t64(np.random.default_rng(8).standard_normal((3, cfg.S, cfg.d)))
    a = mgmha(h, b.adj, p, 0, False, None).data
    r = mgmha_unfused(h, b.adj, p, 0, False, None).data
    assert a.shape == (3, cfg.S, cfg.d)
    np.testing.assert_allclose(a, r, atol=1e-12)


def test_mgmha_single_graph():
    cfg = small_cfg(graph_specs="global")
    p = init_params(cfg, np.random.default_rng(9), np.float64)
    b = batch_for(cfg, sketches(2, cfg.S))
    h = t64(np.random.default_rng(10).standard_normal((2, cfg.S, cfg.d)))
    gh, _ = multi_head(h, b.adj[0], p, "layers.0.graph0", False, None)
    ref = np.maximum(gh.data @ p["layers.0.mix.weight"].data + p["layers.0.mix.bias"].data, 0)
    np.testing.assert_allclose(mgmha(h, b.adj, p, 0, False, None).data, ref, atol=1e-12)


def test_mgmha_negative_gheads_give_zero():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(11), np.float64)
    b = batch_for(cfg, sketches(2, cfg.S))
    p["layers.0.mix.weight"].data[:] = 0
    p["layers.0.mix.bias"].data[:] = -1
    h = t64(np.ones((2, cfg.S, cfg.d)))
    assert not mgmha(h, b.adj, p, 0, False, None).data.any()


# --- locality / coupling ---

def _layer1(p, b, h):
    return mgt_layer(t64(h), b.adj, b.valid, p, 0, False, None).data


def test_pre_softmax_locality_on_random_sketches():
    cfg = small_cfg(S=16)
    p = init_params(cfg, np.random.default_rng(12), np.float64)
    rng = np.random.default_rng(13)
    checked = 0
    for sk in sketches(50, cfg.S, seed=14):
        b = batch_for(cfg, [sk])
        h = embed_input(p, b).data
        base = _layer1(p, b, h)
        reach = b.adj[:, 0].any(axis=0)
        t = sk.true_len
        for i in range(t):
            far = [j for j in range(t) if not reach[i, j]]
            if not far:
                continue
            h2 = h.copy()
            h2[0, far] += 5.0 * rng.standard_normal((len(far), cfg.d))
            np.testing.assert_array_equal(_layer1(p, b, h2)[0, i], base[0, i])
            checked += 1
    assert checked > 20


def test_post_softmax_denominator_coupling_witness():
    cfg = small_cfg(S=6, mask_mode="post_softmax", graph_specs="khop:1")
    p = init_params(cfg, np.random.default_rng(15), np.float64)
    sk = pad_truncate(flatten(RawDrawing([[(0, 0), (10, 10), (20, 20), (30, 30), (40, 40)]], "t")), 6)
    b = batch_for(cfg, [sk])
    assert not b.adj[0, 0, 0, 4]
    h = embed_input(p, b).data
    h2 = h.copy()
    h2[0, 4] += 3.0
    assert np.abs(_layer1(p, b, h2)[0, 0] - _layer1(p, b, h)[0, 0]).max() > 1e-6


def test_post_softmax_weights_are_masked_softmax():
    cfg = small_cfg(mask_mode="post_softmax")
    p = init_params(cfg, np.random.default_rng(16), np.float64)
    b = batch_for(cfg, sketches(2, cfg.S))
    _, acts = forward(p, b, keep_activations=True)
    h = acts.hidden[0]
    for g in range(cfg.G):
        q = h @ p[f"layers.0.graph{g}.wq"].data
        k = h @ p[f"layers.0.graph{g}.wk"].data
        for i in range(cfg.heads_per_graph):
            cols = slice(i * cfg.d_head, (i + 1) * cfg.d_head)
            s = q[..., cols] @ np.swapaxes(k[..., cols], -1, -2) / np.sqrt(cfg.d_head)
            e = np.exp(s - s.max(-1, keepdims=True))
            ref = b.adj[g] * e / e.sum(-1, keepdims=True)
            np.testing.assert_allclose(acts.attention[0][g][:, i], ref, atol=1e-6)


# --- layer, readout, classifier ---

def test_layer_identity_with_zero_weights():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(17), np.float64)
    for name, t in p.items():
        if name.startswith("layers.0") and not name.endswith(".gamma"):
            t.data[:] = 0
    b = batch_for(cfg, sketches(2, cfg.S))
    h = np.random.default_rng(18).standard_normal((2, cfg.S, cfg.d))
    out = _layer1(p, b, h)
    # two batch-norm sites, each with identity running stats
    np.testing.assert_allclose(out, h / (1 + 1e-5), rtol=1e-12)


def test_readout_examples():
    e = np.arange(4.0)
    h = t64(np.tile(e, (2, 5, 1)))
    np.testing.assert_allclose(readout(h, [3, 5]).data, [3 * e, 5 * e])
    x = np.random.default_rng(19).standard_normal((1, 5, 4))
    y = x.copy()
    y[0, 3:] = y[0, [4, 3]]
    np.testing.assert_allclose(readout(t64(x), [3]).data, readout(t64(y), [3]).data)
    with pytest.raises(ValueError):
        readout(h, [0, 2])


def test_classifier_zero_weights():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(20), np.float64)
    for name, t in p.items():
        if name.startswith("head."):
            t.data[:] = 0
    logits = classify(t64(np.ones((3, cfg.d))), p, False, None).data
    assert logits.shape == (3, cfg.num_classes) and not logits.any()


def test_classifier_gradcheck():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(21), np.float64)
    names = [n for n, _ in p.items() if n.startswith("head.")]

    def f(t):
        for n, x in zip(names, t[1:]):
            p.tensors[n] = x
        return classify(t[0], p, False, None)

    ins = [np.random.default_rng(22).standard_normal((3, cfg.d))] + [p[n].data for n in names]
    assert check_function(f, ins) < TOLERANCE


# --- forward ---

def test_eval_forward_deterministic():
    cfg = small_cfg(dropout=0.2)
    p = init_params(cfg, np.random.default_rng(23))
    b = batch_for(cfg, sketches(4, cfg.S))
    a, _ = forward(p, b)
    c, _ = forward(p, b)
    np.testing.assert_array_equal(a.data, c.data)
    assert a.shape == (4, cfg.num_classes)


def test_forward_rejects_wrong_S():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(24))
    b = batch_for(small_cfg(S=10), sketches(2, 10))
    with pytest.raises(ValueError):
        forward(p, b)


def test_ff_only_ignores_graphs():
    cfg = small_cfg(variant="ff_only")
    p = init_params(cfg, np.random.default_rng(25))
    b = batch_for(cfg, sketches(3, cfg.S))
    a, _ = forward(p, b)
    b.adj = np.random.default_rng(26).random(b.adj.shape) < 0.5
    c, _ = forward(p, b)
    np.testing.assert_array_equal(a.data, c.data)


def _embed_into_larger(p_small, cfg_big):
    """Copy weights to a model with a longer padded sequence."""
    rng = np.random.default_rng(99)
    p_big = init_params(cfg_big, rng, np.float64)
    S0, S1 = p_small.cfg.S, cfg_big.S
    for name, t in p_small.items():
        if name == "embed.table":
            T = p_big[name].data
            T[:S0] = t.data[:S0]
            T[S1:S1 + 3] = t.data[S0:S0 + 3]
        else:
            p_big[name].data = t.data.copy()
    for site, st in p_small.bn.items():
        p_big.bn[site].running_mean = st.running_mean.copy()
        p_big.bn[site].running_var = st.running_var.copy()
    return p_big


@pytest.mark.parametrize("train", [False, True])
def test_padding_insensitivity(train):
    cfg_a, cfg_b = small_cfg(S=12), small_cfg(S=20)
    p_a = init_params(cfg_a, np.random.default_rng(27), np.float64)
    for name, t in p_a.items():  # make running stats and BN affine non-trivial
        if ".bn" in name:
            t.data += 0.3 * np.random.default_rng(28).standard_normal(t.shape)
    for st in p_a.bn.values():
        st.running_mean += 0.2
        st.running_var *= 1.5
    p_b = _embed_into_larger(p_a, cfg_b)
    raw = [synthesize_sketch(np.random.default_rng(s), 2, (2, 5)) for s in range(3)]
    sa = [pad_truncate(flatten(d), 12) for d in raw]
    sb = [pad_truncate(flatten(d), 20) for d in raw]
    la, _ = forward(p_a, batch_for(cfg_a, sa), train=train)
    lb, _ = forward(p_b, batch_for(cfg_b, sb), train=train)
    np.testing.assert_allclose(la.data, lb.data, atol=1e-10)


# --- parameter counts ---

def test_parameter_counts_match_published():
    assert count_parameters(MGTConfig()) == 10_096_601
    assert count_parameters(MGTConfig(d_hat=256)) == 39_984_729


def test_parameter_count_same_for_repeated_graph():
    a = MGTConfig(d_hat=256, graph_specs="khop:1,khop:2,global")
    b = MGTConfig(d_hat=256, graph_specs="khop:1,khop:1,khop:1")
    assert count_parameters(a) == count_parameters(b)


@pytest.mark.parametrize("d_hat,delta", [(128, 345), (32, 7)])
def test_parameter_count_num_classes_delta(d_hat, delta):
    a = MGTConfig(d_hat=d_hat, num_classes=345)
    b = MGTConfig(d_hat=d_hat, num_classes=345 + delta)
    assert count_parameters(b) - count_parameters(a) == 4 * d_hat * delta + delta


def test_breakdown_sums_to_total():
    cfg = MGTConfig()
    assert sum(parameter_breakdown(cfg).values()) == count_parameters(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        MGTConfig(d_hat=5, heads_per_graph=4)
    with pytest.raises(ValueError):
        MGTConfig(mask_mode="after")
    with pytest.raises(ValueError):
        MGTConfig(graph_specs="")
    cfg = small_cfg()
    assert MGTConfig.from_dict(cfg.to_dict()) == cfg


# --- attention export ---

@pytest.mark.parametrize("mode", ["pre_softmax", "post_softmax"])
def test_attention_maps_properties(mode):
    cfg = small_cfg(mask_mode=mode)
    p = init_params(cfg, np.random.default_rng(29))
    sk = sketches(1, cfg.S, seed=30)[0]
    adjs = build_graphs(cfg, sk)
    maps, logits = attention_maps(p, sk, adjs)
    assert len(maps) == cfg.L * cfg.G * cfg.heads_per_graph
    assert logits.shape == (cfg.num_classes,)
    for (l, g, i), m in maps.items():
        assert m.shape == (cfg.S, cfg.S)
        assert m.min() >= 0 and m.max() <= 1
        assert not m[adjs[g].data == 0].any()
        if mode == "pre_softmax":
            np.testing.assert_allclose(m[:sk.true_len].sum(1), 1, atol=1e-5)


# --- end to end ---

def test_end_to_end_gradcheck():
    results = check_model(tiny_config(), batch_size=2, seed=0)
    bad = [(r.name, r.max_rel_error) for r in results if not r.ok]
    assert not bad, bad
    assert {r.name for r in results} >= {"embed.coord", "layers.1.bn2.gamma", "head.out.bias"}


def test_end_to_end_gradcheck_post_softmax():
    results = check_model(tiny_config(mask_mode="post_softmax"), batch_size=2, seed=1, max_entries=6)
    assert all(r.ok for r in results), [(r.name, r.max_rel_error) for r in results]
