import numpy as np
import pytest
import torch

from clusterpdp import encoder as E, numcore as nc
from clusterpdp.decoder import init_params, model_config
from clusterpdp.instances import generate, make_rng

f64 = torch.float64


def enc_store(cfg, seed=0, dtype=f64):
    store = nc.ParamStore(dtype)
    E.init_params(store, cfg, make_rng(seed))
    return store


def test_default_shape_and_finite():
    cfg = E.EncoderConfig()
    H = E.encode(generate(5, "clustered", 1), enc_store(cfg, dtype=torch.float32), cfg)
    assert H.shape == (11, 128)
    assert torch.isfinite(H).all()


def test_config_validation():
    with pytest.raises(ValueError):
        E.EncoderConfig(d_h=10, heads=3)
    with pytest.raises(ValueError):
        E.EncoderConfig(layers=0)


def test_embedding_rows_and_zero_weights():
    cfg = E.EncoderConfig(d_h=8, layers=1, heads=2, ffn_hidden=16)
    store = enc_store(cfg)
    coords = torch.tensor([[[0.1, 0.2], [0.3, 0.3], [0.3, 0.3], [0.9, 0.9], [0.5, 0.5]]], dtype=f64)
    h = E.embed_inputs(coords, E.roles_tensor(2), store)
    assert torch.equal(h[0, 1], h[0, 2])
    with torch.no_grad():
        store["encoder.embed.W"].zero_()
    assert torch.equal(E.embed_inputs(coords, E.roles_tensor(2), store), torch.zeros(1, 5, 8, dtype=f64))


def test_depot_cross_attention_over_equal_customers():
    d = 4
    store = nc.ParamStore(f64)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        store.add(f"encoder.depot.{w}", np.eye(d))
    v = torch.tensor([0.3, -1.0, 2.0, 0.5], dtype=f64)
    H = torch.cat([torch.randn(1, 1, d, dtype=f64), v.expand(1, 4, d)], dim=1)
    out = E.depot_cross_attention(H, store, heads=2)
    assert torch.allclose(out[0, 0], v, atol=1e-12)
    assert torch.equal(out[:, 1:], H[:, 1:])
    lone = torch.randn(1, 1, d, dtype=f64)
    assert torch.equal(E.depot_cross_attention(lone, store, 2), lone)


def test_cluster_mask_structure():
    M = E.cluster_mask(E.roles_tensor(3), f64)
    assert torch.equal(M, M.T)
    assert (torch.diagonal(M) == 0).all()
    assert (M[0, 1:] == nc.NEG_INF).all() and M[0, 0] == 0
    roles = E.roles_tensor(3)
    assert ((M == 0) == (roles[:, None] == roles[None, :])).all()


def test_cluster_branch_ignores_other_roles():
    cfg = E.EncoderConfig(d_h=8, layers=1, heads=2, ffn_hidden=16)
    store = enc_store(cfg)
    roles = E.roles_tensor(4)
    H = torch.randn(2, 9, 8, dtype=f64)
    p = "encoder.layers.0.cluster."
    w = nc.attention_weights(H @ store[p + "Wq"], H @ store[p + "Wk"], 2, E.cluster_mask(roles, f64))
    other = roles[:, None] != roles[None, :]
    assert (w[..., other] == 0).all()


def _relabel(coords, n, perm):
    """Permute pairs: pair i becomes pair perm[i] (pickups and deliveries move together)."""
    idx = np.concatenate([[0], 1 + perm, 1 + n + perm])
    return coords[:, idx], idx


@pytest.mark.parametrize("cluster", [True, False])
def test_permutation_equivariance(cluster):
    cfg = E.EncoderConfig(d_h=32, layers=2, heads=4, ffn_hidden=64, cluster_attention=cluster)
    store = enc_store(cfg, dtype=torch.float32)
    n = 5
    coords = torch.tensor(generate(n, "clustered", 3).coords, dtype=torch.float32)[None]
    perm = np.random.default_rng(0).permutation(n)
    moved, idx = _relabel(coords, n, perm)
    H = E.encode_batch(coords, store, cfg)
    Hp = E.encode_batch(moved, store, cfg)
    assert torch.allclose(Hp, H[:, idx], atol=1e-5)


def _reference_layer(H, store, layer, cfg, mask):
    """Same layer built from torch.nn.MultiheadAttention and torch's layer_norm."""
    d = cfg.d_h
    p = f"encoder.layers.{layer}."

    def attn(branch, attn_mask):
        m = torch.nn.MultiheadAttention(d, cfg.heads, bias=False, batch_first=True, dtype=H.dtype)
        with torch.no_grad():
            m.in_proj_weight.copy_(torch.cat([store[p + branch + w].T for w in (".Wq", ".Wk", ".Wv")]))
            m.out_proj.weight.copy_(store[p + branch + ".Wo"].T)
        return m(H, H, H, attn_mask=attn_mask, need_weights=False)[0]

    fused = attn("global", None)
    if cfg.cluster_attention:
        fused = fused + attn("cluster", mask)
    ln = torch.nn.functional.layer_norm
    H1 = ln(H + fused @ store[p + "combine.W"] + store[p + "combine.b"], (d,),
            store[p + "ln1.gain"], store[p + "ln1.shift"], eps=nc.LN_EPS)
    ff = torch.relu(H1 @ store[p + "ffn.W1"] + store[p + "ffn.b1"]) @ store[p + "ffn.W2"] + store[p + "ffn.b2"]
    return ln(H1 + ff, (d,), store[p + "ln2.gain"], store[p + "ln2.shift"], eps=nc.LN_EPS)


@pytest.mark.parametrize("cluster", [True, False])
def test_layer_matches_torch_reference(cluster):
    cfg = E.EncoderConfig(d_h=16, layers=1, heads=4, ffn_hidden=32, cluster_attention=cluster)
    store = enc_store(cfg, seed=5)
    H = torch.randn(3, 7, 16, dtype=f64)
    mask = E.cluster_mask(E.roles_tensor(3), f64)
    with torch.no_grad():
        ours = E.encoder_layer(H, mask, store, 0, cfg)
        ref = _reference_layer(H, store, 0, cfg, mask)
    assert torch.allclose(ours, ref, atol=1e-10)


def test_no_encoder_ablation_ignores_cluster_weights():
    n = 3
    coords = torch.tensor(generate(n, "clustered", 2).coords, dtype=f64)[None]
    for cluster, changes in ((False, False), (True, True)):
        cfg = E.EncoderConfig(d_h=16, layers=2, heads=2, ffn_hidden=32, cluster_attention=cluster)
        store = enc_store(cfg)
        before = E.encode_batch(coords, store, cfg)
        with torch.no_grad():
            store["encoder.layers.1.cluster.Wv"].add_(0.5)
        after = E.encode_batch(coords, store, cfg)
        assert (not torch.equal(before, after)) == changes


def test_encoder_gradient_matches_finite_differences():
    cfg = model_config("full", d_h=16, layers=1, heads=2, ffn_hidden=32, gate_hidden=16)
    params = init_params(cfg, seed=1, dtype=f64)
    enc = nc.ParamStore(f64)
    for name in params:
        if name.startswith("encoder."):
            enc.add(name, params[name].detach().numpy())
    coords = torch.tensor(generate(2, "clustered", 9).coords, dtype=f64)[None]
    w = torch.randn(1, 5, 16, dtype=f64, generator=torch.Generator().manual_seed(0))
    err, where = nc.gradcheck(lambda p: (E.encode_batch(coords, p, cfg.encoder) * w).sum(), enc, h=1e-5)
    assert err <= 1e-3, where
