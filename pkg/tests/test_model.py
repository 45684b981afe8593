from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesgcn import numerics as nx
from sesgcn.errors import ConfigError, ContractViolation
from sesgcn.model import (
    ModelConfig,
    SesGcnModel,
    count_parameters,
    dw_block_forward,
    encoder_forward,
    expand_factors,
    gcn_layer_forward,
    load_model,
    model_forward,
    predict,
    ses_block_forward,
    space_time_mix,
    sts_layer_forward,
    tcn_decode,
)
from sesgcn.numerics import DiffTensor


def tiny(**kw) -> ModelConfig:
    base = dict(V=3, T=4, K=2, C_hidden=(3, 4, 4), n_gcn_layers=2, n_tcn_layers=2, tcn_kernel=1)
    base.update(kw)
    return ModelConfig(**base)


def rand_block(rng, C=4, V=3, T=4, Cout=5, alpha=None):
    gs = C // alpha if alpha else 1
    return dict(
        X=rng.normal(size=(2, C, V, T)),
        A_s=rng.normal(size=(V, V, T)),
        A_t=rng.normal(size=(T, T, V)),
        W_dw=rng.normal(size=(C, gs)),
        W_mlp=rng.normal(size=(Cout, C)),
        b_dw=rng.normal(size=C),
        b_mlp=rng.normal(size=Cout),
        slope=rng.uniform(0, 0.5, size=Cout),
    )


# ---------------------------------------------------------------------------
# config


def test_default_config():
    cfg = ModelConfig()
    assert (cfg.V, cfg.T, cfg.K, cfg.variant) == (15, 10, 25, "ses")
    assert cfg.C_hidden == (3, 64, 64, 64, 64, 64)


@pytest.mark.parametrize(
    "kw",
    [
        {"variant": "gru"},
        {"n_gcn_layers": 0},
        {"C_hidden": (4, 8, 8, 8, 8, 8)},
        {"C_hidden": (3, 8)},
        {"alpha": 5, "variant": "ses"},
        {"tcn_kernel": 2},
        {"anchor": "pelvis"},
        {"T": 1},
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny(alpha=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({"V": 3, "depth": 2})


def test_replace_resets_widths_on_depth_change():
    cfg = ModelConfig().replace(n_gcn_layers=2)
    assert cfg.C_hidden == (3, 64, 64)


# ---------------------------------------------------------------------------
# layer functions


def test_expand_factors_entry_formula():
    rng = np.random.default_rng(0)
    V, T = 3, 2
    A_s, A_t = rng.normal(size=(V, V, T)), rng.normal(size=(T, T, V))
    full = expand_factors(A_s, A_t)
    for v in range(V):
        for t in range(T):
            for u in range(V):
                for s in range(T):
                    assert full[v * T + t, u * T + s] == A_s[v, u, t] * A_t[t, s, u]


def test_space_time_mix_matches_explicit_loops():
    rng = np.random.default_rng(1)
    C, V, T = 2, 3, 4
    X, A_s, A_t = rng.normal(size=(C, V, T)), rng.normal(size=(V, V, T)), rng.normal(size=(T, T, V))
    ref = np.zeros((C, V, T))
    for c in range(C):
        for v in range(V):
            for t in range(T):
                ref[c, v, t] = sum(A_s[v, u, t] * A_t[t, s, u] * X[c, u, s] for u in range(V) for s in range(T))
    np.testing.assert_allclose(space_time_mix(X, A_s, A_t).data, ref, atol=1e-12)


def test_gcn_layer_matches_numpy_reference():
    rng = np.random.default_rng(2)
    C, V, T, Co = 3, 2, 3, 4
    X, A, W = rng.normal(size=(C, V, T)), rng.normal(size=(V * T, V * T)), rng.normal(size=(Co, C))
    Z = np.einsum("oc,ij,cj->oi", W, A, X.reshape(C, V * T)).reshape(Co, V, T)
    ref = np.where(Z > 0, Z, 0.25 * Z)
    np.testing.assert_allclose(gcn_layer_forward(X, A, W).data, ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(V=st.integers(1, 5), T=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_sts_equals_expanded_dense_layer(V, T, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 3, V, T))
    A_s, A_t, W = rng.normal(size=(V, V, T)), rng.normal(size=(T, T, V)), rng.normal(size=(4, 3))
    a = sts_layer_forward(X, A_s, A_t, W).data
    b = gcn_layer_forward(X, expand_factors(A_s, A_t), W).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_dw_block_matches_reference_and_blocks_cross_talk():
    rng = np.random.default_rng(3)
    p = rand_block(rng)
    out = dw_block_forward(p["X"], p["A_s"], p["A_t"], p["W_dw"], p["W_mlp"], p["b_dw"], p["b_mlp"], p["slope"]).data
    mixed = np.einsum("vut,tsu,ncus->ncvt", p["A_s"], p["A_t"], p["X"])
    H = np.clip(mixed * p["W_dw"][:, 0][None, :, None, None] + p["b_dw"][None, :, None, None], 0, 6)
    Z = np.einsum("oc,ncvt->novt", p["W_mlp"], H) + p["b_mlp"][None, :, None, None]
    ref = np.where(Z > 0, Z, p["slope"][None, :, None, None] * Z)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_grouped_depthwise_alpha():
    rng = np.random.default_rng(4)
    p = rand_block(rng, C=4, alpha=2)
    out = dw_block_forward(p["X"], p["A_s"], p["A_t"], p["W_dw"], p["W_mlp"], p["b_dw"], p["b_mlp"], p["slope"], alpha=2).data
    mixed = np.einsum("vut,tsu,ncus->ncvt", p["A_s"], p["A_t"], p["X"])
    Wg = p["W_dw"].reshape(2, 2, 2)  # [group, out, in]
    grouped = np.einsum("goi,ngivt->ngovt", Wg, mixed.reshape(2, 2, 2, 3, 4)).reshape(mixed.shape)
    H = np.clip(grouped + p["b_dw"][None, :, None, None], 0, 6)
    Z = np.einsum("oc,ncvt->novt", p["W_mlp"], H) + p["b_mlp"][None, :, None, None]
    ref = np.where(Z > 0, Z, p["slope"][None, :, None, None] * Z)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    with pytest.raises(ConfigError):
        dw_block_forward(p["X"], p["A_s"], p["A_t"], p["W_dw"], p["W_mlp"], alpha=3)


def test_ses_block_equals_dw_block_on_prezeroed_adjacency():
    rng = np.random.default_rng(5)
    p = rand_block(rng)
    M_s = (rng.random(p["A_s"].shape) < 0.7).astype(float)
    M_t = (rng.random(p["A_t"].shape) < 0.7).astype(float)
    a = ses_block_forward(p["X"], p["A_s"], p["A_t"], M_s, M_t, p["W_dw"], p["W_mlp"], p["b_dw"], p["b_mlp"], p["slope"]).data
    b = dw_block_forward(p["X"], np.where(M_s > 0, p["A_s"], 0.0), np.where(M_t > 0, p["A_t"], 0.0),
                         p["W_dw"], p["W_mlp"], p["b_dw"], p["b_mlp"], p["slope"]).data
    assert np.array_equal(a, b)


def test_ses_block_rejects_bad_masks():
    rng = np.random.default_rng(6)
    p = rand_block(rng)
    with pytest.raises(ContractViolation):
        ses_block_forward(p["X"], p["A_s"], p["A_t"], np.full(p["A_s"].shape, 0.5), np.ones(p["A_t"].shape), p["W_dw"], p["W_mlp"])
    with pytest.raises(ContractViolation):
        ses_block_forward(p["X"], p["A_s"], p["A_t"], np.ones((2, 2)), np.ones(p["A_t"].shape), p["W_dw"], p["W_mlp"])


def test_layer_shape_errors():
    with pytest.raises(ContractViolation, match="A_s"):
        sts_layer_forward(np.ones((3, 2, 4)), np.ones((3, 3, 4)), np.ones((4, 4, 2)), np.ones((2, 3)))
    with pytest.raises(ContractViolation):
        gcn_layer_forward(np.ones((3, 2, 2)), np.ones((5, 5)), np.ones((2, 3)))


# ---------------------------------------------------------------------------
# model


@pytest.mark.parametrize("variant", ["vanilla", "sts", "sts_dw", "ses"])
def test_forward_shapes(variant):
    model = SesGcnModel(tiny(variant=variant), seed=0)
    X = np.random.default_rng(0).normal(size=(5, 3, 3, 4)) * 100
    assert model_forward(X, model, training=False).shape == (5, 3, 3, 2)
    assert model_forward(X[0], model, training=False).shape == (3, 3, 2)
    H = encoder_forward(X, model, training=False)
    assert H.shape == (5, 4, 3, 4)
    assert tcn_decode(H, model).shape == (5, 3, 3, 2)


def test_model_rejects_wrong_input_shape():
    model = SesGcnModel(tiny(), seed=0)
    with pytest.raises(ContractViolation):
        model_forward(np.ones((2, 3, 4, 4)), model)


def test_same_seed_same_parameters():
    a, b = SesGcnModel(tiny(), seed=7), SesGcnModel(tiny(), seed=7)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = SesGcnModel(tiny(), seed=8)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_last_pose_anchor_makes_forecast_translation_equivariant():
    model = SesGcnModel(tiny(anchor="last_pose"), seed=1)
    X = np.random.default_rng(0).normal(size=(2, 3, 3, 4)) * 100
    shift = np.array([500.0, -200.0, 50.0])[None, :, None, None]
    a = model_forward(X, model, training=False).data
    b = model_forward(X + shift, model, training=False).data
    np.testing.assert_allclose(b, a + shift, atol=1e-9)


def test_eval_mode_is_batch_independent():
    model = SesGcnModel(tiny(), seed=2)
    X = np.random.default_rng(1).normal(size=(4, 3, 3, 4)) * 100
    full = model_forward(X, model, training=False).data
    one = model_forward(X[1:2], model, training=False).data
    np.testing.assert_allclose(full[1:2], one, atol=1e-12)


def test_masked_entries_stay_zero_and_receive_zero_gradient():
    rng = np.random.default_rng(3)
    cfg = tiny()
    masks = [((rng.random((3, 3, 4)) < 0.6).astype(float), (rng.random((4, 4, 3)) < 0.6).astype(float)) for _ in range(2)]
    model = SesGcnModel(cfg, seed=0, masks=masks)
    X = rng.normal(size=(3, 3, 3, 4)) * 100
    loss = nx.mean(nx.l2_norm(model_forward(X, model, training=True), axis=1))
    nx.backward(loss)
    for l, (M_s, M_t) in enumerate(masks):
        for key, M in (("A_s", M_s), ("A_t", M_t)):
            p = model.params[f"gcn{l}.{key}"]
            assert np.all(p.data[M == 0] == 0.0)
            assert np.all(p.grad[M == 0] == 0.0)


def test_masks_rejected_for_dense_variants():
    with pytest.raises(ContractViolation):
        SesGcnModel(tiny(variant="sts_dw"), masks=[(np.ones((3, 3, 4)), np.ones((4, 4, 3)))] * 2)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    masks = [((rng.random((3, 3, 4)) < 0.6).astype(float), np.ones((4, 4, 3))) for _ in range(2)]
    model = SesGcnModel(tiny(), seed=3, masks=masks)
    model.buffers["gcn0.bn.running_mean"][:] = 1.5
    sha = model.save(tmp_path / "m.sesg")
    assert (tmp_path / "m.sesg.json").exists()
    back = load_model(tmp_path / "m.sesg")
    assert back.config == model.config
    assert nx.checkpoint_digest(back.state_dict()) == sha
    X = rng.normal(size=(2, 3, 3, 4))
    np.testing.assert_array_equal(predict(back, X.transpose(0, 3, 2, 1)), predict(model, X.transpose(0, 3, 2, 1)))


def test_load_state_dict_rejects_mismatch():
    model = SesGcnModel(tiny(), seed=0)
    state = model.state_dict()
    state.pop("head.b")
    with pytest.raises(ContractViolation, match="head.b"):
        model.load_state_dict(state)


def test_predict_layout_and_mode():
    model = SesGcnModel(tiny(), seed=0).train()
    x = np.random.default_rng(5).normal(size=(4, 4, 3, 3))  # [N, T, V, 3]
    out = predict(model, x, batch_size=3)
    assert out.shape == (4, 2, 3, 3)
    assert model.training
    ref = model_forward(x.transpose(0, 3, 2, 1), model, training=False).data.transpose(0, 3, 2, 1)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert predict(model, x[0]).shape == (2, 3, 3)


# ---------------------------------------------------------------------------
# parameter counts


@pytest.mark.parametrize("variant,adj", [("vanilla", 48_400), ("sts", 7_040), ("sts_dw", 7_040), ("ses", 7_040)])
def test_adjacency_count_per_layer(variant, adj):
    model = SesGcnModel(ModelConfig(V=22, T=10, variant=variant), seed=0)
    counts = count_parameters(model)
    assert counts.adjacency_per_layer == (adj,) * 5
    assert counts.adjacency == 5 * adj
    assert counts.total == sum(p.size for p in model.params.values())


def test_count_excludes_masked_entries():
    cfg = tiny()
    masks = [(np.zeros((3, 3, 4)), np.ones((4, 4, 3)))] * 2
    dense = count_parameters(SesGcnModel(cfg, seed=0))
    sparse = count_parameters(SesGcnModel(cfg, seed=0, masks=masks))
    assert dense.total - sparse.total == 2 * 36 == sparse.masked_out
