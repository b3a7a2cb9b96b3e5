"""Fusion pipeline: mixing arithmetic, attention-stage wrappers, trace
integrity, checkpoint round-trips, and the end-to-end gradient check."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envfuse import autodiff as ad
from envfuse.bundle import gen_synthetic_bundle
from envfuse.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from envfuse.fusion import (
    EnvironmentEmbedding,
    GlobalStage,
    PipelineParams,
    PipelineTrace,
    SemanticStage,
    compute_environment_embedding,
    export_path_for,
    forward_pipeline,
    fuse_embeddings,
    load_embedding_f32,
    local_aware_attention,
    save_embedding_f32,
    semantic_guided_attention,
    write_embeddings_csv,
)
from envfuse.gradcheck import grad_check
from envfuse.nn import DimensionError, Linear, MultiHeadAttention


def _params(d=8, d_model=4, seed=0, **kw):
    return PipelineParams.init(np.random.default_rng(seed), d=d, d_model=d_model, **kw)


def test_fuse_arithmetic():
    out = fuse_embeddings(np.array([2.0, 4.0]), np.array([0.0, 0.0]), 0.5, 0.5)
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_fuse_equal_inputs_is_identity_at_half():
    v = np.array([0.3, -1.2, 5.0])
    np.testing.assert_allclose(fuse_embeddings(v, v, 0.5, 0.5), v, atol=1e-15)


def test_fuse_selector_weights_bit_exact():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(6)
    b = rng.standard_normal(6)
    left = fuse_embeddings(a, b, 1.0, 0.0)
    right = fuse_embeddings(a, b, 0.0, 1.0)
    assert np.array_equal(left, a) and left is not a
    assert np.array_equal(right, b) and right is not b


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=3),
    st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=3),
    st.floats(min_value=-2, max_value=2),
    st.floats(min_value=-2, max_value=2),
    st.floats(min_value=-3, max_value=3),
)
def test_fuse_is_bilinear(xs, ys, l1, l2, scale):
    x = np.asarray(xs)
    y = np.asarray(ys)
    np.testing.assert_allclose(
        fuse_embeddings(scale * x, y, l1, l2),
        fuse_embeddings(x, y, scale * l1, l2),
        atol=1e-9,
    )
    np.testing.assert_allclose(
        fuse_embeddings(x, y, l1, l2) + fuse_embeddings(x, y, 0.0, 0.0),
        fuse_embeddings(x, y, l1, l2),
        atol=1e-9,
    )


def test_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        fuse_embeddings(np.zeros(3), np.zeros(4), 0.5, 0.5)


def test_local_aware_matches_single_head_oracle():
    # single head over a one-row context: every attention weight is 1, so
    # output row i = selected[i] + out(value(proj(global)))
    rng = np.random.default_rng(1)
    d, d_model, k = 5, 3, 4
    wg, bg = rng.standard_normal((d, d_model)), rng.standard_normal(d_model)
    lin = lambda: Linear(rng.standard_normal((d_model, d_model)), rng.standard_normal(d_model))
    wq, wk_, wv, wo = lin(), lin(), lin(), lin()
    stage = GlobalStage(Linear(wg, bg), MultiHeadAttention(1, wq, wk_, wv, wo))

    selected = rng.standard_normal((k, d_model))
    global_vec = rng.standard_normal(d)

    g = global_vec @ wg + bg
    v = g @ wv.weight.data + wv.bias.data
    att_out = v @ wo.weight.data + wo.bias.data
    expect = selected + np.tile(att_out, (k, 1))

    got = local_aware_attention(selected, global_vec, stage)
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_local_aware_residual_preserves_selection_differences():
    # rows must stay distinguishable after attending over the global vector
    rng = np.random.default_rng(2)
    stage = GlobalStage.init(rng, 6, 4, 2)
    rows = rng.standard_normal((3, 4))
    out = local_aware_attention(rows, rng.standard_normal(6), stage)
    np.testing.assert_allclose(out[0] - out[1], rows[0] - rows[1], atol=1e-12)


def test_semantic_guided_single_row_oracle():
    rng = np.random.default_rng(3)
    d, d_model = 6, 4
    stage = SemanticStage.init(rng, d, d_model, 2)
    caption = rng.standard_normal(d)
    row = rng.standard_normal((1, d_model))
    # one context row takes full mass in every head: output = out(value(row))
    v = row @ stage.mha.value.weight.data + stage.mha.value.bias.data
    expect = (v @ stage.mha.out.weight.data + stage.mha.out.bias.data)[0]
    got = semantic_guided_attention(caption, row, stage)
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_semantic_guided_identical_rows_collapse():
    rng = np.random.default_rng(4)
    stage = SemanticStage.init(rng, 6, 4, 2)
    caption = rng.standard_normal(6)
    row = rng.standard_normal(4)
    one = semantic_guided_attention(caption, np.tile(row, (1, 1)), stage)
    many = semantic_guided_attention(caption, np.tile(row, (7, 1)), stage)
    np.testing.assert_allclose(one, many, atol=1e-12)


def test_trace_shape_chain():
    b = gen_synthetic_bundle(1, 16, 8, "uniform")
    params = _params(d=8, d_model=4)
    emb, trace = compute_environment_embedding(b, params, k=5, mode="shared")
    assert emb.vector.shape == (4,)
    assert trace.patch_attention.shape == (16,)
    assert trace.indices_rgb.shape == (5,)
    assert trace.topk_rgb.shape == (5, 4)
    assert trace.local_depth.shape == (5, 4)
    assert trace.global_rgb.shape == (4,)
    assert trace.fused.shape == (4,)
    np.testing.assert_allclose(
        trace.fused, 0.5 * trace.global_rgb + 0.5 * trace.global_depth, atol=1e-12
    )
    assert set(trace.stage_attention_rows) == {
        "detector_rgb", "local_rgb", "local_depth", "sem_rgb", "sem_depth",
    }


def test_trace_stage_rows_are_distributions():
    b = gen_synthetic_bundle(2, 16, 8, "clustered")
    params = _params(d=8, d_model=4)
    for mode in ("shared", "unshared"):
        _, trace = compute_environment_embedding(b, params, k=6, mode=mode)
        stages = dict(trace.stage_attention_rows)
        if mode == "unshared":
            assert "detector_depth" in stages
        for rows in stages.values():
            assert (rows >= 0).all()
            np.testing.assert_allclose(
                rows.sum(axis=1), np.ones(rows.shape[0]), atol=1e-6
            )


def test_shared_mode_reuses_rgb_indices():
    params = _params(d=8, d_model=4)
    for seed in range(5):
        b = gen_synthetic_bundle(seed, 20, 8, "uniform")
        _, trace = compute_environment_embedding(b, params, k=7, mode="shared")
        np.testing.assert_array_equal(trace.indices_rgb, trace.indices_depth)
        # depth rows really are the depth projection at the RGB indices
        depth_proj = (
            b.depth_patch.astype(np.float64)
            @ params.detector_depth.patch_proj.weight.data
            + params.detector_depth.patch_proj.bias.data
        )
        np.testing.assert_allclose(
            trace.topk_depth, depth_proj[trace.indices_rgb], atol=1e-12
        )


def test_unshared_mode_selects_depth_independently():
    # depth noise is independent of the caption, so its own attention ranking
    # disagrees with the RGB ranking on planted fixtures
    params = _params(d=32, d_model=8, seed=3)
    differing = 0
    for seed in (7, 8, 9):
        b = gen_synthetic_bundle(seed, 64, 32, "planted")
        _, tr = compute_environment_embedding(b, params, k=10, mode="unshared")
        if not np.array_equal(tr.indices_rgb, tr.indices_depth):
            differing += 1
    assert differing >= 2


def test_embedding_differs_between_modes_on_planted():
    params = _params(d=32, d_model=8, seed=3)
    b = gen_synthetic_bundle(9, 64, 32, "planted")
    shared, _ = compute_environment_embedding(b, params, k=10, mode="shared")
    unshared, _ = compute_environment_embedding(b, params, k=10, mode="unshared")
    assert np.linalg.norm(shared.vector - unshared.vector) > 1e-6


def test_pipeline_deterministic_bit_exact():
    params = _params(d=8, d_model=4)
    b = gen_synthetic_bundle(5, 16, 8, "clustered")
    a, _ = compute_environment_embedding(b, params, k=4, mode="shared")
    c, _ = compute_environment_embedding(b, params, k=4, mode="shared")
    assert np.array_equal(a.vector, c.vector)


def test_pipeline_rejects_bad_args():
    params = _params(d=8, d_model=4)
    b = gen_synthetic_bundle(0, 16, 8, "uniform")
    with pytest.raises(ValueError):
        compute_environment_embedding(b, params, k=17)
    with pytest.raises(ValueError):
        compute_environment_embedding(b, params, k=4, mode="sideways")
    wrong_dim = gen_synthetic_bundle(0, 16, 6, "uniform")
    with pytest.raises(DimensionError):
        compute_environment_embedding(wrong_dim, params, k=4)


def test_checkpoint_round_trip_preserves_forward(tmp_path):
    params = _params(d=8, d_model=4, seed=7)
    path = tmp_path / "params.m2ck"
    params.save(path)
    loaded_a = PipelineParams.load(path)
    loaded_b = PipelineParams.load(path)
    assert loaded_a.d == 8 and loaded_a.d_model == 4
    assert loaded_a.lambda1 == 0.5 and loaded_a.lambda2 == 0.5

    b = gen_synthetic_bundle(3, 16, 8, "planted")
    ea, _ = compute_environment_embedding(b, loaded_a, k=4)
    eb, _ = compute_environment_embedding(b, loaded_b, k=4)
    assert np.array_equal(ea.vector, eb.vector)
    # storage is float32, so the round trip stays close to the source params
    orig, _ = compute_environment_embedding(b, params, k=4)
    np.testing.assert_allclose(ea.vector, orig.vector, atol=1e-4)


def test_checkpoint_missing_key_raises(tmp_path):
    params = _params(d=8, d_model=4)
    tensors = params.to_tensors()
    del tensors["sem_depth.mha.out.bias"]
    path = tmp_path / "broken.m2ck"
    save_checkpoint(tensors, path)
    with pytest.raises(CheckpointError):
        PipelineParams.load(path)
    missing_meta = {k: v for k, v in params.to_tensors().items() if k != "meta.d"}
    with pytest.raises(CheckpointError):
        PipelineParams.from_tensors(missing_meta)


def test_checkpoint_is_mode_agnostic(tmp_path):
    # a checkpoint written after shared-mode use still serves unshared mode
    params = _params(d=8, d_model=4, seed=11)
    b = gen_synthetic_bundle(2, 16, 8, "planted")
    compute_environment_embedding(b, params, k=4, mode="shared")
    path = tmp_path / "p.m2ck"
    params.save(path)
    loaded = PipelineParams.load(path)
    emb, trace = compute_environment_embedding(b, loaded, k=4, mode="unshared")
    assert "detector_depth" in trace.stage_attention_rows


def test_end_to_end_gradients_match_fd():
    params = _params(d=6, d_model=4, seed=5)
    b = gen_synthetic_bundle(4, 8, 6, "uniform")

    def loss():
        g = forward_pipeline(
            b.caption_sem, b.rgb_patch, b.rgb_global,
            b.depth_patch, b.depth_global, params, k=3, mode="shared",
        )
        return ad.sum_all(ad.mul(g.h_v, g.h_v))

    err = grad_check(loss, params.parameters())
    assert err < 1e-3


def test_embedding_validation():
    with pytest.raises(ValueError):
        EnvironmentEmbedding(vector=np.array([1.0, np.nan]), sample_id="x", k=1, mode="shared")
    with pytest.raises(ValueError):
        EnvironmentEmbedding(vector=np.ones(2), sample_id="x", k=1, mode="both")


def test_trace_validation():
    k, d_model, m = 2, 3, 4
    ok = dict(
        patch_attention=np.full(m, 0.25),
        indices_rgb=np.array([0, 1]),
        indices_depth=np.array([0, 1]),
        topk_rgb=np.zeros((k, d_model)),
        topk_depth=np.zeros((k, d_model)),
        local_rgb=np.zeros((k, d_model)),
        local_depth=np.zeros((k, d_model)),
        global_rgb=np.zeros(d_model),
        global_depth=np.zeros(d_model),
        fused=np.zeros(d_model),
    )
    PipelineTrace(**ok)
    bad = dict(ok, patch_attention=np.full(m, 0.3))
    with pytest.raises(ValueError):
        PipelineTrace(**bad)
    bad = dict(ok, topk_depth=np.zeros((k + 1, d_model)))
    with pytest.raises(DimensionError):
        PipelineTrace(**bad)


def test_embedding_f32_round_trip(tmp_path):
    emb = EnvironmentEmbedding(
        vector=np.random.default_rng(0).standard_normal(16),
        sample_id="s", k=3, mode="shared",
    )
    path = tmp_path / "s.f32"
    save_embedding_f32(path, emb)
    back = load_embedding_f32(path)
    np.testing.assert_allclose(back, emb.vector, atol=1e-6)
    assert path.stat().st_size == 16 * 4


def test_embeddings_csv_sorted(tmp_path):
    mk = lambda sid: EnvironmentEmbedding(
        vector=np.arange(3, dtype=float), sample_id=sid, k=2, mode="shared"
    )
    path = tmp_path / "emb.csv"
    write_embeddings_csv(path, [mk("zeta"), mk("alpha")])
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("alpha,shared,2,")
    assert lines[1].startswith("zeta,shared,2,")
    assert len(lines[0].split(",")) == 3 + 3


def test_export_path_shape():
    p = export_path_for("uniform-7-8x4", "out", "shared", 140)
    assert p.name == "uniform-7-8x4.shared.k140.f32"
