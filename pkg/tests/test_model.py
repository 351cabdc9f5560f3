import json
import struct

import numpy as np
import pytest

from causal_sar import autodiff as ad
from causal_sar.model import (
    CausalModel,
    GeometryError,
    ModelOutput,
    interventional_scores,
    load_checkpoint,
    predict,
    read_checkpoint_header,
    save_checkpoint,
)
from causal_sar.nn import BackboneConfig, ConvBlock

from conftest import micro_cfg


def _output(baseline=None, strat=None):
    b = ad.Tensor(np.asarray(baseline, dtype=np.float64)) if baseline is not None else None
    s = ad.Tensor(np.asarray(strat, dtype=np.float64)) if strat is not None else None
    return ModelOutput(b, s, None, None)


def test_default_geometry():
    m = CausalModel(seed=0)
    assert (m.n_strata, m.n_channels) == (16, 64)


def test_reference_geometry_strata():
    cfg = BackboneConfig.reference()
    assert (cfg.n_strata, cfg.final_channels) == (16, 512)


def test_forward_shapes_and_ranges(micro_model, micro_batch):
    x, _ = micro_batch
    out = micro_model(x)
    assert out.baseline_logits.shape == (3, 2)
    assert out.strat_logits.shape == (3, 4, 2)
    assert out.features.shape == (3, 4, 8)
    A = out.activations.values
    assert A.shape == (3, 4, 8) and np.all((A > 0) & (A < 1))


def test_stratification_is_row_major(micro_model, micro_batch):
    x, _ = micro_batch
    fmap = micro_model.fem(ad.Tensor(x[:, None])).values  # (B, C, 2, 2)
    F = micro_model.extract_semantics(x).values
    for r in range(2):
        for c in range(2):
            np.testing.assert_array_equal(F[:, r * 2 + c, :], fmap[:, :, r, c])


def test_strat_logits_recomputed_outside_the_model(micro_model, micro_batch):
    x, _ = micro_batch
    out = micro_model(x[:2])
    F, A = out.features.values, out.activations.values
    W = micro_model.cls.weight.values
    b = micro_model.cls.bias.values
    np.testing.assert_allclose(out.strat_logits.values, (F * A) @ W + b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.baseline_logits.values, F.mean(axis=1) @ W + b, rtol=1e-12, atol=1e-12)


def test_zero_sam_preactivations_give_half(micro_model, micro_batch):
    for k, p in micro_model.params.group("sam").items():
        p.values[:] = 0
    A = micro_model.activate(micro_batch[0]).values
    assert np.all(A == 0.5)


def test_sigmoid_saturation_stays_open_interval_in_float64(micro_model, micro_batch):
    A = micro_model.activate(micro_batch[0] * 3).values
    assert np.all(np.isfinite(A))


def test_identical_strata_baseline_equals_single_stratum(micro_model):
    F = ad.Tensor(np.tile(np.arange(8.0), (1, 4, 1)))
    pooled = micro_model.classify(micro_model.pool(F)).values
    single = micro_model.classify(ad.Tensor(np.arange(8.0)[None])).values
    np.testing.assert_allclose(pooled, single, rtol=1e-13)


def test_activate_is_pure(micro_model, micro_batch):
    x = micro_batch[0]
    assert np.array_equal(micro_model.activate(x).values, micro_model.activate(x).values)


def test_geometry_mismatch_rejected():
    with pytest.raises(GeometryError):
        CausalModel(micro_cfg(), micro_cfg(channels=(4, 6)), num_classes=2)
    with pytest.raises(GeometryError):
        CausalModel(micro_cfg(), BackboneConfig(1, 8, (ConvBlock(4), ConvBlock(8, pool=False))), num_classes=2)


def test_input_shape_mismatch_rejected(micro_model):
    with pytest.raises(GeometryError):
        micro_model(np.zeros((1, 16, 16)))


def test_classifier_channel_mismatch(micro_model):
    with pytest.raises(ad.ShapeError):
        micro_model.classify(ad.Tensor(np.zeros((1, 5))))


def test_sam_free_model_has_no_interventional_path():
    m = CausalModel(micro_cfg(), None, num_classes=2, seed=0)
    out = m(np.zeros((2, 8, 8)))
    assert out.strat_logits is None and not m.has_sam
    with pytest.raises(ValueError):
        predict(out, "interventional")
    assert predict(out, "baseline").shape == (2,)


def test_branches_initialise_independently_of_each_other():
    with_sam = CausalModel(micro_cfg(), "same", 2, seed=9)
    without = CausalModel(micro_cfg(), None, 2, seed=9)
    for k, v in without.params.items():
        assert np.array_equal(v.values, with_sam.params[k].values)


# ---------------------------------------------------------------- prediction


def test_predict_single_stratum_is_argmax():
    z = np.random.default_rng(0).standard_normal((6, 1, 5))
    assert np.array_equal(predict(_output(strat=z)), z[:, 0].argmax(-1))


def test_predict_ties_go_to_smallest_index():
    assert predict(_output(baseline=[[1.0, 3.0, 3.0]]), "baseline").tolist() == [1]
    assert predict(_output(strat=[[[0.0, 0.0, 0.0]]])).tolist() == [0]


def test_predict_unknown_mode():
    with pytest.raises(ValueError):
        predict(_output(baseline=[[0.0, 1.0]]), "vote")


def test_interventional_matches_brute_force():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((20, 5, 4)) * 3
    brute = []
    for b in range(20):
        scores = []
        for k in range(4):
            s = 0.0
            for t in range(5):
                row = z[b, t]
                s += row[k] - np.log(sum(np.exp(v) for v in row))
            scores.append(s)
        brute.append(int(np.argmax(scores)))
    assert predict(_output(strat=z)).tolist() == brute


def test_interventional_invariant_to_per_stratum_shift():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((10, 4, 3))
    shift = rng.standard_normal((10, 4, 1)) * 50
    np.testing.assert_allclose(interventional_scores(z), interventional_scores(z + shift), atol=1e-9)
    assert np.array_equal(predict(_output(strat=z)), predict(_output(strat=z + shift)))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, micro_batch):
    m = CausalModel(micro_cfg(), "same", 2, seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    for k in m.params:
        assert np.array_equal(m.params[k].values, m2.params[k].values)
    x = micro_batch[0]
    assert np.array_equal(m(x).strat_logits.values, m2(x).strat_logits.values)


def test_checkpoint_layout(tmp_path):
    m = CausalModel(micro_cfg(), "same", 2, seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:8] == b"CSARCKPT"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header == read_checkpoint_header(path)
    assert (header["n"], header["n_c"], header["K"]) == (4, 8, 2)
    body = raw[16 + hlen:]
    first = header["params"][0]
    arr = np.frombuffer(body[first["offset"]:first["offset"] + first["nbytes"]], dtype="<f4")
    assert np.array_equal(arr.reshape(first["shape"]), m.params[first["name"]].values)
    assert len(body) == sum(p["nbytes"] for p in header["params"])


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_sam_free_checkpoint_roundtrip(tmp_path):
    m = CausalModel(micro_cfg(), None, 2, seed=1)
    save_checkpoint(m, tmp_path / "b.ckpt")
    assert not load_checkpoint(tmp_path / "b.ckpt").has_sam
