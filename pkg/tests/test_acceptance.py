"""Acceptance checks.  Each test is named ``test_criterion_<N>_...``; the
conftest prints one PASS/FAIL line per criterion at the end of the run.

The training-heavy checks take a while on one core (see README).
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from causal_sar import autodiff as ad
from causal_sar.cli import main
from causal_sar.data import ManifestError, SyntheticSpec, center_crop_mask, generate_synthetic, load_manifest
from causal_sar.losses import cross_entropy, l_cr_t
from causal_sar.metrics import discriminability, evaluate, pooled_features
from causal_sar.model import CausalModel, load_checkpoint, save_checkpoint
from causal_sar.train import TrainConfig, accuracy, predict_dataset, train

from test_autodiff import _OPS, max_rel_err, t64
from test_data import _manifest, _write_mstar_manifest
from test_losses import micro_full_model_fd_error

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
CROPS = (8, 16, 24, 32)


# ---------------------------------------------------------------- 1. gradient oracle


def _op_checks():
    """(name, scalar function, inputs) for every differentiable op."""
    rng = np.random.default_rng(2024)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    checks = [(name, f, (a, b)) for name, f in _OPS.items()]
    r = rng.standard_normal((3, 4))
    checks += [
        ("add_scalar", lambda x: ad.sum(ad.mul(ad.add_scalar(x, 0.7), ad.add_scalar(x, 0.7))), (a,)),
        ("elementwise", lambda x, y: ad.sum(ad.mul(ad.elementwise("sigmoid", x), ad.elementwise("mul", x, y))), (a, b)),
        ("bias_add", lambda x, c: ad.sum(ad.mul(ad.bias_add(x, c), t64(r))), (a, rng.standard_normal(4))),
        ("matmul", lambda x, w: ad.sum(ad.mul(ad.matmul(x, w), ad.matmul(x, w))), (a, rng.standard_normal((4, 5)))),
        ("reshape", lambda x: ad.sum(ad.mul(ad.reshape(x, (2, 6)), t64(r.reshape(2, 6)))), (a,)),
        ("transpose", lambda x: ad.sum(ad.mul(ad.transpose(x, (1, 0)), t64(r.T))), (a,)),
        ("sum_axis", lambda x: ad.sum(ad.mul(ad.sum(x, axis=0), ad.sum(x, axis=0))), (a,)),
        ("pick", lambda x: ad.sum(ad.mul(ad.pick(x, np.array([0, 3, 1])), ad.pick(x, np.array([2, 2, 0])))), (a,)),
    ]
    x, w, bias = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    rc = rng.standard_normal((2, 3, 5, 5))
    checks.append(("conv2d", lambda x, w, c: ad.sum(ad.mul(ad.conv2d(x, w, c, 1, 1), t64(rc))), (x, w, bias)))
    xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    checks.append(("conv2d_cnhw", lambda x, w, c: ad.sum(ad.mul(ad.conv2d(x, w, c, 1, 1, layout="CNHW"), t64(rc.transpose(1, 0, 2, 3)))), (xc, w, bias)))
    pool_in = rng.permutation(64).reshape(1, 4, 4, 4) / 9.0
    rp = rng.standard_normal((1, 4, 2, 2))
    checks.append(("maxpool2d", lambda x: ad.sum(ad.mul(ad.maxpool2d(x, 2), t64(rp))), (pool_in,)))
    return checks


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    worst = {name: max_rel_err(f, *inputs) for name, f, inputs in _op_checks()}
    worst["full_loss_micro_model"] = micro_full_model_fd_error()
    elapsed = time.perf_counter() - start
    print("max relative error per op:", json.dumps(worst, indent=1))
    assert max(worst.values()) < 1e-4
    assert elapsed < 120


# ---------------------------------------------------------------- 2. constant offset


def test_criterion_2_constant_offset_identity():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n, K = int(rng.integers(1, 200)), int(rng.integers(2, 12))
        z = rng.standard_normal((1, K)) * rng.uniform(0.01, 30)
        y = [int(rng.integers(K))]
        za, zb = t64(z, tracked=True), t64(z, tracked=True)
        with ad.Tape() as ta:
            reg = l_cr_t(za, y, n)
        with ad.Tape() as tb:
            ce = cross_entropy(zb, y)
        assert abs(float(reg.values) - float(ce.values) - math.log(n)) < 1e-9
        ta.backward(reg)
        tb.backward(ce)
        assert np.max(np.abs(za.grad - zb.grad)) < 1e-12


# ---------------------------------------------------------------- 3. lambda = 0 reduction


def test_criterion_3_lambda_zero_reduction():
    start = time.perf_counter()
    data = generate_synthetic(SyntheticSpec(), seed=0).split("train")
    cfg = TrainConfig(lam=0.0, epochs=5, seed=0)
    snapshots = {True: [], False: []}

    def recorder(key):
        return lambda epoch, model: snapshots[key].append(model.params.snapshot())

    with_sam = train(cfg, data, on_epoch_end=recorder(True))
    without = train(cfg, data, use_sam=False, on_epoch_end=recorder(False))
    init = CausalModel(with_sam.model.fem_cfg, "same", data.num_classes, seed=0)

    for name, p in init.params.group("sam").items():
        assert np.array_equal(with_sam.model.params[name].values, p.values), name
    assert len(snapshots[True]) == len(snapshots[False]) == 5
    for a, b in zip(snapshots[True], snapshots[False]):
        for name, ref in b.items():
            got, ref = a[name].astype(np.float64), ref.astype(np.float64)
            assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-6, name
    assert time.perf_counter() - start < 300


# ---------------------------------------------------------------- 4 and 6. debiasing benchmark


def benchmark_spec() -> SyntheticSpec:
    return SyntheticSpec(K=4, image_size=32, n_train=500, n_test=250, rho=0.95, rho_test=0.0)  # per class


@pytest.fixture(scope="session")
def benchmark():
    """Per seed: the regularised model, the lambda=0 baseline and the test split."""
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        data = generate_synthetic(benchmark_spec(), seed=seed)
        train_set, test_set = data.split("train"), data.split("test")
        reg = train(TrainConfig(lam=0.1, epochs=30, seed=seed), train_set).model
        # lambda=0 leaves the activation branch untouched, so the baseline is the
        # plain network (criterion 3 shows the two trajectories coincide)
        base = train(TrainConfig(lam=0.0, epochs=30, seed=seed), train_set, use_sam=False).model
        runs[seed] = (reg, base, test_set)
    return runs, time.perf_counter() - start


def test_criterion_4_debiasing_gain(benchmark):
    runs, elapsed = benchmark
    margins = []
    for seed, (reg, base, test_set) in runs.items():
        acc_reg = evaluate(reg, test_set, "interventional").accuracy
        acc_base = evaluate(base, test_set, "baseline").accuracy
        print(f"seed {seed}: regularised {acc_reg:.3f}  baseline {acc_base:.3f}")
        margins.append(acc_reg - acc_base)
    print(f"margins {margins}, mean {np.mean(margins):.3f} pp, {elapsed:.0f} s")
    assert all(m > 0 for m in margins)
    assert np.mean(margins) >= 5.0
    assert elapsed < 20 * 60


def test_criterion_6_discriminability_direction(benchmark):
    runs, _ = benchmark
    for seed, (reg, base, test_set) in runs.items():
        r_reg = discriminability(pooled_features(reg, test_set, "interventional"), test_set.labels).ratio
        r_base = discriminability(pooled_features(base, test_set, "baseline"), test_set.labels).ratio
        print(f"seed {seed}: interventional {r_reg:.4f}  baseline {r_base:.4f}")
        assert r_reg > r_base


# ---------------------------------------------------------------- 5. crop ladder


def crop_spec() -> SyntheticSpec:
    return SyntheticSpec(n_train=125, n_test=125, rho=0.95, rho_test=0.0)


def test_criterion_5_crop_ladder():
    means = []
    for crop in CROPS:
        accs = []
        for seed in SEEDS:
            data = generate_synthetic(crop_spec(), seed=seed)
            data = data.with_images(center_crop_mask(data.images, crop))
            model = train(TrainConfig(lam=0.0, epochs=10, seed=seed), data.split("train"), use_sam=False).model
            accs.append(evaluate(model, data.split("test"), "baseline").accuracy)
        means.append(float(np.mean(accs)))
        print(f"crop {crop}: {accs} mean {means[-1]:.3f}")
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    assert len(rises) <= 1 and all(r <= 1.0 for r in rises)


# ---------------------------------------------------------------- 7. lambda sweep


def test_criterion_7_sweep_interior_optimum(tmp_path):
    cfg = {"data": {"n_train": 125, "n_test": 125, "rho": 0.95, "rho_test": 0.0}, "train": {"epochs": 10}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["lambda"] for r in rows] == ["0.001", "0.01", "0.1", "0.5", "1"]
    acc = {float(r["lambda"]): float(r["accuracy"]) for r in rows}
    print("sweep:", acc)
    best = max(acc.values())
    assert best > acc[0.001] and best > acc[1.0]


# ---------------------------------------------------------------- 8. determinism and round trip


SMALL = {"data": {"n_train": 30, "n_test": 15}, "train": {"epochs": 2}}


def test_criterion_8_eval_json_is_byte_identical(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / run)]) == 0
    assert (tmp_path / "a" / "eval.json").read_bytes() == (tmp_path / "b" / "eval.json").read_bytes()


def test_criterion_8_checkpoint_reproduces_validation_accuracy(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_train=30, n_test=15), seed=1).split("train")
    result = train(TrainConfig(epochs=2, seed=1), data)
    save_checkpoint(result.model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    val = result.val_set
    assert accuracy(predict_dataset(back, val, "interventional"), val.labels) == result.best_val_acc


# ---------------------------------------------------------------- 9. ingestion


def test_criterion_9_mstar_sized_manifest(tmp_path):
    _write_mstar_manifest(tmp_path)
    ds = load_manifest(tmp_path)
    assert (len(ds.split("train")), len(ds.split("test"))) == (2747, 2426)


@pytest.mark.parametrize(
    "rows,pattern",
    [
        (["a.png,0,train", "b.png,1,holdout"], r"row 2: unknown split"),
        (["a.png,0,train", "a.png,1,test"], r"row 2: duplicate path"),
        (["a.png,0,train", "gone.jpg,1,test"], r"row 2: file 'gone.jpg' does not exist"),
        (["a.png,0,train", "b.png"], r"row 2: expected 3 fields"),
    ],
)
def test_criterion_9_malformed_manifest_diagnostics(tmp_path, rows, pattern):
    with pytest.raises(ManifestError, match=pattern):
        load_manifest(_manifest(tmp_path, rows))
