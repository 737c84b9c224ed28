"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also collected into the
terminal summary). Run just these with ``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import csv
import hashlib
import shutil
import struct
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mscfnet import kernels as K
from mscfnet import ops
from mscfnet.analysis import REFERENCE_PARAMS, analyze, closed_form_params, count_params, dilation_coverage
from mscfnet.cli import main
from mscfnet.gradcheck import check_parameters, finite_difference_check
from mscfnet.layers import (
    ECA,
    EAR,
    SE,
    AttentionConfig,
    BatchNorm2d,
    DownsamplingBlock,
    EarConfig,
    InitialBlock,
    InputInjection,
    SpatialAttention,
)
from mscfnet.network import CANONICAL, build, get_preset, gradcheck_config, variant_presets
from mscfnet.tensor import Parameter, Tensor
from mscfnet.train import cross_entropy_loss, poly_lr, smoothed
from mscfnet.weights import (
    BadMagicError,
    CensusMismatchError,
    TruncatedError,
    UnsupportedVersionError,
    WeightFileError,
    decode,
    load_into,
    load_weights,
)

FIXTURE = Path(__file__).parent / "fixtures" / "gradcheck_seed0.mscf"


@pytest.fixture
def criterion(acceptance_log):
    """``with criterion(n, name) as notes:`` logs PASS/FAIL and re-raises failures."""

    @contextlib.contextmanager
    def run(number, name):
        notes = []
        t0 = time.perf_counter()
        try:
            yield notes
        except BaseException as e:
            line = f"FAIL {number}: {name} ({time.perf_counter() - t0:.1f}s) {e}".splitlines()[0]
            acceptance_log.append(line)
            print(line)
            raise
        line = f"PASS {number}: {name} ({time.perf_counter() - t0:.1f}s) " + "; ".join(notes)
        acceptance_log.append(line.rstrip())
        print(line)

    return run


def projected(fn, seed=99):
    # the seed must differ from the input draws, or r == x makes some gradients cancel
    r = Tensor(np.random.default_rng(seed).normal(size=fn().shape))
    return lambda: ops.sum_all(ops.mul(fn(), r))


# ---------------------------------------------------------------------------
# 1. gradient correctness


def primitive_cases(rng):
    def P(*shape):
        return Parameter(rng.normal(size=shape))

    x = P(2, 4, 6, 7)
    w, b = P(6, 4, 3, 3), P(6)
    wd, wt = P(4, 1, 3, 1), P(4, 3, 3, 3)
    y = P(2, 4, 5, 5)
    v, k1 = P(2, 9, 1, 1), P(3)
    g, beta = Parameter(rng.uniform(0.5, 1.5, 4)), P(4)
    rm, rv = Tensor(rng.normal(size=4)), Tensor(rng.uniform(0.5, 2, 4))
    slope = P(4)
    z = P(2, 4, 6, 7)
    pos = Parameter(rng.uniform(0.2, 1.0, (2, 4, 6, 7)) * rng.choice([-1, 1], (2, 4, 6, 7)))
    logits, labels = P(2, 5, 3, 4), rng.integers(0, 5, (2, 3, 4))
    labels[0, 0, :2] = 255
    return [
        ("conv2d", lambda: ops.conv2d(x, w, b, stride=2, padding=1, dilation=1), [x, w, b]),
        ("conv2d dilated depthwise", lambda: ops.conv2d(x, wd, padding=(2, 0), dilation=(2, 1), groups=4), [x, wd]),
        ("transposed conv2d", lambda: ops.transposed_conv2d(y, wt, stride=2, padding=1), [y, wt]),
        ("max pool", lambda: ops.pool2d(x, "max"), [x]),
        ("avg pool", lambda: ops.pool2d(x, "avg"), [x]),
        ("global avg/max", lambda: ops.add(ops.global_avg_pool(x), ops.global_max_pool(x)), [x]),
        ("channel mean/max", lambda: ops.add(ops.channel_mean(x), ops.channel_max(x)), [x]),
        ("bilinear x4", lambda: ops.bilinear_upsample(x, 4), [x]),
        ("conv1d channels", lambda: ops.conv1d_channels(v, k1), [v, k1]),
        ("batch norm train", lambda: ops.batch_norm(x, g, beta, Tensor(rm.data.copy()), Tensor(rv.data.copy()), True), [x, g, beta]),
        ("batch norm eval", lambda: ops.batch_norm(x, g, beta, rm, rv, False), [x, g, beta]),
        ("add/mul broadcast", lambda: ops.mul(ops.add(x, z), ops.global_avg_pool(z)), [x, z]),
        ("sigmoid", lambda: ops.sigmoid(x), [x]),
        ("prelu", lambda: ops.prelu(pos, slope), [pos, slope]),
        ("concat", lambda: ops.concat_channels([x, z]), [x, z]),
        ("channel shuffle", lambda: ops.channel_shuffle(x, 2), [x]),
        ("cross entropy", lambda: ops.cross_entropy(logits, labels), [logits]),
    ]


def layer_cases(rng):
    def gen(s):
        return np.random.default_rng(s)

    return [
        ("EAR/eca", EAR(gen(1), EarConfig(8, 2), AttentionConfig(kind="eca")), (2, 8, 5, 6)),
        ("EAR/se", EAR(gen(2), EarConfig(8, 2), AttentionConfig(kind="se")), (2, 8, 5, 6)),
        ("SA", SpatialAttention(gen(3)), (2, 4, 6, 7)),
        ("ECA", ECA(gen(4), 9), (2, 9, 4, 3)),
        ("SE", SE(gen(5), 12, 4), (2, 12, 4, 3)),
        ("downsample", DownsamplingBlock(gen(6), 3, 8), (2, 3, 6, 8)),
        ("initial", InitialBlock(gen(7), 4), (2, 3, 6, 8)),
        ("injection", InputInjection(gen(8), 2), (2, 3, 8, 8)),
    ]


def test_criterion_1_gradient_correctness(criterion):
    with criterion(1, "gradient correctness") as notes:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_prim = 0.0
        for name, fn, inputs in primitive_cases(rng):
            f = projected(fn)
            for i, t in enumerate(inputs):
                rep = finite_difference_check(f, t, tolerance=1e-5, max_coords=32, seed=i)
                worst_prim = max(worst_prim, rep.max_rel_error)
                assert rep.passed, f"{name} input {i}: {rep.max_rel_error:.2e}"
        worst_layer = 0.0
        for name, m, shape in layer_cases(rng):
            for _, mod in m.named_modules():
                if isinstance(mod, BatchNorm2d):
                    mod.weight.data[:] = rng.uniform(0.5, 1.5, mod.channels)
                    mod.running_var.data[:] = rng.uniform(0.5, 2.0, mod.channels)
            x = Parameter(rng.normal(size=shape))
            for training in (False, True):
                m.train(training)
                f = projected(lambda: m(x))
                targets = [x] + ([] if training else [p for _, p in m.named_parameters() if p.trainable])
                for i, t in enumerate(targets):
                    rep = finite_difference_check(f, t, tolerance=1e-5, max_coords=16, seed=i)
                    worst_layer = max(worst_layer, rep.max_rel_error)
                    assert rep.passed, f"{name} tensor {i} (train={training}): {rep.max_rel_error:.2e}"
        net = build(gradcheck_config(3), seed=0).train()
        x = Tensor(rng.random((2, 3, 16, 24)))
        y = rng.integers(0, 3, size=(2, 16, 24))
        params = [(n, p) for n, p in net.named_parameters() if p.trainable]
        reports = check_parameters(lambda: cross_entropy_loss(net(x), y), params, step=1e-5, tolerance=1e-4)
        worst_net = max(reports.items(), key=lambda kv: kv[1].max_rel_error)
        assert worst_net[1].passed, f"network {worst_net[0]}: {worst_net[1].max_rel_error:.2e}"
        elapsed = time.perf_counter() - t0
        notes += [f"primitives {worst_prim:.1e}", f"layers {worst_layer:.1e}", f"network {worst_net[1].max_rel_error:.1e}"]
        assert elapsed < 120, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 2. parameter census

CANONICAL_CENSUS = (
    19_584 + 3 * 99 + (3 + 3 + 5) + 9_327 + 5 * 21_417 + 37_167 + 10 * 83_785
    + 17_152 + (1_187 + 2_211 + 4_163) + 32 + 363 + 495
)


def test_criterion_2_parameter_census(criterion):
    with criterion(2, "parameter census") as notes:
        total, _ = count_params(build(CANONICAL, 0))
        assert total == CANONICAL_CENSUS == closed_form_params(CANONICAL), (total, CANONICAL_CENSUS)
        assert 1_000_000 <= total <= 1_300_000
        text = analyze(build(CANONICAL, 0), (1, 3, 64, 96)).to_text()
        assert f"delta to 1.1486M: {total - REFERENCE_PARAMS:+d}" in text
        notes.append(f"{total} params, delta {total - REFERENCE_PARAMS:+d}")


# ---------------------------------------------------------------------------
# 3. ablation orderings


def test_criterion_3_ablation_orderings(criterion):
    with criterion(3, "ablation parameter orderings") as notes:
        p = {k: count_params(build(v, 0))[0] for k, v in variant_presets().items()}
        assert p["attention-se"] > p["attention-eca"]
        assert p["fusion-concat"] > p["fusion-add"] > p["no-fusion"]
        assert p["reduced-modules"] < p["final"]
        assert p["high-only"] < p["high+mid"] < p["high+mid+low"]
        notes.append(", ".join(f"{k}={v}" for k, v in p.items()))


# ---------------------------------------------------------------------------
# 4. dilation coverage


def test_criterion_4_dilation_coverage(criterion):
    with criterion(4, "dilation coverage") as notes:
        t0 = time.perf_counter()
        canon = dilation_coverage(CANONICAL.dilation_schedule_2)
        pow2 = dilation_coverage(get_preset("power-of-two-rates").dilation_schedule_2)
        elapsed = time.perf_counter() - t0
        notes.append(f"canonical density {canon.density}, power-of-two density {pow2.density}")
        assert canon.density == 1.0
        assert elapsed < 1.0
        assert pow2.density < 1.0 and pow2.largest_gap >= 1, (
            f"power-of-two schedule density {pow2.density}, largest gap {pow2.largest_gap}"
        )


# ---------------------------------------------------------------------------
# 5. shape contract


@pytest.mark.parametrize("h, w, k", [(512, 1024, 19), (360, 480, 11)])
def test_criterion_5_shape_contract(criterion, h, w, k):
    with criterion(5, f"shape contract {h}x{w}") as notes:
        net = build(replace(CANONICAL, num_classes=k), 0).eval()
        probe = {}
        out = net(Tensor(np.zeros((1, 3, h, w))), probe=probe)
        assert out.shape == (1, k, h, w)
        for key, f in (("I_1", 2), ("I_2", 4), ("I_3", 8)):
            assert probe[key][2:] == (h // f, w // f), (key, probe[key])
        assert {lvl: fac for lvl, (fac, _) in probe["branches"].items()} == {"low": 1, "mid": 2, "high": 4}
        assert all(s[2:] == (h // 2, w // 2) for _, s in probe["branches"].values())
        notes.append(f"logits {out.shape}")


# ---------------------------------------------------------------------------
# 6. poly learning rate


def test_criterion_6_poly_lr(criterion):
    with criterion(6, "poly learning rate") as notes:
        base, max_it = 4.5e-2, 40_000
        assert poly_lr(base, 0, max_it) == base and poly_lr(base, max_it, max_it) == 0.0
        its = np.sort(np.random.default_rng(0).integers(0, max_it + 1, 10_000))
        lrs = [poly_lr(base, int(i), max_it) for i in its]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        mid = poly_lr(base, max_it // 2, max_it)
        assert abs(mid - base * 0.5 ** 0.9) <= 1e-12
        notes.append(f"midpoint {mid:.15g}")


# ---------------------------------------------------------------------------
# 7. structural oracles


def test_criterion_7_structural_oracles(criterion):
    with criterion(7, "structural oracles") as notes:
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5, 9, 11))
        a, b = rng.normal(size=(5, 1, 3, 1)), rng.normal(size=(5, 1, 1, 3))
        pair = ops.conv2d(ops.conv2d(Tensor(x), Tensor(a), padding=(2, 0), dilation=(2, 1), groups=5),
                          Tensor(b), padding=(0, 2), dilation=(1, 2), groups=5).data
        # the dense equivalent is the outer-product kernel with the same dilation
        dense_w = a * b  # (5,1,3,1) x (5,1,1,3) broadcasts to per-channel outer products
        dense = K.conv2d_reference(x, dense_w, (1, 1), (2, 2), (2, 2), 5)
        assert pair.shape == dense.shape, (pair.shape, dense.shape)
        fact_err = np.max(np.abs(pair - dense))
        assert fact_err <= 1e-12

        w = rng.normal(size=(4, 5, 3, 3))
        y = rng.normal(size=K.conv2d_forward(x, w, (2, 2), (1, 1), (1, 1), 1).shape)
        lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
        back = ops.transposed_conv2d(Tensor(y), Tensor(w), stride=2, padding=1).data[..., : x.shape[2], : x.shape[3]]
        adj_err = abs(lhs - np.sum(x * back)) / max(1.0, abs(lhs))
        assert adj_err <= 1e-10

        xs = rng.normal(size=(2, 12, 3, 4))
        for groups in (2, 3, 4):
            there = ops.channel_shuffle(Tensor(xs), groups).data
            back_again = ops.channel_shuffle(Tensor(there), 12 // groups).data
            assert np.array_equal(back_again, xs)

        m = EAR(rng, EarConfig(16, 2))
        for _, p in m.named_parameters():
            p.data[:] = 0.0
        for _, mod in m.named_modules():
            if isinstance(mod, BatchNorm2d):
                mod.running_var.data[:] = 1.0
        xe = rng.normal(size=(2, 16, 5, 6))
        assert np.array_equal(m.eval()(Tensor(xe)).data, ops.channel_shuffle(Tensor(xe), 2).data)
        notes.append(f"factorized {fact_err:.1e}, adjoint {adj_err:.1e}")


# ---------------------------------------------------------------------------
# 8. desk-scale training


def read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_8_desk_scale_training(criterion, tmp_path):
    with criterion(8, "desk-scale training") as notes:
        t0 = time.perf_counter()
        code = main(["train", "--synth", "--classes", "3", "--size", "64x96", "--epochs", "30", "--seed", "7",
                     "--out", str(tmp_path)])
        elapsed = time.perf_counter() - t0
        assert code == 0
        rows = read_history(tmp_path / "history.csv")
        assert len(rows) <= 30
        final = float(rows[-1]["miou"])
        sm = smoothed([float(r["loss"]) for r in rows], 5)
        notes.append(f"final mIoU {final:.4f}, {elapsed:.0f}s")
        assert final >= 0.90, final
        assert np.all(np.diff(sm) < 0), sm
        assert elapsed < 600


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9, "determinism") as notes:
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / tag
            d.mkdir()
            assert main(["train", "--synth", "--epochs", "2", "--seed", "11", "--train-count", "32",
                         "--val-count", "8", "--out", str(d)]) == 0
            outs.append(d)
        for name in ("history.csv", "weights.mscf"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
        notes.append("sha256 " + hashlib.sha256((outs[0] / "weights.mscf").read_bytes()).hexdigest()[:16])


# ---------------------------------------------------------------------------
# 10. golden weight fixture


def test_criterion_10_golden_fixture(criterion, tmp_path):
    with criterion(10, "weight-file golden fixture") as notes:
        net = build(get_preset("gradcheck"), 1)
        load_into(net, FIXTURE)
        ref = build(get_preset("gradcheck"), 0)
        assert all(a.data.tobytes() == b.data.tobytes()
                   for (_, a), (_, b) in zip(net.named_parameters(), ref.named_parameters()))
        good = FIXTURE.read_bytes()
        bad_version = good[:4] + struct.pack("<I", 9) + good[8:]
        cases = [
            (b"MSCX" + good[4:], BadMagicError, "bad-magic"),
            (bad_version, UnsupportedVersionError, "bad-version"),
            (good[: len(good) // 2], TruncatedError, "truncated"),
            (good + b"\0\0", WeightFileError, "weight-file"),
        ]
        for buf, cls, code in cases:
            with pytest.raises(cls) as e:
                decode(buf)
            assert e.value.code == code
        copy = tmp_path / "copy.mscf"
        shutil.copy(FIXTURE, copy)
        with pytest.raises(CensusMismatchError):
            load_into(build(get_preset("tiny"), 0), load_weights(copy))
        notes.append("bad-magic, bad-version, truncated, trailing, census-mismatch")
