"""Network assembly, presets, shape contract and end-to-end gradients."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mscfnet.gradcheck import check_parameters
from mscfnet.network import (
    CANONICAL,
    LEVELS,
    NetworkConfig,
    build,
    get_preset,
    gradcheck_config,
    known_presets,
    tiny_config,
    variant_presets,
)
from mscfnet.tensor import ShapeError, Tensor
from mscfnet.train import cross_entropy_loss


def n_params(net):
    return sum(p.data.size for p in net.parameters(trainable_only=True))


def test_canonical_configuration():
    c = CANONICAL
    assert c.stage_widths == (32, 64, 128) and c.ear_counts == (5, 10)
    assert c.dilation_schedule_1 == (1, 1, 2, 2, 5)
    assert c.dilation_schedule_2 == (1, 2, 5, 7, 9, 2, 5, 7, 9, 17)
    assert c.attention == "eca" and c.spatial_attention and c.fusion == "add"
    assert c.branch_levels == ("low", "mid", "high") and c.branch_width == 32


def test_preset_rows():
    p = variant_presets()
    assert list(p) == [
        "final", "no-fusion", "fusion-concat", "fusion-add", "attention-se", "attention-eca", "+spatial",
        "reduced-modules", "power-of-two-rates", "high-only", "high+mid", "high+mid+low",
    ]
    assert p["final"] == CANONICAL
    assert p["reduced-modules"].ear_counts == (3, 6)
    assert p["reduced-modules"].dilation_schedule_1 == (1, 1, 2)
    assert p["reduced-modules"].dilation_schedule_2 == (1, 2, 5, 7, 9, 17)
    assert p["power-of-two-rates"].dilation_schedule_2 == (1, 1, 2, 2, 4, 4, 8, 8, 16, 16)
    assert p["power-of-two-rates"].ear_counts == (5, 10)
    assert p["high-only"].branch_levels == ("high",)
    assert p["no-fusion"].fusion == "none" and p["no-fusion"].branch_levels == ("high",)
    assert p["+spatial"] == p["high+mid+low"] == p["final"]


def test_unknown_preset_lists_known():
    with pytest.raises(KeyError) as e:
        get_preset("bogus")
    for name in known_presets():
        assert name in str(e.value)


@pytest.mark.parametrize(
    "override",
    [
        dict(dilation_schedule_1=(1, 2)),
        dict(branch_levels=("low", "mid")),
        dict(stage_widths=(32, 63, 128)),
        dict(fusion="none"),
        dict(attention="cbam"),
        dict(num_classes=1),
    ],
)
def test_config_violations(override):
    with pytest.raises(ValueError):
        replace(CANONICAL, **override)


def test_probe_scales_and_branch_factors():
    net = build(tiny_config(5), seed=0)
    probe = {}
    out = net(Tensor(np.zeros((2, 3, 64, 96))), probe=probe)
    assert out.shape == (2, 5, 64, 96)
    assert probe["O_1"][2:] == (32, 48)
    assert probe["I_1"][2:] == (32, 48) and probe["I_2"][2:] == (16, 24) and probe["I_3"][2:] == (8, 12)
    assert {k: f for k, (f, _) in probe["branches"].items()} == {"low": 1, "mid": 2, "high": 4}
    assert all(s[2:] == (32, 48) for _, s in probe["branches"].values())
    assert probe["fused"][2:] == (32, 48)


small_configs = st.builds(
    lambda widths, counts, att, sa, fusion, levels, k: NetworkConfig(
        num_classes=k,
        stage_widths=widths,
        ear_counts=counts,
        dilation_schedule_1=(1, 2, 3)[: counts[0]],
        dilation_schedule_2=(1, 2, 5)[: counts[1]],
        attention=att,
        spatial_attention=sa,
        fusion=fusion,
        branch_levels=("high",) if fusion == "none" else levels,
        branch_width=8,
    ),
    widths=st.sampled_from([(8, 16, 32), (6, 10, 12), (16, 16, 16)]),
    counts=st.tuples(st.integers(1, 3), st.integers(1, 3)),
    att=st.sampled_from(["eca", "se", "none"]),
    sa=st.booleans(),
    fusion=st.sampled_from(["add", "concat", "none"]),
    levels=st.sampled_from([("high",), ("mid", "high"), ("low", "high"), LEVELS]),
    k=st.integers(2, 6),
)


@given(cfg=small_configs)
def test_shape_contract_any_config(cfg):
    net = build(cfg, seed=1)
    assert net(Tensor(np.zeros((2, 3, 64, 96)))).shape == (2, cfg.num_classes, 64, 96)


@pytest.mark.parametrize("h, w, bad", [(60, 96, "height 60"), (64, 90, "width 90")])
def test_divisibility_error_names_extent(h, w, bad):
    with pytest.raises(ShapeError, match=bad):
        build(gradcheck_config(), 0)(Tensor(np.zeros((1, 3, h, w))))


def test_build_is_deterministic():
    a, b = build(tiny_config(), 3), build(tiny_config(), 3)
    pa, pb = list(a.named_parameters()), list(b.named_parameters())
    assert [n for n, _ in pa] == [n for n, _ in pb]
    assert len({n for n, _ in pa}) == len(pa)
    for (_, x), (_, y) in zip(pa, pb):
        assert x.data.tobytes() == y.data.tobytes()
    assert any(x.data.tobytes() != y.data.tobytes() for (_, x), (_, y) in zip(pa, build(tiny_config(), 4).named_parameters()))


def test_eval_forward_is_pure(rng):
    net = build(tiny_config(), 0).eval()
    x = Tensor(rng.random((1, 3, 32, 48)))
    assert net(x).data.tobytes() == net(x).data.tobytes()


def test_param_names_are_dotted_and_unique():
    names = [p.name for p in build(CANONICAL, 0).parameters()]
    assert len(names) == len(set(names))
    assert "block2.9.dw1x3_d.conv.weight" in names and "deconv.weight" in names


@pytest.mark.parametrize("level", ["low", "mid"])
def test_removing_branch_costs_exactly_its_census(level):
    full = build(CANONICAL, 0)
    levels = tuple(l for l in LEVELS if l != level)
    reduced = build(replace(CANONICAL, branch_levels=levels), 0)
    branch = getattr(full, f"branch_{level}")
    own = sum(p.data.size for p in branch.parameters(trainable_only=True))
    assert n_params(full) - n_params(reduced) == own


def test_end_to_end_gradient_tiny_network():
    rng = np.random.default_rng(0)
    net = build(gradcheck_config(3), seed=0).train()
    x = Tensor(rng.random((2, 3, 16, 24)))
    y = rng.integers(0, 3, size=(2, 16, 24))
    params = [(n, p) for n, p in net.named_parameters() if p.trainable]
    reports = check_parameters(lambda: cross_entropy_loss(net(x), y), params, step=1e-5, tolerance=1e-4)
    assert len(reports) == len(params)
    worst = max(reports.items(), key=lambda kv: kv[1].max_rel_error)
    assert all(r.passed for r in reports.values()), worst
