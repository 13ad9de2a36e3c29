import numpy as np
import pytest

from lifelong_depth import container
from lifelong_depth.data import preset
from lifelong_depth.depth_net import (
    EncoderConfig,
    ModelError,
    UnknownDomainError,
    add_head,
    build_model,
    clone,
    forward_head,
    load_checkpoint,
    param_report,
    save_checkpoint,
    snapshot,
)

A, B, C = preset("indoor_A"), preset("outdoor_B"), preset("indoor_C")
CFG = EncoderConfig(input_size=(32, 32))


def hand_counts(widths=(8, 16, 32), fused=16, cin=3, hidden=8):
    enc = 0
    for w in widths:
        enc += w * cin * 9 + w + w * w * 9 + w
        cin = w
    split = [6, 5, 5]
    enc += sum(c * w + c for c, w in zip(split, widths))
    head = 2 * (hidden * fused + hidden + hidden + 1)
    return enc, head


def image(seed=0, n=None):
    rng = np.random.default_rng(seed)
    return rng.random((32, 32, 3) if n is None else (n, 32, 32, 3))


@pytest.fixture
def model():
    return build_model(CFG, A, seed=0)


def test_one_head(model):
    assert model.domain_ids == ["indoor_A"]


def test_build_deterministic():
    m1, m2 = build_model(CFG, A, 5), build_model(CFG, A, 5)
    for (k, v), (k2, v2) in zip(m1.named_parameters().items(), m2.named_parameters().items()):
        assert k == k2 and v.data.tobytes() == v2.data.tobytes()
    m3 = build_model(CFG, A, 6)
    assert not np.array_equal(m1.encoder["stage1.down.weight"].data, m3.encoder["stage1.down.weight"].data)


def test_param_counts_closed_form(model):
    enc, head = hand_counts()
    assert (enc, head) == (18488, 290)
    report = param_report(model)
    assert report == {"encoder": enc, "head:indoor_A": head, "total": enc + head}
    assert sum(v for k, v in report.items() if k != "total") == report["total"]
    assert sum(int(np.prod(s)) for s in CFG.encoder_shapes().values()) == enc


def test_shared_fraction_three_heads(model):
    add_head(model, B, 0)
    add_head(model, C, 0)
    enc, head = hand_counts()
    assert model.shared_fraction == enc / (enc + 3 * head)
    assert model.shared_fraction >= 0.90
    report = param_report(model)
    assert report["head:indoor_A"] == report["head:outdoor_B"] == report["head:indoor_C"]
    assert report["head:indoor_A"] < 0.1 * report["encoder"]


@pytest.mark.parametrize("kwargs", [
    dict(stage_widths=(8,)),
    dict(stage_widths=(8, 0, 32)),
    dict(fused_feature_channels=2),
    dict(input_size=(30, 30)),
    dict(head_kernel=2),
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)


def test_forward_shapes(model):
    depth, s, feat = forward_head(model, image(), "indoor_A")
    assert depth.shape == (32, 32) and s.shape == (32, 32) and feat.shape == (16,)
    depth_b, _, feat_b = forward_head(model, image(n=3), "indoor_A")
    assert depth_b.shape == (3, 32, 32) and feat_b.shape == (3, 16)


def test_forward_deterministic(model):
    a = forward_head(model, image(), "indoor_A")
    b = forward_head(model, image(), "indoor_A")
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_unknown_domain_lists_known(model):
    with pytest.raises(UnknownDomainError) as exc:
        forward_head(model, image(), "outdoor_B")
    assert "indoor_A" in str(exc.value)


def test_bad_input_shape(model):
    with pytest.raises(ModelError):
        forward_head(model, np.zeros((16, 16, 3)), "indoor_A")


def test_depth_in_range_random_inputs(model):
    add_head(model, B, 0)
    rng = np.random.default_rng(1)
    # scale up the last depth layer so outputs reach the saturated ends
    for h in model.heads.values():
        h.params["depth.conv2.weight"].data *= 50
    for _ in range(10):
        x = rng.uniform(-5, 5, (100, 32, 32, 3))
        for spec in (A, B):
            d, s, _ = forward_head(model, x, spec.domain_id)
            assert d.min() >= spec.depth_range[0] and d.max() <= spec.depth_range[1]
            assert np.abs(s).max() <= 10


def test_add_head_keeps_old(model):
    before = {k: v.data.copy() for k, v in model.named_parameters().items()}
    out_before = forward_head(model, image(), "indoor_A")[0]
    tag = model.version_tag
    add_head(model, B, 3)
    assert model.domain_ids == ["indoor_A", "outdoor_B"]
    assert model.version_tag == tag + 1
    for k, v in before.items():
        assert model.named_parameters()[k].data.tobytes() == v.tobytes()
    assert forward_head(model, image(), "indoor_A")[0].tobytes() == out_before.tobytes()


def test_duplicate_head(model):
    with pytest.raises(ModelError):
        add_head(model, A, 0)


def test_heads_isolated(model):
    add_head(model, B, 0)
    out = forward_head(model, image(), "indoor_A")
    for p in model.heads["outdoor_B"].params.values():
        p.data += 1.0
    again = forward_head(model, image(), "indoor_A")
    for x, y in zip(out, again):
        assert x.tobytes() == y.tobytes()


def test_snapshot_isolated(model):
    snap = snapshot(model)
    out = forward_head(snap, image(), "indoor_A")[0]
    assert out.tobytes() == forward_head(model, image(), "indoor_A")[0].tobytes()
    for p in model.parameters():
        p.data += 0.5
    assert forward_head(snap, image(), "indoor_A")[0].tobytes() == out.tobytes()
    assert snap.frozen
    with pytest.raises(ValueError):
        snap.encoder["stage1.down.bias"].data[0] = 1.0
    with pytest.raises(ModelError):
        add_head(snap, B, 0)
    assert not any(p.requires_grad for p in snap.parameters())


def test_clone_trainable(model):
    c = clone(snapshot(model))
    assert not c.frozen and all(p.requires_grad for p in c.parameters())


def test_checkpoint_roundtrip(model, tmp_path):
    add_head(model, B, 1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"note": "x"}, extra_arrays={"v": np.arange(3.0)})
    back, extra, arrays = load_checkpoint(path)
    assert back.version_tag == model.version_tag and back.domain_ids == model.domain_ids
    assert extra == {"note": "x"}
    np.testing.assert_array_equal(arrays["v"], np.arange(3.0))
    for k, v in model.named_parameters().items():
        assert back.named_parameters()[k].data.tobytes() == v.data.tobytes()
    assert back.heads["outdoor_B"].depth_range == (0.0, 80.0)


def test_checkpoint_version_mismatch(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    meta, arrays = container.read(path, "checkpoint")
    meta.pop("_kind")
    meta["checkpoint_version"] = 99
    container.write(path, "checkpoint", meta, arrays)
    with pytest.raises(ModelError):
        load_checkpoint(path)
