import numpy as np
import pytest

from lifelong_depth import replay
from lifelong_depth.container import FormatError
from lifelong_depth.data import generate_domain, preset
from lifelong_depth.depth_net import EncoderConfig, add_head, build_model
from lifelong_depth.replay import (
    ReplayError,
    ReplayStore,
    build_replay,
    compute_mean_feature,
    pooled_features,
    sample_batch,
)

A, B = preset("indoor_A"), preset("outdoor_B")


@pytest.fixture(scope="module")
def ds():
    return generate_domain(A, 60, (16, 16), seed=0)


@pytest.fixture(scope="module")
def model():
    return build_model(EncoderConfig(input_size=(16, 16)), A, seed=0)


def fake_dataset(n):
    d = generate_domain(A, 1, (8, 8), seed=0)
    idx = np.arange(n)
    return type(d)(d.spec, 0, np.repeat(d.images, n, 0), np.repeat(d.depths, n, 0), np.repeat(d.masks, n, 0),
                   np.repeat(d.clean_depths, n, 0), idx)


def test_cap_500_of_1000():
    e = build_replay(fake_dataset(1000), cap=500, seed=1)
    assert len(e) == 500 and len(np.unique(e.source_indices)) == 500


def test_cap_larger_than_dataset():
    e = build_replay(fake_dataset(300), cap=500, seed=1)
    np.testing.assert_array_equal(np.sort(e.source_indices), np.arange(300))


def test_seeded(ds):
    assert build_replay(ds, 10, 4).source_indices.tolist() == build_replay(ds, 10, 4).source_indices.tolist()
    assert build_replay(ds, 10, 4).source_indices.tolist() != build_replay(ds, 10, 5).source_indices.tolist()


def test_independent_of_row_order(ds):
    perm = np.random.default_rng(0).permutation(len(ds))
    a, b = build_replay(ds, 10, 3), build_replay(ds.subset(perm), 10, 3)
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    np.testing.assert_array_equal(a.images, b.images)


def test_retained_rows_match_source(ds):
    e = build_replay(ds, 7, 2)
    for i, src in enumerate(e.source_indices):
        np.testing.assert_array_equal(e.images[i], ds.images[src])


def test_errors(ds):
    with pytest.raises(ReplayError):
        build_replay(ds.subset([]), 5, 0)
    with pytest.raises(ReplayError):
        build_replay(ds, 0, 0)
    with pytest.raises(ReplayError):
        sample_batch(build_replay(ds, 3, 0), 0, 0)


def test_mean_feature_brute_force(ds, model):
    e = build_replay(ds, 50, 0)
    mu = compute_mean_feature(e, model)
    feats = pooled_features(model, e.images)
    brute = np.zeros(feats.shape[1])
    for row in feats:
        brute += row
    brute /= len(feats)
    assert mu.shape == (16,)
    assert np.max(np.abs(mu - brute)) < 1e-12
    assert e.feature_version == model.version_tag


def test_mean_of_one(ds, model):
    e = build_replay(ds.subset([5]), 50, 0)
    np.testing.assert_array_equal(compute_mean_feature(e, model), pooled_features(model, ds.images[5:6])[0])


def test_mean_symmetric(ds, model, monkeypatch):
    v = np.arange(16.0)
    monkeypatch.setattr(replay, "pooled_features", lambda m, imgs, kind="fused": np.stack([v, -v]))
    assert np.array_equal(compute_mean_feature(build_replay(ds, 2, 0), model), np.zeros(16))


def test_stale_detection(ds):
    m = build_model(EncoderConfig(input_size=(16, 16)), A, seed=0)
    store = ReplayStore([build_replay(ds, 5, 0)])
    assert store.stale_domains(m) == ["indoor_A"]
    store.refresh_features(m)
    assert store.stale_domains(m) == []
    before = store["indoor_A"].mean_feature.copy()
    add_head(m, B, 0)
    for p in m.encoder_parameters():
        p.data *= 1.1
    assert store.stale_domains(m) == ["indoor_A"]
    store.refresh_features(m)
    assert not np.array_equal(before, store["indoor_A"].mean_feature)


def test_sample_batch_single(ds):
    e = build_replay(ds.subset([3]), 5, 0)
    x, d, m = sample_batch(e, 1, 0)
    np.testing.assert_array_equal(x[0].transpose(1, 2, 0), ds.images[3])
    np.testing.assert_array_equal(d[0, 0], ds.depths[3])


def test_sample_batch_deterministic(ds):
    e = build_replay(ds, 10, 0)
    assert all(np.array_equal(a, b) for a, b in zip(sample_batch(e, 4, 9), sample_batch(e, 4, 9)))


def test_batch_histogram_uniform():
    rng = np.random.default_rng(11)
    rows = replay.sample_rows(10, 100_000, rng)
    counts = np.bincount(rows, minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) < 3 * sigma)


def test_save_load_roundtrip(ds, model, tmp_path):
    store = ReplayStore([build_replay(ds, 6, 3)])
    store.refresh_features(model)
    p1, p2 = tmp_path / "a.replay", tmp_path / "b.replay"
    replay.save(store, p1)
    back = replay.load(p1)
    e, f = store["indoor_A"], back["indoor_A"]
    assert (f.cap, f.seed, f.feature_version, f.spec) == (e.cap, e.seed, e.feature_version, e.spec)
    assert f.mean_feature.tobytes() == e.mean_feature.tobytes()
    replay.save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_file(ds, tmp_path):
    p = tmp_path / "a.replay"
    ReplayStore([build_replay(ds, 3, 0)]).save(p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-10])
    with pytest.raises(FormatError) as exc:
        replay.load(p)
    assert exc.value.offset > 0
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError) as exc:
        replay.load(p)
    assert exc.value.offset == 0


def test_unknown_domain():
    with pytest.raises(ReplayError):
        ReplayStore()["nope"]
