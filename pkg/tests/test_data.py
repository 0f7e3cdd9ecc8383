import numpy as np
import pytest

from fedmixstyle.data import (
    DataConfig,
    Dataset,
    DomainParams,
    apply_style_shift,
    decode_dataset,
    encode_dataset,
    gen_client_pool,
    gen_domains,
    gen_source,
    load_dataset,
    make_templates,
    sample_episode,
    save_dataset,
    upsample_bilinear,
)
from fedmixstyle.errors import CorruptMessage, FrameError, IncompleteMessage, InvalidArgument, WrongProtocol
from fedmixstyle.rng import derive_rng

from oracles import nearest_template_accuracy

SMALL = DataConfig(n_train=500, n_test=100)


def test_source_is_deterministic():
    a, b = gen_source(SMALL), gen_source(SMALL)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    np.testing.assert_array_equal(a[2], b[2])


def test_source_seed_changes_data():
    other = gen_source(DataConfig(n_train=500, n_test=100, seed=7))
    assert not other[0].equals(gen_source(SMALL)[0])


def test_source_shapes_and_balance(source_data):
    train, test, templates = source_data
    assert train.images.shape == (4000, 1, 16, 16) and train.images.dtype == np.float32
    assert len(test) == 1000
    assert templates.shape == (5, 16, 16)
    for d in (train, test):
        counts = np.bincount(d.labels, minlength=5)
        assert np.all(counts == counts[0])


def test_templates_standardized():
    t = make_templates(DataConfig()).astype(np.float64)
    np.testing.assert_allclose(t.mean(axis=(1, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(t.std(axis=(1, 2)), 1, rtol=1e-5)


def test_classes_are_separable(source_data):
    _, test, templates = source_data
    assert nearest_template_accuracy(templates, test) > 0.95


def test_train_and_test_are_different_draws(source_data):
    train, test, _ = source_data
    assert not np.array_equal(train.images[:10], test.images[:10])


def test_upsample_corners_and_constant():
    g = np.arange(9, dtype=float).reshape(3, 3)
    up = upsample_bilinear(g, 5)
    assert up[0, 0] == 0 and up[-1, -1] == 8 and up[0, -1] == 2 and up[-1, 0] == 6
    assert up[2, 2] == g[1, 1]
    np.testing.assert_allclose(upsample_bilinear(np.full((4, 4), 3.0), 16), 3.0)


def test_domains_in_range_and_distinct():
    ds = gen_domains(50, 42)
    assert [d.client_id for d in ds] == list(range(50))
    assert all(0.4 <= d.gain <= 1.8 and -0.8 <= d.bias <= 0.8 for d in ds)
    assert len({(d.gain, d.bias) for d in ds}) == 50


def test_domain_substreams_are_isolated():
    # client 3 draws the same domain whether or not other clients exist
    alone = gen_domains(1, 42, client_ids=[3])[0]
    assert alone == gen_domains(4, 42)[3]
    assert gen_domains(4, 42) == gen_domains(4, 42)
    assert gen_domains(4, 43) != gen_domains(4, 42)


def test_domain_errors():
    with pytest.raises(InvalidArgument):
        gen_domains(0, 1)
    with pytest.raises(InvalidArgument):
        DomainParams(0, 3.0, 0.0, 1)
    with pytest.raises(InvalidArgument):
        DomainParams(0, 1.0, -1.5, 1)


def test_client_pool_isolated_per_client(source_data):
    cfg = DataConfig()
    t = source_data[2]
    a = gen_client_pool(cfg, t, 0)
    assert a.equals(gen_client_pool(cfg, t, 0))
    assert not a.equals(gen_client_pool(cfg, t, 1))
    assert len(a) == cfg.pool_per_class * cfg.n_classes


def test_style_shift_moments():
    rng = np.random.default_rng(0)
    d = Dataset(rng.normal(size=(40, 1, 16, 16)).astype(np.float32), np.zeros(40, dtype=int))
    p = DomainParams(0, 1.5, -0.5, 0)
    s = apply_style_shift(d, p)
    x, y = d.images.astype(np.float64), s.images.astype(np.float64)
    assert y.mean() == pytest.approx(1.5 * x.mean() - 0.5, abs=1e-5)
    assert y.std() == pytest.approx(1.5 * x.std(), rel=1e-5)
    back = (y + 0.5) / 1.5
    np.testing.assert_allclose(back, x, atol=1e-5)
    assert np.array_equal(s.labels, d.labels)


def test_style_shift_identity():
    d = gen_source(SMALL)[1]
    assert apply_style_shift(d, DomainParams(0, 1.0, 0.0, 0)).equals(d)


def test_episode_counts_and_disjointness(source_data):
    _, test, _ = source_data
    ep = sample_episode(test, 5, 20, derive_rng(1, "ep"), 5)
    assert np.all(np.bincount(ep.support.labels, minlength=5) == 5)
    assert np.all(np.bincount(ep.query.labels, minlength=5) == 20)
    assert not set(ep.support_idx) & set(ep.query_idx)
    assert ep.support.equals(test.subset(ep.support_idx))


def test_episode_deterministic(source_data):
    _, test, _ = source_data
    a = sample_episode(test, 3, 4, derive_rng(5, "ep"), 5)
    b = sample_episode(test, 3, 4, derive_rng(5, "ep"), 5)
    np.testing.assert_array_equal(a.support_idx, b.support_idx)
    np.testing.assert_array_equal(a.query_idx, b.query_idx)


def test_episode_too_few_samples():
    d = Dataset(np.zeros((10, 1, 4, 4), np.float32), np.arange(10) % 2)
    with pytest.raises(InvalidArgument):
        sample_episode(d, 3, 3, np.random.default_rng(0), 2)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        DataConfig(n_classes=1)
    with pytest.raises(InvalidArgument):
        DataConfig(gain_range=(0.1, 1.0))
    with pytest.raises(InvalidArgument):
        DataConfig(pool_per_class=10)


def test_fmxd_roundtrip(tmp_path):
    d = gen_source(SMALL)[1]
    path = tmp_path / "d.fmxd"
    save_dataset(path, d, 5)
    back, n_classes = load_dataset(path)
    assert n_classes == 5 and back.equals(d)
    assert back.labels.dtype == np.int64


def test_fmxd_rejects_damage():
    d = Dataset(np.random.default_rng(0).normal(size=(6, 1, 4, 4)).astype(np.float32), np.arange(6) % 3)
    buf = encode_dataset(d, 3)
    with pytest.raises(WrongProtocol):
        decode_dataset(b"XXXX" + buf[4:])
    with pytest.raises(IncompleteMessage):
        decode_dataset(buf[:-1])
    with pytest.raises(CorruptMessage):
        decode_dataset(buf + b"\0")
    for i in range(len(buf)):
        bad = bytearray(buf)
        bad[i] ^= 0x40
        with pytest.raises(FrameError):
            decode_dataset(bytes(bad))
