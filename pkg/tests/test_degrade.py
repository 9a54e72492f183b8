import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcgan.degrade import (
    ConditionKind,
    build_training_set,
    enumerate_transforms,
    iter_training_pairs,
    load_pairs,
    make_condition,
    pixelate,
    poisson_degrade,
    transform_array,
    write_pairs,
)
from ctcgan.errors import ConfigError, ShapeMismatchError
from ctcgan.volume import Volume, VoxelBlock, make_grid, pad_to_grid


def _block(data):
    return VoxelBlock(np.asarray(data, dtype=np.float64))


# -- conditions ---------------------------------------------------------------


def test_autoencoder_is_identity_copy():
    x = _block(np.random.default_rng(0).uniform(-1, 1, (8, 8, 8)))
    c = make_condition(x, "autoencoder")
    assert np.array_equal(c.data, x.data) and c.data is not x.data


def test_condition_kind_aliases():
    assert ConditionKind.parse("auto") is ConditionKind.AUTOENCODER
    assert ConditionKind.parse("noisy") is ConditionKind.NOISY
    with pytest.raises(ValueError):
        ConditionKind.parse("blur")


def test_noisy_constant_zero_mean():
    x = _block(np.zeros((32, 32, 32)))
    c = make_condition(x, "noisy", rng_seed=1, peak=1024)
    assert abs(c.data.mean()) <= 0.02  # 1% of the [-1, 1] range


def test_poisson_mean_within_three_standard_errors():
    peak, v = 1024, 0.0
    lam = peak * (v + 1) / 2
    out = poisson_degrade(np.full((32, 32, 32), v), np.random.default_rng(2), peak)
    counts = (out + 1) * peak / 2
    se = np.sqrt(lam / counts.size)
    assert abs(counts.mean() - lam) < 3 * se


def test_poisson_zero_rate_preserved():
    x = np.full((8, 8, 8), -1.0)
    x[4:] = 0.3
    out = poisson_degrade(x, np.random.default_rng(3))
    assert np.all(out[:4] == -1.0)


def test_poisson_output_on_count_lattice():
    peak = 64
    out = poisson_degrade(np.random.default_rng(4).uniform(-1, 0.5, (6, 6, 6)), np.random.default_rng(5), peak)
    k = (out + 1) * peak / 2
    assert np.allclose(k, np.round(k)) and out.min() >= -1 and out.max() <= 1


def test_poisson_rejects_small_peak():
    with pytest.raises(ConfigError):
        make_condition(_block(np.zeros((2, 2, 2))), "noisy", peak=0.5)


def test_noisy_seeded():
    x = _block(np.random.default_rng(6).uniform(-1, 1, (8, 8, 8)))
    a = make_condition(x, "noisy", rng_seed=(1, 2, 3))
    b = make_condition(x, "noisy", rng_seed=(1, 2, 3))
    c = make_condition(x, "noisy", rng_seed=(1, 2, 4))
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)


def test_pixelate_explicit():
    a = np.arange(64, dtype=float).reshape(4, 4, 4)
    out = pixelate(_block(a)).data
    for z in range(4):
        for y in range(4):
            for x in range(4):
                assert out[z, y, x] == a[z - z % 2, y - y % 2, x - x % 2]


def test_pixelate_constant_invariant():
    assert np.all(pixelate(_block(np.full((4, 4, 4), 0.3))).data == 0.3)


def test_pixelate_odd_edge_rejected():
    with pytest.raises(ShapeMismatchError):
        pixelate(_block(np.zeros((3, 4, 4))))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31))
def test_pixelate_idempotent_and_cellwise_constant(edge, seed):
    a = np.random.default_rng(seed).uniform(-1, 1, (edge,) * 3)
    p = pixelate(_block(a)).data
    assert np.array_equal(pixelate(_block(p)).data, p)
    cells = p.reshape(edge // 2, 2, edge // 2, 2, edge // 2, 2)
    assert np.all(cells == cells[:, :1, :, :1, :, :1])


# -- augmentation -------------------------------------------------------------


def test_transform_family_size_and_order():
    ts = enumerate_transforms()
    assert len(ts) == 34
    assert [t.index for t in ts] == list(range(34))
    assert ts[0].is_identity
    assert sum(t.kind == "rotation-mirror" for t in ts) == 8
    assert ts[8].offset == (-1, -1, -1) and ts[-1].offset == (1, 1, 1)


def test_transforms_pairwise_distinct_as_permutations():
    # apply each transform to a field of unique labels: every output must differ
    grid = make_grid((64, 64, 32), 32)
    labels = np.arange(32 * 64 * 64, dtype=float).reshape(32, 64, 64)
    outs = [transform_array(labels, t, grid).tobytes() for t in enumerate_transforms()]
    assert len(set(outs)) == 34


def test_rotation_mirror_are_bijections():
    grid = make_grid((64, 32, 32), 32)  # non-square in xy
    labels = np.arange(32 * 32 * 64, dtype=float).reshape(32, 32, 64)
    for t in enumerate_transforms()[:8]:
        out = transform_array(labels, t, grid)
        assert np.array_equal(np.sort(out.ravel()), labels.ravel())


def test_rotation_group_closure():
    grid = make_grid((32, 32, 32), 32)
    a = np.random.default_rng(7).normal(size=(32, 32, 32))
    quarter = enumerate_transforms()[2]  # one turn, no flip
    out = a
    for _ in range(4):
        out = transform_array(out, quarter, grid)
    assert np.array_equal(out, a)


def test_translation_edge_clamped():
    grid = make_grid((32, 32, 32), 32)
    a = np.random.default_rng(8).normal(size=(32, 32, 32))
    t = next(t for t in enumerate_transforms() if t.offset == (1, 0, 0))
    out = transform_array(a, t, grid)
    assert np.array_equal(out[:, :, :24], a[:, :, 8:])
    assert np.all(out[:, :, 24:] == a[:, :, 31:32])


def test_training_set_counts():
    vols = [Volume(np.random.default_rng(i).uniform(-1, 1, (32, 32, 16))) for i in range(2)]
    pairs = build_training_set(vols, "autoencoder", seed=0, edge=16)
    assert len(pairs) == 2 * 34 * 4
    for c, x in pairs:
        assert c.data.shape == (16, 16, 16) and np.array_equal(c.data, x.data)


def test_block_filter_hook():
    v = Volume(np.random.default_rng(9).uniform(-1, 1, (32, 32, 16)))
    pairs = list(iter_training_pairs([v], "autoencoder", 0, edge=16, transforms=enumerate_transforms()[:1],
                                     block_filter=lambda b: b.origin[2] == 0))
    assert len(pairs) == 2


def test_noise_independent_of_iteration_subset():
    v = Volume(np.random.default_rng(10).uniform(-1, 1, (32, 32, 16)))
    full = {k.stem(): c.data for k, c, _ in iter_training_pairs([v], "noisy", 3, edge=16)}
    sub = {k.stem(): c.data for k, c, _ in
           iter_training_pairs([v], "noisy", 3, edge=16, transforms=enumerate_transforms()[5:6])}
    for stem, data in sub.items():
        assert np.array_equal(full[stem], data)


def test_write_and_load_pairs(tmp_path):
    v = Volume(np.random.default_rng(11).uniform(-1, 1, (16, 16, 16)))
    keyed = list(iter_training_pairs([v], "pixelated", 0, edge=8, transforms=enumerate_transforms()[:2]))
    manifest = write_pairs(tmp_path, keyed, seed=0, kind="pixelated", edge=8)
    cond, tgt, info = load_pairs(manifest)
    assert cond.shape == (16, 1, 8, 8, 8) and tgt.shape == cond.shape
    assert info["condition"] == "pixelated" and int(info["pairs"]) == 16
    assert (tmp_path / "vol0_t1_b3_cond.ctv").exists()
    cells = cond.reshape(16, 1, 4, 2, 4, 2, 4, 2)
    assert np.all(cells == cells[:, :, :, :1, :, :1, :, :1])
