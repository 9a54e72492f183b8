import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcgan.errors import ConfigError
from ctcgan.synth import (
    AIR,
    BONE,
    LUNG,
    SOFT,
    PhantomSpec,
    generate_dataset,
    generate_phantom,
    generate_phantom_with_labels,
)


def test_deterministic():
    a = generate_phantom(PhantomSpec(seed=4))
    b = generate_phantom(PhantomSpec(seed=4))
    assert np.array_equal(a.data, b.data)


def test_zero_structures_all_air():
    spec = PhantomSpec(organs=0, lungs=0, bones=0, seed=1)
    v, labels = generate_phantom_with_labels(spec)
    assert np.all(labels == AIR)
    lo, hi = spec.band(AIR)
    assert v.data.min() >= lo and v.data.max() <= hi
    assert abs(v.data.mean() + 1000) < 24


def test_every_class_present_and_in_band():
    spec = PhantomSpec(dims=(64, 64, 64), seed=2)
    v, labels = generate_phantom_with_labels(spec)
    for cls in (AIR, LUNG, SOFT, BONE):
        m = labels == cls
        assert m.any()
        lo, hi = spec.band(cls)
        assert v.data[m].min() >= lo and v.data[m].max() <= hi


def test_band_fractions_64():
    # fractions measured from the labels must agree with a histogram of values
    spec = PhantomSpec(dims=(64, 64, 64), seed=3)
    v, labels = generate_phantom_with_labels(spec)
    for cls in (AIR, LUNG, SOFT, BONE):
        lo, hi = spec.band(cls)
        in_band = np.mean((v.data >= lo) & (v.data <= hi))
        assert in_band == pytest.approx(np.mean(labels == cls), abs=1e-12)
    frac = np.bincount(labels.ravel(), minlength=4) / labels.size
    assert 0.2 < frac[AIR] < 0.8 and frac[SOFT] > 0.1 and frac[LUNG] > 0.02 and frac[BONE] > 0.001


def test_texture_gives_variation_within_class():
    v, labels = generate_phantom_with_labels(PhantomSpec(seed=5))
    assert v.data[labels == SOFT].std() > 5.0


@pytest.mark.parametrize("dims", [(8, 32, 32), (32, 32)])
def test_invalid_dims(dims):
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(dims=dims))


def test_overlapping_bands_rejected():
    bands = {"air": (-1000, 24), "lung": (-700, 100), "soft": (40, 60), "bone": (80, 300)}
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(bands=bands))


def test_dataset():
    vols = generate_dataset(4, (16, 16, 16), seed=9)
    assert len(vols) == 4 and all(v.dims == (16, 16, 16) for v in vols)
    blobs = {v.data.tobytes() for v in vols}
    assert len(blobs) == 4
    again = generate_dataset(4, (16, 16, 16), seed=9)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(vols, again))
    assert len(generate_dataset(1, (16, 16, 16))) == 1
    with pytest.raises(ConfigError):
        generate_dataset(0)


def test_dims_order():
    v = generate_phantom(PhantomSpec(dims=(16, 20, 24)))
    assert v.dims == (16, 20, 24) and v.data.shape == (24, 20, 16)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_phantom_properties(seed):
    spec = PhantomSpec(dims=(24, 24, 16), seed=seed)
    v, labels = generate_phantom_with_labels(spec)
    assert np.all(np.isfinite(v.data))
    bands_hit = sum(np.any((v.data >= spec.band(c)[0]) & (v.data <= spec.band(c)[1])) for c in range(4))
    assert bands_hit >= 3
