import csv

import numpy as np
import pytest

from core import synth_data
from core.errors import GenerationError, PreconditionError
from core.raster_io import Manifest, histogram
from core.synth_data import (PALETTE, PROPORTION_TOLERANCE, SOURCE_PROPORTIONS, SceneSpec, StyleSpec, class_shares,
                             generate_dataset, generate_scene, render)


def test_scene_is_deterministic():
    spec = SceneSpec(seed=11, size=(64, 64), style=StyleSpec(noise_std=5.0))
    (label_a, tile_a), (label_b, tile_b) = generate_scene(spec), generate_scene(spec)
    assert label_a.equals(label_b)
    assert tile_a.equals(tile_b)


def test_realized_proportions_within_tolerance():
    for seed in range(3):
        label, _ = generate_scene(SceneSpec(seed=seed, size=(256, 256)))
        shares = class_shares(label.labels)
        assert np.all(np.abs(shares - np.asarray(SOURCE_PROPORTIONS)) <= PROPORTION_TOLERANCE)


def test_identity_style_renders_palette():
    label, tile = generate_scene(SceneSpec(seed=2, size=(64, 64)))
    expected = PALETTE[label.labels].transpose(2, 0, 1).astype(np.uint8)
    assert np.array_equal(tile.pixels, expected)
    assert tile.labels.max() <= 4


def test_quantized_style_is_spiky():
    labels = np.zeros((32, 32), dtype=np.uint8)
    style = StyleSpec(noise_std=10.0, quantize_step=8)
    pixels = render(labels, style, np.random.default_rng(0))
    assert np.all(pixels[pixels < 255] % 8 == 0)


def test_spec_validation():
    with pytest.raises(PreconditionError):
        SceneSpec(size=(16, 64)).validate()
    with pytest.raises(PreconditionError):
        SceneSpec(class_proportions=(0.5, 0.5, 0.5, 0.0, 0.0)).validate()
    with pytest.raises(PreconditionError):
        SceneSpec(style=StyleSpec(gains=(1.0, 0.0, 1.0, 1.0))).validate()


def test_unrealizable_proportions_raise(monkeypatch):
    monkeypatch.setattr(synth_data, '_layout', lambda size, proportions, rng: np.zeros(size, dtype=np.uint8))
    with pytest.raises(GenerationError, match="10 attempts"):
        generate_scene(SceneSpec(seed=0, size=(64, 64)))


def test_spec_json_roundtrip(tmp_path):
    spec = SceneSpec(seed=5, size=(96, 64), style=StyleSpec(gains=(1.3,) * 4, biases=(60.0,) * 4,
                                                            noise_std=2.0, smooth_sigma=1.0))
    spec.save(tmp_path / 'spec.json')
    assert SceneSpec.load(tmp_path / 'spec.json') == spec


def test_dataset_layout_and_pairing(tmp_path):
    source = SceneSpec(seed=3, size=(64, 64))
    target = SceneSpec(seed=3, size=(64, 64), style=StyleSpec(biases=(80.0,) * 4))
    manifest = generate_dataset(10, source, target, tmp_path, quiet=True)

    assert len(manifest) == 20
    assert len(manifest.select(domain='source')) == 10
    assert len(Manifest.load(tmp_path / 'manifest.csv')) == 20
    for s, t in zip(manifest.select(domain='source'), manifest.select(domain='target')):
        assert np.array_equal(s.load().labels, t.load().labels)

    src_hist = histogram(e.load() for e in manifest.select(domain='source'))
    tgt_hist = histogram(e.load() for e in manifest.select(domain='target'))
    values = np.arange(256)
    shift = (tgt_hist @ values) / tgt_hist.sum(axis=1) - (src_hist @ values) / src_hist.sum(axis=1)
    assert np.all(shift > 65) and np.all(shift <= 80)

    with open(tmp_path / 'label_distribution.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert sum(float(r['share']) for r in rows if r['domain'] == 'source') == pytest.approx(1.0, abs=1e-5)


def test_dataset_is_byte_deterministic(tmp_path):
    spec = SceneSpec(seed=1, size=(64, 64), style=StyleSpec(noise_std=3.0))
    generate_dataset(2, spec, spec, tmp_path / 'a', quiet=True)
    generate_dataset(2, spec, spec, tmp_path / 'b', quiet=True)
    for name in ('source/scene_00000.mbt', 'target/scene_00001.mbt', 'manifest.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_dataset_requires_shared_proportions(tmp_path):
    other = SceneSpec(class_proportions=(0.5, 0.3, 0.1, 0.05, 0.05))
    with pytest.raises(PreconditionError):
        generate_dataset(1, SceneSpec(), other, tmp_path, quiet=True)


def test_dataset_requires_one_layout_seed(tmp_path):
    with pytest.raises(PreconditionError, match='layout seed'):
        generate_dataset(1, SceneSpec(seed=1), SceneSpec(seed=2), tmp_path, quiet=True)
    assert not (tmp_path / 'manifest.csv').exists()
