import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from core.errors import CheckpointError, ConfigError, ManifestError, ShapeError
from core.raster_io import Manifest, ManifestEntry, Tile, write_tile
from core.seg_eval import (RESULTS_HEADER, ConfusionMatrix, EvalResult, SegConfig, band_means,
                           build_segmentation_model, evaluate, load_seg_model, poly_lr, prepare_training_set,
                           read_results_csv, train_segmentation, write_results_csv)


@pytest.fixture
def tiny_seg_cfg():
    return SegConfig(batch_size=2, iter_max=6, widths=(8, 16), mix_mode='source', log_every=2,
                     device='cpu', seed=1)


def test_poly_lr_values():
    cfg = SegConfig(lr_base=1e-4, iter_max=90000, power=0.9)
    assert poly_lr(cfg, 0) == 1e-4
    assert poly_lr(cfg, 45000) == pytest.approx(1e-4 * 0.5 ** 0.9, rel=1e-12)
    assert poly_lr(cfg, 90000) == 0


def test_seg_config_validation():
    with pytest.raises(ConfigError):
        SegConfig(power=0).validate()
    with pytest.raises(ConfigError):
        SegConfig(backbone='deeplab').validate()
    with pytest.raises(ConfigError):
        SegConfig(mix_mode='both').validate()


def test_iou_perfect_and_disjoint():
    labels = np.arange(5, dtype=np.uint8).repeat(4).reshape(4, 5)
    perfect = ConfusionMatrix().add(labels, labels)
    assert np.all(perfect.iou() == 1.0)
    assert perfect.miou() == 1.0
    assert perfect.pixel_accuracy() == 1.0

    disjoint = ConfusionMatrix().add((labels + 1) % 5, labels)
    assert np.all(disjoint.iou() == 0.0)
    assert disjoint.miou() == 0.0


def test_iou_partial_overlap():
    truth = np.array([[0, 0, 1]])
    prediction = np.array([[0, 1, 0]])
    cm = ConfusionMatrix().add(prediction, truth)
    iou = cm.iou()
    assert iou[0] == pytest.approx(1 / 3)
    assert iou[1] == 0.0
    assert np.all(np.isnan(iou[2:]))
    assert cm.miou() == pytest.approx(1 / 6)


def test_class_accuracy_uses_truth_support():
    truth = np.array([[0, 0, 1, 1]])
    prediction = np.array([[0, 1, 1, 1]])
    result = EvalResult(ConfusionMatrix().add(prediction, truth))
    acc = result.class_accuracy
    assert acc[0] == 0.5 and acc[1] == 1.0
    assert np.all(np.isnan(acc[2:]))
    assert result.pixel_accuracy == 0.75


def test_iou_is_symmetric_under_swap():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 5, (16, 16)), rng.integers(0, 5, (16, 16))
    assert np.allclose(ConfusionMatrix().add(a, b).iou(), ConfusionMatrix().add(b, a).iou())


def test_confusion_accumulates_and_rejects_shapes():
    x = np.zeros((2, 2), dtype=np.uint8)
    total = ConfusionMatrix().add(x, x) + ConfusionMatrix().add(x, x)
    assert total.total == 8
    with pytest.raises(ShapeError):
        ConfusionMatrix().add(np.zeros((2, 3)), np.zeros((3, 2)))


def test_prepare_training_set_mixes_and_keeps_labels(tmp_path, tiny_dataset):
    _, manifest = tiny_dataset
    stylized_entries = []
    for e in manifest.select(domain='source').entries:
        tile = e.load()
        out = tmp_path / 'stylized' / 'source' / e.path.name
        write_tile(Tile(pixels=255 - tile.pixels), out)
        stylized_entries.append(ManifestEntry(path=out, domain='source', split='train'))
    stylized = Manifest(stylized_entries)
    stylized.save(tmp_path / 'stylized' / 'manifest.csv')

    mixed = prepare_training_set(manifest, tmp_path / 'stylized', mix_mode='mixed')
    assert len(mixed.manifest) == 2 * len(stylized)
    for original, styled in zip(mixed.manifest.entries[:4], mixed.manifest.entries[4:]):
        assert styled.path.name == original.path.name
        assert styled.label_path == original.label_path
    # inverted copies average to mid-range in every band
    assert np.allclose(mixed.band_means, 0.0, atol=1e-6)

    only = prepare_training_set(manifest, stylized, mix_mode='stylized')
    assert all(e.path.parent.name == 'source' and 'stylized' in str(e.path) for e in only.manifest.entries)
    assert prepare_training_set(manifest, mix_mode='source').band_means == band_means(
        manifest.select(domain='source').entries)


def test_prepare_training_set_missing_counterpart(tiny_dataset):
    _, manifest = tiny_dataset
    partial = Manifest(manifest.select(domain='source').entries[:2])
    with pytest.raises(ManifestError):
        prepare_training_set(manifest, partial, mix_mode='mixed')
    with pytest.raises(ManifestError):
        prepare_training_set(manifest, None, mix_mode='stylized')


def test_model_logits_shape():
    cfg = SegConfig(widths=(8, 16, 32), device='cpu')
    model = build_segmentation_model(cfg, (0.0, 0.0, 0.0, 0.0))
    assert model(torch.zeros(2, 4, 32, 48)).shape == (2, 5, 32, 48)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 4, 30, 32))
    with pytest.raises(ShapeError):
        build_segmentation_model(cfg, (0.0, 0.0))


def test_train_and_evaluate(tmp_path, tiny_dataset, tiny_seg_cfg):
    _, manifest = tiny_dataset
    training_set = prepare_training_set(manifest, mix_mode='source')
    path = train_segmentation(training_set, tiny_seg_cfg, tmp_path / 'seg', quiet=True)
    assert path == tmp_path / 'seg' / 'model.pt'

    with open(tmp_path / 'seg' / 'seg_log.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert [int(r['iter']) for r in rows] == list(range(6))
    for r in rows:
        assert float(r['lr']) == pytest.approx(poly_lr(tiny_seg_cfg, int(r['iter'])), rel=1e-12)
        assert math.isfinite(float(r['loss']))
    assert len(Manifest.load(tmp_path / 'seg' / 'training_set.csv')) == 4

    model = load_seg_model(path)
    assert model.band_means.tolist() == pytest.approx(list(training_set.band_means))
    result = evaluate(model, manifest, quiet=True)
    assert result.confusion.total == 4 * 64 * 64
    assert 0.0 <= result.pixel_accuracy <= 1.0
    assert evaluate(path, manifest, quiet=True).confusion.counts.tolist() == result.confusion.counts.tolist()


def test_training_is_deterministic(tmp_path, tiny_dataset, tiny_seg_cfg):
    _, manifest = tiny_dataset
    training_set = prepare_training_set(manifest, mix_mode='source')
    cfg = replace(tiny_seg_cfg, iter_max=3)
    train_segmentation(training_set, cfg, tmp_path / 'a', quiet=True)
    train_segmentation(training_set, cfg, tmp_path / 'b', quiet=True)
    assert (tmp_path / 'a' / 'seg_log.csv').read_bytes() == (tmp_path / 'b' / 'seg_log.csv').read_bytes()


def test_evaluate_needs_target_tiles(tiny_dataset):
    _, manifest = tiny_dataset
    model = build_segmentation_model(SegConfig(widths=(8, 16), device='cpu'), (0.0,) * 4)
    with pytest.raises(ManifestError):
        evaluate(model, manifest.select(domain='source'), quiet=True)


def test_load_missing_model(tmp_path):
    with pytest.raises(CheckpointError):
        load_seg_model(tmp_path / 'model.pt')


def test_results_csv(tmp_path):
    labels = np.array([[0, 1], [2, 3]])
    adapted = EvalResult(ConfusionMatrix().add(labels, labels))
    baseline = EvalResult(ConfusionMatrix().add(np.zeros_like(labels), labels))
    write_results_csv({'adapted': adapted, 'baseline': baseline}, tmp_path / 'results.csv')

    with open(tmp_path / 'results.csv', newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == RESULTS_HEADER and len(rows[0]) == 7
    assert rows[1] == ['adapted', '100.00', '100.00', '100.00', '100.00', '100.00', 'nan']
    assert rows[2][1] == '6.25'

    table = read_results_csv(tmp_path / 'results.csv')
    assert table['baseline']['miou'] == pytest.approx(6.25)
    assert math.isnan(table['adapted'][RESULTS_HEADER[-1]])
