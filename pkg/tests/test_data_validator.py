import numpy as np

from core.data_validator import DataValidator
from core.raster_io import Manifest, ManifestEntry, Tile, write_tile


def test_generated_dataset_is_valid(tiny_dataset):
    _, manifest = tiny_dataset
    report = DataValidator(manifest).validate()
    assert report['valid'], report['issues']
    assert report['num_source'] == report['num_target'] == 4
    assert report['sizes'] == [(64, 64)]


def test_missing_domain_reported(tiny_dataset):
    _, manifest = tiny_dataset
    report = DataValidator(manifest.select(domain='source')).validate()
    assert not report['valid']
    assert "No target tiles" in report['issues']


def test_bad_tiles_reported(tmp_path, tiny_dataset):
    _, manifest = tiny_dataset
    odd = tmp_path / 'odd.mbt'
    write_tile(Tile(pixels=np.zeros((4, 36, 64), dtype=np.uint8)), odd)
    three_band = tmp_path / 'rgb.mbt'
    write_tile(Tile(pixels=np.zeros((3, 64, 64), dtype=np.uint8)), three_band)
    garbage = tmp_path / 'garbage.mbt'
    garbage.write_bytes(b'not a tile')

    extra = [
        ManifestEntry(path=odd, domain='target', split='train'),
        ManifestEntry(path=three_band, domain='target', split='train'),
        ManifestEntry(path=garbage, domain='target', split='train'),
    ]
    report = DataValidator(Manifest(manifest.entries + extra)).validate()
    issues = '\n'.join(report['issues'])
    assert not report['valid']
    assert 'divisible by 8' in issues and 'odd.mbt' in issues
    assert 'Inconsistent band counts in target' in issues
    assert 'Cannot read' in issues and 'garbage.mbt' in issues


def test_unlabelled_source_reported(tmp_path, tiny_dataset):
    _, manifest = tiny_dataset
    bare = tmp_path / 'bare.mbt'
    write_tile(Tile(pixels=np.zeros((4, 64, 64), dtype=np.uint8)), bare)
    entries = manifest.entries + [ManifestEntry(path=bare, domain='source', split='train')]
    report = DataValidator(Manifest(entries)).validate()
    assert any('Unlabelled source tile: bare.mbt' == issue for issue in report['issues'])
