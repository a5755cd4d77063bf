"""Data validator"""
import logging
from collections import defaultdict

from core.errors import DataError
from core.networks import DOWNSAMPLE
from core.raster_io import Manifest

logger = logging.getLogger('hrsem.data')


class DataValidator:
    def __init__(self, manifest: Manifest):
        self.manifest = manifest

    def validate(self) -> dict:
        issues = []
        bands = defaultdict(set)
        sizes = set()

        if not self.manifest.select(domain='source').entries:
            issues.append("No source tiles")
        if not self.manifest.select(domain='target').entries:
            issues.append("No target tiles")

        for entry in self.manifest:
            try:
                tile = entry.load()
            except (OSError, DataError) as e:
                issues.append(f"Cannot read: {entry.path} ({e})")
                continue

            bands[entry.domain].add(tile.bands)
            sizes.add((tile.height, tile.width))
            if tile.height % DOWNSAMPLE or tile.width % DOWNSAMPLE:
                issues.append(f"Sides not divisible by {DOWNSAMPLE}: {entry.path.name} ({tile.height}x{tile.width})")
            if entry.domain == 'source' and entry.split == 'train' and tile.labels is None:
                issues.append(f"Unlabelled source tile: {entry.path.name}")

        for domain, counts in bands.items():
            if len(counts) > 1:
                issues.append(f"Inconsistent band counts in {domain}: {sorted(counts)}")
        if len({c for counts in bands.values() for c in counts}) > 1:
            issues.append("Source and target band counts differ")

        return {
            'valid': len(issues) == 0,
            'issues': issues,
            'num_tiles': len(self.manifest),
            'num_source': len(self.manifest.select(domain='source')),
            'num_target': len(self.manifest.select(domain='target')),
            'sizes': sorted(sizes),
        }
