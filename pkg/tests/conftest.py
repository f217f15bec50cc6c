import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vinelpr.cloud import PointCloud, ScanRecord  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def line_records(xs, ys=None, sequence_id="s"):
    ys = [0.0] * len(xs) if ys is None else ys
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]))
    return [ScanRecord(cloud, (x, y), float(i), sequence_id, scan_index=i) for i, (x, y) in enumerate(zip(xs, ys))]
