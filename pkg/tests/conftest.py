import numpy as np
import pytest

from headsplat.bundle import BakeParams, bake_bundle
from headsplat.sampler import PrimitiveBatch

SMALL_PARAMS = BakeParams(
    resolution=192,
    face_size=64,
    subdivision=2,
    render_size=96,
    band_width=6,
    seed=11,
    codebook_entries=16,
    codebook_dim=6,
)


@pytest.fixture(scope="session")
def small_bundle():
    """Shared synthetic avatar small enough for fast rendering tests."""
    return bake_bundle(SMALL_PARAMS)


@pytest.fixture(scope="session")
def small_bundle_dir(tmp_path_factory, small_bundle):
    out = tmp_path_factory.mktemp("bundle")
    small_bundle.save(out)
    return out


def random_primitive_batch(n: int, rng: np.random.Generator, depth=(2.0, 4.0), spread=1.0,
                           scales=(0.02, 0.12), opacities=(0.1, 0.9)) -> PrimitiveBatch:
    """Random renderable batch in front of an identity camera at the origin."""
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return PrimitiveBatch(
        positions=np.column_stack(
            [
                rng.uniform(-spread, spread, n),
                rng.uniform(-spread, spread, n),
                rng.uniform(depth[0], depth[1], n),
            ]
        ),
        rotations=quats,
        scales=rng.uniform(scales[0], scales[1], (n, 3)),
        opacities=rng.uniform(opacities[0], opacities[1], n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        cells=np.zeros((n, 3), dtype=np.int64),
        corner_rows=np.zeros((n, 3), dtype=np.int64),
        corner_cols=np.zeros((n, 3), dtype=np.int64),
        step=1,
        source_shape=(4, 4),
    )
