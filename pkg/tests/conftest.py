import numpy as np
import pytest

from powercal.regions import RegionHierarchy, Tile
from powercal.synth import benchmark_default, generate_country


def random_hierarchy(rng, n_districts=3, munis=(7, 9), tiles=(1, 5), feature_dim=3, with_truth=True):
    """Random hierarchy built directly from Tile records (no synth code)."""
    ground_truth, muni_district, muni_truth, tile_list = {}, {}, {}, []
    for d in range(n_districts):
        did = f"d{d:03d}"
        total = 0.0
        for j in range(int(rng.integers(munis[0], munis[1] + 1))):
            mid = f"{did}.m{j:03d}"
            muni_district[mid] = did
            msum = 0.0
            for t in range(int(rng.integers(tiles[0], tiles[1] + 1))):
                v = float(rng.gamma(2.0, 3.0)) if with_truth else None
                f = tuple(float(x) for x in rng.normal(size=feature_dim))
                tile_list.append(Tile(f"{mid}.t{t:03d}", mid, f, v))
                if with_truth:
                    msum += v
            muni_truth[mid] = msum
            total += msum
        ground_truth[did] = total if with_truth else float(rng.uniform(10, 100))
    return RegionHierarchy.build(
        ground_truth, muni_district, tile_list, feature_dim, muni_truth if with_truth else None
    )


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at vector x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (f(up) - f(dn)) / (2 * step)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    sel = mag > floor
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(analytic[sel] - numeric[sel]) / mag[sel]))


@pytest.fixture(scope="session")
def benchmark():
    return generate_country(benchmark_default())


@pytest.fixture(scope="session")
def exact_benchmark():
    return generate_country(benchmark_default().replace(powerlaw_noise_sigma=0.0))
