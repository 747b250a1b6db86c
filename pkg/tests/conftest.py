import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES = []


def blobs(sizes, D=2, spread=0.3, separation=10.0, seed=0):
    """Gaussian blobs with centres at least ``separation`` apart."""
    rng = np.random.default_rng(seed)
    centers = []
    while len(centers) < len(sizes):
        c = rng.uniform(-separation * len(sizes) ** (1 / D), separation * len(sizes) ** (1 / D), D)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    X = np.vstack([rng.normal(c, spread, (s, D)) for c, s in zip(centers, sizes)])
    y = np.repeat(np.arange(len(sizes)), sizes)
    return X, y


def rings(n=200, radii=(1.0, 4.0), noise=0.08, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    parts, labels = [], []
    for k, (r, m) in enumerate(zip(radii, (half, n - half))):
        t = rng.uniform(0, 2 * np.pi, m)
        rr = r + rng.normal(0, noise, m)
        parts.append(np.column_stack([rr * np.cos(t), rr * np.sin(t)]))
        labels.append(np.full(m, k))
    return np.vstack(parts), np.concatenate(labels)


def random_graph(n, p, seed, groups=1):
    """Symmetric weighted graph with ``groups`` blocks and no isolated node."""
    rng = np.random.default_rng(seed)
    W = np.zeros((n, n))
    block = np.array_split(np.arange(n), groups)
    for b in block:
        for a, i in enumerate(b):
            if a:  # chain keeps each block connected
                W[b[a - 1], i] = W[i, b[a - 1]] = rng.uniform(0.1, 1.0)
            for j in b[a + 1:]:
                if rng.random() < p:
                    W[i, j] = W[j, i] = rng.uniform(0.1, 1.0)
    return W


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    from speclhs.demo import write_demo

    d = tmp_path_factory.mktemp("demo")
    write_demo(d)
    return d


@pytest.fixture(scope="session")
def demo_run(demo_dir):
    """Demo features (as the CLI loads them) with ten zones and both designs."""
    from speclhs import cluster, spectral_clhs, vanilla_clhs
    from speclhs.cli import RunConfig, load_features

    cfg = RunConfig.load(demo_dir / "config.json")
    raw, feats, _ = load_features(cfg)
    model = cluster(feats, 10, cfg.kernel, seed=42)
    return {
        "config": cfg,
        "raw": raw,
        "features": feats,
        "model": model,
        "spectral": spectral_clhs(feats, model, 10, seed=42).merged_indices,
        "vanilla": vanilla_clhs(feats, 10, seed=42).selected,
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
