import os

import numpy as np
import pytest
import torch

from cadet.scenegen import builtin_rules, render_scene, sample_normal

# single-core box: keep torch from oversubscribing
torch.set_num_threads(1)

CACHE_ROOT = os.path.join(os.path.dirname(__file__), "..", ".cache", "runs")


@pytest.fixture(scope="session")
def rule():
    return builtin_rules()["pinboard"]


@pytest.fixture(scope="session")
def normal_scenes(rule):
    """20 rendered normal scenes with captions and masks."""
    out = []
    for seed in range(20):
        spec = sample_normal(rule, seed)
        img, masks, caption = render_scene(spec, rule, seed=seed)
        out.append((spec, img, masks, caption))
    return out


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
