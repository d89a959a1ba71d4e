import os

# Must happen before numpy loads anywhere: single-threaded BLAS is faster for
# this workload's small matrices and keeps timing stable.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np        # noqa: E402
import pytest             # noqa: E402

from gsu.backbone import BackboneConfig          # noqa: E402
from gsu.heads import HeadConfig                 # noqa: E402
from gsu.scene_model import FeatureConfig        # noqa: E402


@pytest.fixture
def tiny_feat():
    return FeatureConfig(n_agents=4, n_lanes=5, lane_segments=3, t_hist=4)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(token_dim=8, n_interleave=1, m_alltoken=1, dropout=0.1)


@pytest.fixture
def tiny_heads():
    return HeadConfig(k_modes=2, t_fut=3)


def random_tiny_features(feat, rng, n_agents_valid=3, n_lanes_valid=3, scale=5.0):
    """Random padded/masked feature tensors in the tiny geometry."""
    agent = np.zeros((feat.n_agents, feat.t_hist, feat.d_agent))
    agent[:n_agents_valid] = rng.normal(scale=scale,
                                        size=(n_agents_valid, feat.t_hist, feat.d_agent))
    lanes = np.zeros((feat.n_lanes, feat.lane_segments, feat.d_map))
    lanes[:n_lanes_valid] = rng.normal(scale=scale,
                                       size=(n_lanes_valid, feat.lane_segments, feat.d_map))
    agent_valid = np.arange(feat.n_agents) < n_agents_valid
    map_valid = np.arange(feat.n_lanes) < n_lanes_valid
    return agent, agent_valid, lanes, map_valid
