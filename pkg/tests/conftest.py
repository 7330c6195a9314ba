import numpy as np
import pytest

from upl.data import SyntheticSceneConfig, generate_synthetic_scene
from upl.model import FewShotModel, ModelConfig
from upl.rng import substream
from upl.training import episode_stream


def make_scenes(count, seed0=1000, ppo=24, jitter=0.3, gap=5.0, classes=(0, 1, 2), color_noise=0.05, with_color=True):
    cfgs = [
        SyntheticSceneConfig(
            points_per_object=ppo,
            objects_per_scene=1,
            intra_class_jitter=jitter,
            inter_class_gap=gap,
            seed=seed0 + i,
            color_noise=color_noise,
            with_color=with_color,
        )
        for i in range(count)
    ]
    return [generate_synthetic_scene(c, list(classes)) for c in cfgs]


@pytest.fixture(scope="session")
def tiny_scenes():
    return make_scenes(8, seed0=400, ppo=12)


@pytest.fixture(scope="session")
def tiny_episode(tiny_scenes):
    return episode_stream(tiny_scenes, 1, 1, (0, 1, 2), seed=11, count=1, name="fixture")[0]


def small_model(seed=0, **overrides) -> FewShotModel:
    kwargs = dict(n_way=1, d_in=6, d_f=12, hidden=10, n_tok=16, k_neighbors=4)
    kwargs.update(overrides)
    return FewShotModel(ModelConfig(**kwargs), substream(seed, "init"))


@pytest.fixture
def model_small():
    return small_model()


def rng(seed=0):
    return np.random.default_rng(seed)
