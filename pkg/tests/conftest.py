import pytest

from itercomp.diffusion import PretrainHyper, pretrain
from itercomp.gallery import default_gallery
from itercomp.prefs import RaterSpec, build_dataset
from itercomp.reward import RewardHyper, train_reward
from itercomp.rng import substream

SMALL_COUNTS = {"attribute": 80, "spatial": 80, "nonspatial": 80}


@pytest.fixture(scope="session")
def small_dataset():
    dataset, _ = build_dataset(
        SMALL_COUNTS, default_gallery(), RaterSpec(), substream(123, "test-dataset")
    )
    return dataset


@pytest.fixture(scope="session")
def small_rewards(small_dataset):
    models = {}
    for category in ("attribute", "spatial", "nonspatial"):
        model, _ = train_reward(
            small_dataset, category, RewardHyper(epochs=10),
            substream(123, "test-reward", category),
        )
        models[category] = model
    return models


@pytest.fixture(scope="session")
def small_pretrained(small_dataset):
    data = [(r.prompt, img.scene) for r in small_dataset.rankings for img in r.images]
    model, report = pretrain(
        data, PretrainHyper(steps=3000), substream(123, "test-pretrain")
    )
    return model, report
