import os

import hypothesis
import numpy as np
import pytest
import skimage.data
from PIL import Image

from exedit import imaging
from exedit.clipspace import EmbeddingModels
from exedit.metrics import MetricSuite
from exedit.pipeline import EditEngine, ExemplarTriplet

hypothesis.settings.register_profile("ci", deadline=None, max_examples=50)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

MODEL_SEED = 7


def natural_image(name: str) -> Image.Image:
    """One of the bundled test photographs, at working size."""
    return imaging.to_work_size(Image.fromarray(getattr(skimage.data, name)()))


def tinted(img: Image.Image, delta) -> Image.Image:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return imaging.to_image(np.clip(arr + np.asarray(delta, dtype=np.float32), 0.0, 1.0))


@pytest.fixture(scope="session")
def engine(tmp_path_factory) -> EditEngine:
    cache = tmp_path_factory.mktemp("inversion-cache")
    return EditEngine.build(seed=MODEL_SEED, cache_dir=cache)


@pytest.fixture(scope="session")
def embedder(engine):
    return engine.embedder


@pytest.fixture(scope="session")
def backbone(engine):
    return engine.backbone


@pytest.fixture(scope="session")
def models(engine) -> EmbeddingModels:
    return engine.embedder.models


@pytest.fixture(scope="session")
def metric_suite(models) -> MetricSuite:
    return MetricSuite(models)


@pytest.fixture(scope="session")
def fixture_images() -> dict[str, Image.Image]:
    return {name: natural_image(name) for name in ("astronaut", "chelsea", "coffee")}


@pytest.fixture(scope="session")
def tint_triplet(fixture_images) -> ExemplarTriplet:
    """Fixed style-transfer triplet: a cool tint demonstrated on one photo,
    transferred onto another."""
    x = fixture_images["chelsea"]
    return ExemplarTriplet(
        x=x,
        x_edit=tinted(x, (-0.2, 0.1, 0.05)),
        y=fixture_images["coffee"],
        y_edit=tinted(fixture_images["coffee"], (-0.2, 0.1, 0.05)),
        edit_type="global_style",
        id="tint-fixture",
    )
