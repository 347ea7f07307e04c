import pytest

from diffattack import synthetic
from diffattack.evaluation import ToyClassifier, train_toy_classifier
from diffattack.toy import ToyBackboneConfig, build_toy_backbone

# fast settings: enough structure to be differentiable/testable, cheap to build
FAST_BACKBONE = dict(autoencoder_steps=120, noise_steps=25)


@pytest.fixture(scope="session")
def backbone():
    """Fully trained toy backbone (the one acceptance runs against)."""
    return build_toy_backbone(ToyBackboneConfig())


@pytest.fixture(scope="session")
def fast_backbone():
    return build_toy_backbone(ToyBackboneConfig(**FAST_BACKBONE))


@pytest.fixture(scope="session")
def pool():
    """256-image synthetic pool with labels; the classifier training set."""
    images, labels = synthetic.generate_images(256, 32, 5150)
    return synthetic.as_image_tensors(images), [int(y) for y in labels]


@pytest.fixture(scope="session")
def surrogate(pool):
    images, labels = pool
    clf = ToyClassifier(7, synthetic.CLASS_NAMES)
    return train_toy_classifier(clf, list(zip(images, labels)), epochs=500)


@pytest.fixture(scope="session")
def target_classifiers(pool):
    images, labels = pool
    out = []
    for seed in (8, 9):
        clf = ToyClassifier(seed, synthetic.CLASS_NAMES)
        out.append(train_toy_classifier(clf, list(zip(images, labels)), epochs=500))
    return out
