import numpy as np
import pytest

from core.config import ArchConfig, TrainConfig
from core.data import phantom_subject
from core.models import PhantomSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """Smallest network: one pooling level, two base channels."""
    return ArchConfig(base_channels=2, depth=1, kernel_size=3, num_partial_classes=2, num_full_classes=3)


@pytest.fixture
def small_arch():
    return ArchConfig(base_channels=2, depth=2, kernel_size=3, num_partial_classes=3, num_full_classes=4)


@pytest.fixture
def small_phantom_spec():
    """16^3 scene with two full structures, one of them in the partial map."""
    return PhantomSpec(size=16, num_structures=2, partial_size=1, noise_sigma=0.05, seed=3)


@pytest.fixture
def small_train_config(tiny_arch):
    return TrainConfig(patch_size=8, pretrain_epochs=1, joint_epochs=1, steps_per_epoch=3,
                       seed=7, augment=True, augment_magnitude=1.0, arch=tiny_arch)


@pytest.fixture
def small_subjects(small_phantom_spec):
    """Two full-label phantoms sharing one atlas."""
    return [
        phantom_subject(f"subject_{i:03d}",
                        PhantomSpec(size=16, num_structures=2, partial_size=1, seed=10 + i, atlas_seed=3))
        for i in range(2)
    ]
