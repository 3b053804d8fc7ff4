import numpy as np
import pytest
import torch

from ssda.data import SyntheticShiftSpec, generate_synthetic_pair

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    """Small shifted classification pair shared across tests."""
    root = str(tmp_path_factory.mktemp("tiny_pair"))
    spec = SyntheticShiftSpec(samples_per_class=10, test_samples_per_class=5,
                              hue_rotation=35.0, noise_sigma=0.05,
                              blur_radius=0.5, seed=3)
    src, tgt = generate_synthetic_pair(spec, root)
    return {"root": root, "spec": spec, "source": src, "target": tgt}


@pytest.fixture(scope="session")
def tiny_seg_pair(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("tiny_seg_pair"))
    spec = SyntheticShiftSpec(image_size=48, num_classes=4,
                              samples_per_class=6, test_samples_per_class=3,
                              task="segmentation", hue_rotation=35.0,
                              noise_sigma=0.05, seed=3)
    src, tgt = generate_synthetic_pair(spec, root)
    return {"root": root, "spec": spec, "source": src, "target": tgt}


@pytest.fixture
def rng():
    return np.random.default_rng(0)
