import numpy as np
import pytest
import torch

from stable_teacher.detector import count_parameters
from stable_teacher.eor import EoRConfig, ErrorRecovery, eor_forward, init_eor
from stable_teacher.types import LocalizationMap

TINY = EoRConfig(depth=3, channels=[4, 8, 8])


def test_default_size_near_one_million():
    n = count_parameters(ErrorRecovery(EoRConfig()))
    assert abs(n - 1.1e6) <= 0.15 * 1.1e6


@pytest.mark.parametrize("shape", [(8, 32, 32), (8, 30, 28), (5, 17, 23), (1, 8, 8)])
def test_shape_and_range_preserved(shape):
    model = init_eor(TINY)
    raw = LocalizationMap(np.random.default_rng(0).random(shape))
    out = eor_forward(model, raw)
    assert out.values.shape == shape
    assert out.values.min() >= 0 and out.values.max() <= 1


def test_unpadded_input_raises_with_guidance():
    model = init_eor(TINY)
    with pytest.raises(ValueError, match="multiples of 4"):
        model(torch.zeros(1, 8, 30, 32), pad=False)
    assert model(torch.zeros(1, 8, 32, 32), pad=False).shape == (1, 8, 32, 32)


def test_frame_wise_variant_treats_frames_independently():
    model = init_eor(EoRConfig(depth=3, channels=[4, 8, 8], volumetric=False))
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        full = model(x)
        single = model(x[:, 1:2])
    assert torch.allclose(full[:, 1:2], single, atol=1e-6)


def test_volumetric_variant_mixes_frames():
    model = init_eor(TINY)
    x = torch.rand(1, 4, 16, 16)
    y = x.clone()
    y[:, 3] = 0
    with torch.no_grad():
        assert not torch.allclose(model(x)[:, 0], model(y)[:, 0])


def test_seeded_and_isolated():
    a, b = init_eor(EoRConfig(seed=3, **{"depth": 3, "channels": [4, 8, 8]})), init_eor(
        EoRConfig(seed=3, depth=3, channels=[4, 8, 8]))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_detached_input_blocks_gradient_to_source():
    """Loss on the refined map of a detached map must not reach the producer of the map."""
    producer = torch.nn.Parameter(torch.rand(1, 4, 8, 8))
    model = init_eor(TINY)
    out = model(torch.sigmoid(producer).detach())
    out.mean().backward()
    assert producer.grad is None
    assert all(p.grad is not None for p in model.parameters())


def test_config_mismatch():
    with pytest.raises(ValueError):
        EoRConfig(depth=3, channels=[4, 8]).validate()
