import pytest
import torch

from mcnet.config import ModelConfig


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(stem_width=4, backbone_widths=(4, 6), backbone_strides=(1, 2), head_width=8,
                       cnn_head_blocks=1, attn_head_blocks=2, heads=2)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


TINY_RUN = {
    "data.image_size": 8, "data.samples_per_class": 56, "data.semantic_dim": 8,
    "model.stem_width": 4, "model.backbone_widths": "4, 6", "model.head_width": 8, "model.heads": 2,
    "protocol.test_per_class": 6, "protocol.n_sessions": 3,
    "train.base_epochs": 2, "train.incr_epochs": 3, "train.batch_size": 32,
}


def tiny_run(name: str = "toy", **overrides):
    from mcnet.config import preset
    return preset(name).replace(**{**TINY_RUN, **overrides})


@pytest.fixture
def tiny_cfg():
    return tiny_run()
