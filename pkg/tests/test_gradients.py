import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from instance_retrieval.model import CoLayer, CrossLayer, HybridStreamTransformer, TransformerBlock, forward_co, forward_cross, forward_intra, instance_embedding
from instance_retrieval.pretrain import contrastive_loss, itm_loss, mlm_loss, mrp_loss
from instance_retrieval.utils import torch_generator
from tests import random_inputs, tiny_model

TOLERANCES = dict(eps=1e-6, atol=1e-5, rtol=1e-4)


def _double(module):
    return module.double().eval()


def _states(*shape, seed=0):
    return torch.randn(*shape, generator=torch_generator(seed), dtype=torch.float64, requires_grad=True)


class TestGradients:
    def test_intra_block(self) -> None:
        block = _double(TransformerBlock(tiny_model()))
        mask = torch.tensor([[True, True, True, False]])

        assert gradcheck(lambda x: forward_intra(block, x, mask), (_states(1, 4, 8),), **TOLERANCES)

    def test_cross_layer(self) -> None:
        layer = _double(CrossLayer(tiny_model()))
        text_mask, visual_mask = torch.ones(1, 3, dtype=torch.bool), torch.tensor([[True, True, False]])

        assert gradcheck(
            lambda t, v: forward_cross(layer, t, v, text_mask, visual_mask),
            (_states(1, 3, 8, seed=1), _states(1, 3, 8, seed=2)),
            **TOLERANCES,
        )

    def test_co_layer(self) -> None:
        layer = _double(CoLayer(tiny_model()))
        text_mask, visual_mask = torch.ones(1, 2, dtype=torch.bool), torch.ones(1, 3, dtype=torch.bool)

        assert gradcheck(
            lambda t, v: forward_co(layer, t, v, text_mask, visual_mask),
            (_states(1, 2, 8, seed=3), _states(1, 3, 8, seed=4)),
            **TOLERANCES,
        )

    def test_losses(self) -> None:
        labels = torch.tensor([[7, -100, 2]])
        region_masked = torch.tensor([[True, False, True]])
        targets = torch.randn(1, 3, 4, generator=torch_generator(5), dtype=torch.float64)

        assert gradcheck(lambda logits: mlm_loss(logits, labels), (_states(1, 3, 10, seed=6),), **TOLERANCES)
        assert gradcheck(lambda p: mrp_loss(p, targets, region_masked), (_states(1, 3, 4, seed=7),), **TOLERANCES)
        assert gradcheck(lambda logits: itm_loss(logits, torch.tensor([0, 1, 1])), (_states(3, 2, seed=8),), **TOLERANCES)
        assert gradcheck(
            lambda image, text: contrastive_loss(image, text, 0.5),
            (_states(3, 4, seed=9), _states(3, 4, seed=10)),
            **TOLERANCES,
        )

    def test_contrast_and_joint_heads(self) -> None:
        model = _double(HybridStreamTransformer(tiny_model()))

        assert gradcheck(lambda pooled: model.contrast_text(pooled), (_states(3, 8, seed=11),), **TOLERANCES)
        assert gradcheck(lambda pooled: model.contrast_image(pooled), (_states(3, 8, seed=12),), **TOLERANCES)
        assert gradcheck(lambda image, text: model.joint_head(image * text), (_states(3, 8, seed=13), _states(3, 8, seed=14)), **TOLERANCES)

    def test_parameter_gradients(self) -> None:
        model = _double(HybridStreamTransformer(tiny_model()))
        inputs = random_inputs(model.config, batch=2, text_len=3, regions=2).to(torch.float64)
        names = (
            "feature_projection.weight",
            "text_layers.0.attention.value.weight",
            "cross_layers.0.visual.attention.query.weight",
            "co_layers.0.block.feed_forward.expand.bias",
            "contrast_image.1.weight",
            "joint_head.weight",
        )
        parameters = dict(model.named_parameters())

        def retrieval_vector(*values):
            outputs = functional_call(model, dict(zip(names, values)), (inputs,))
            return instance_embedding(outputs)

        assert gradcheck(retrieval_vector, tuple(parameters[name].detach().clone().requires_grad_(True) for name in names), **TOLERANCES)
