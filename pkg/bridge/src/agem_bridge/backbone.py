"""Tap-point extraction from torchvision-style backbones.

The engine consumes activations from four late stages of a deep residual
network: the last block of the penultimate stage (B4_23) and the three
blocks of the final stage (B5_1, B5_2, B5_3). For torchvision ResNets
those are layer3 and layer4.0/1/2; any module exposing the named
submodules can be wrapped.
"""

from __future__ import annotations

import numpy as np
import torch

RESNET_TAPS = {
    "B4_23": "layer3",
    "B5_1": "layer4.0",
    "B5_2": "layer4.1",
    "B5_3": "layer4.2",
}


class TapBackbone:
    """Runs a frozen backbone and captures named intermediate activations."""

    def __init__(self, model: torch.nn.Module, layers: dict | None = None):
        layers = dict(layers or RESNET_TAPS)
        named = dict(model.named_modules())
        missing = [f"{tap} -> {name}" for tap, name in layers.items()
                   if name not in named]
        if missing:
            raise ValueError("backbone has no modules for tap points: "
                             + ", ".join(sorted(missing)))
        self.model = model.eval()
        self.layers = layers

    def activations(self, batch: torch.Tensor) -> dict[str, np.ndarray]:
        """One image in (1, 3, H, W), tap name -> float32 CHW array out.

        Outputs are rectified so the taps are valid post-activation maps
        even for blocks that do not end in a ReLU (for ResNets this is a
        no-op).
        """
        if batch.ndim != 4 or batch.shape[0] != 1:
            raise ValueError(f"expected a single-image batch, got {tuple(batch.shape)}")
        grabbed = {}
        named = dict(self.model.named_modules())
        hooks = []

        def capture(tap):
            def hook(_mod, _inp, out):
                grabbed[tap] = out.detach()
            return hook

        for tap, name in self.layers.items():
            hooks.append(named[name].register_forward_hook(capture(tap)))
        try:
            with torch.no_grad():
                self.model(batch)
        finally:
            for h in hooks:
                h.remove()
        return {tap: torch.relu(t)[0].cpu().numpy().astype(np.float32)
                for tap, t in grabbed.items()}


def resnet101_taps(weights_path: str | None = None, pretrained: bool = False,
                   seed: int | None = None) -> TapBackbone:
    """ResNet-101 wrapped for tap extraction.

    pretrained=True uses torchvision's published ImageNet weights (needs
    the download cache or network); weights_path loads a local state dict;
    otherwise the net is randomly initialized, optionally from a fixed
    seed so exports are reproducible.
    """
    from torchvision.models import resnet101

    if pretrained:
        from torchvision.models import ResNet101_Weights
        model = resnet101(weights=ResNet101_Weights.DEFAULT)
    else:
        if seed is not None:
            torch.manual_seed(seed)
        model = resnet101(weights=None)
        if weights_path is not None:
            model.load_state_dict(torch.load(weights_path, map_location="cpu"))
    return TapBackbone(model)
