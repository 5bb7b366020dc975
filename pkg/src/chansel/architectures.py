"""Built-in network specs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple, Union

from .network import BlockSpec, LayerSpec, NetworkSpec, ResidualGroupSpec, conv, passthrough

# 16 conv layers, 4 max-pools ("M"), then global average pool and one dense layer
VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
             512, 512, 512, 512, "M", 512, 512, 512, 512)


def plain_cnn(name: str, cfg: Sequence[Union[int, str]], input_shape=(3, 32, 32),
              num_classes: int = 10) -> NetworkSpec:
    """conv-BN-ReLU stacks per ``cfg`` entry (``"M"`` = 2x2 max-pool), avgpool, dense head."""
    layers = []
    c = input_shape[0]
    ci = pi = 0
    for v in cfg:
        if v == "M":
            pi += 1
            layers.append(passthrough("maxpool", f"pool{pi}", c, kernel=2, stride=2))
            continue
        ci += 1
        layers += [conv(f"conv{ci}", c, int(v)), passthrough("batchnorm", f"bn{ci}", int(v)),
                   passthrough("relu", f"relu{ci}", int(v))]
        c = int(v)
    layers += [passthrough("avgpool", "avgpool", c),
               LayerSpec("dense", "fc", c, num_classes, bias=True)]
    return NetworkSpec(name, input_shape, num_classes, layers)


def vgg16(num_classes: int = 10, input_shape=(3, 32, 32), width: float = 1.0) -> NetworkSpec:
    cfg = [v if v == "M" else max(1, int(round(v * width))) for v in VGG16_CFG]
    return plain_cnn("vgg16", cfg, input_shape, num_classes)


def toy4(num_classes: int = 4, input_shape=(3, 16, 16), channels=(16, 16, 32, 32)) -> NetworkSpec:
    """Four conv layers; 2x2 pools after the first and third."""
    a, b, c, d = channels
    return plain_cnn("toy4", [a, "M", b, c, "M", d], input_shape, num_classes)


def resnet(name: str, input_shape: Tuple[int, int, int], num_classes: int, stem: int,
           group_channels: Sequence[int], blocks_per_group: int) -> NetworkSpec:
    """CIFAR-style ResNet; the first block of every group uses a 1x1 projection shortcut."""
    layers = [conv("conv1", input_shape[0], stem), passthrough("batchnorm", "bn1", stem),
              passthrough("relu", "relu1", stem)]
    c = stem
    for gi, g in enumerate(group_channels, start=1):
        blocks = []
        for bi in range(1, blocks_per_group + 1):
            first = bi == 1
            stride = 2 if first and gi > 1 else 1
            blocks.append(BlockSpec(f"g{gi}b{bi}", c, g, g, stride=stride, projection=first))
            c = g
        layers.append(ResidualGroupSpec(f"group{gi}", g, blocks))
    layers += [passthrough("avgpool", "avgpool", c), LayerSpec("dense", "fc", c, num_classes, bias=True)]
    return NetworkSpec(name, input_shape, num_classes, layers)


def resnet20(num_classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    return resnet("resnet20", input_shape, num_classes, 16, (16, 32, 64), 3)


def toy_resnet(num_classes: int = 4, input_shape=(3, 16, 16)) -> NetworkSpec:
    return resnet("toy_resnet", input_shape, num_classes, 8, (8, 16), 2)


BUILTIN = {"toy4": toy4, "toy_resnet": toy_resnet, "vgg16": vgg16, "resnet20": resnet20}


def get_spec(name_or_path: str, num_classes=None, input_shape=None) -> NetworkSpec:
    """A built-in spec by name, or a JSON spec file."""
    if name_or_path in BUILTIN:
        kwargs = {}
        if num_classes is not None:
            kwargs["num_classes"] = num_classes
        if input_shape is not None:
            kwargs["input_shape"] = tuple(input_shape)
        return BUILTIN[name_or_path](**kwargs)
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"{name_or_path!r} is neither a built-in architecture "
                         f"({', '.join(BUILTIN)}) nor a spec file")
    return NetworkSpec.from_json(path.read_text())
