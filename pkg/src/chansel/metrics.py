"""Parameter/FLOPs accounting and error-rate evaluation.

FLOPs convention (per input image): a multiply-add is 2 FLOPs, so a conv
costs ``2*k*k*C_in*C_out*H_out*W_out`` and a dense layer ``2*in*out``;
inference-time BatchNorm costs 2 FLOPs per element and a residual addition
1 FLOP per element; ReLU and pooling are free. Bias additions are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .network import LayerSpec, Network, ResidualGroupSpec

FLOPS_CONVENTION = ("multiply-add = 2 FLOPs; conv = 2*k*k*Cin*Cout*Hout*Wout; dense = 2*in*out; "
                    "batchnorm = 2/element; residual add = 1/element; relu, pooling, bias = 0; "
                    "per single input image")


@dataclass
class CostProfile:
    params: Dict[str, int] = field(default_factory=dict)
    flops: Dict[str, int] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def reduction(self, baseline: "CostProfile") -> Dict[str, float]:
        """Fractional reductions ``1 - self/baseline`` for params and FLOPs."""
        out = {}
        if baseline.params:
            out["params"] = 1.0 - self.total_params / baseline.total_params
        if baseline.flops:
            out["flops"] = 1.0 - self.total_flops / baseline.total_flops
        return out

    def to_dict(self) -> dict:
        return {"total_params": self.total_params, "total_flops": self.total_flops,
                "params": dict(self.params), "flops": dict(self.flops)}


def count_params(network: Network) -> CostProfile:
    """Trainable weights and biases plus BN scale/shift; running stats excluded."""
    prof = CostProfile()
    for lname, d in network.weights.items():
        n = sum(t.size for k, t in d.items() if k in ("weight", "bias"))
        prof.params[lname] = int(n)
    return prof


def _conv_flops(k, cin, cout, h, w):
    return 2 * k * k * cin * cout * h * w


def count_flops(network: Network, input_shape: Optional[Tuple[int, int, int]] = None) -> CostProfile:
    spec = network.spec
    c, h, w = input_shape if input_shape is not None else spec.input_shape
    prof = CostProfile()
    fl = prof.flops

    for it in spec.layers:
        if isinstance(it, ResidualGroupSpec):
            for b in it.blocks:
                p = b.kernel // 2
                ho = (h + 2 * p - b.kernel) // b.stride + 1
                wo = (w + 2 * p - b.kernel) // b.stride + 1
                fl[f"{b.name}.conv1"] = _conv_flops(b.kernel, b.in_channels, b.mid_channels, ho, wo)
                fl[f"{b.name}.bn1"] = 2 * b.mid_channels * ho * wo
                fl[f"{b.name}.conv2"] = _conv_flops(b.kernel, b.mid_channels, b.out_channels, ho, wo)
                fl[f"{b.name}.bn2"] = 2 * b.out_channels * ho * wo
                if b.projection:
                    fl[f"{b.name}.proj"] = _conv_flops(1, b.in_channels, b.out_channels, ho, wo)
                    fl[f"{b.name}.proj_bn"] = 2 * b.out_channels * ho * wo
                fl[f"{b.name}.add"] = b.out_channels * ho * wo
                c, h, w = b.out_channels, ho, wo
            continue
        assert isinstance(it, LayerSpec)
        if it.kind == "conv":
            h = (h + 2 * it.padding - it.kernel) // it.stride + 1
            w = (w + 2 * it.padding - it.kernel) // it.stride + 1
            fl[it.name] = _conv_flops(it.kernel, it.in_channels, it.out_channels, h, w)
            c = it.out_channels
        elif it.kind == "batchnorm":
            fl[it.name] = 2 * c * h * w
        elif it.kind == "maxpool":
            h = (h - it.kernel) // it.stride + 1
            w = (w - it.kernel) // it.stride + 1
        elif it.kind == "avgpool":
            h = w = 1
        elif it.kind == "dense":
            fl[it.name] = 2 * it.in_channels * it.out_channels
            c = it.out_channels
    return prof


def cost_profile(network: Network, input_shape=None) -> CostProfile:
    return CostProfile(count_params(network).params, count_flops(network, input_shape).flops)


def evaluate_error(model, x, y, batch_size: int = 256) -> float:
    """Top-1 error of ``model`` (Network or AugmentedNetwork) in eval mode."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(x, batch_size) != y))
