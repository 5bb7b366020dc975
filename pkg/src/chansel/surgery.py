"""Turn channel masks into a physically smaller network.

For every masked unit the producing kernels (and their BatchNorm entries) are
dropped and every consumer is slimmed by the same input channels. Running
statistics of kept channels are copied untouched, so in eval mode the pruned
network reproduces the masked augmented network exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Union

import numpy as np

from .network import (AugmentedNetwork, LayerSpec, Network, ResidualGroupSpec, WeightStore,
                      weight_violations)
from .tensor import Tensor


class SurgeryError(ValueError):
    pass


@dataclass
class MaskPlan:
    """Unit name -> boolean keep-vector."""

    keep: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.keep = {k: np.asarray(v).astype(bool) for k, v in self.keep.items()}

    @classmethod
    def from_augmented(cls, aug: AugmentedNetwork) -> "MaskPlan":
        """Plan from the floor-adjusted masks of every pruning layer."""
        return cls({name: layer.effective_mask() > 0 for name, layer in aug.layers.items()})

    @classmethod
    def from_site_masks(cls, network: Network, site_masks: Mapping[str, np.ndarray]) -> "MaskPlan":
        """Group per-site masks into units; block outputs of one group must agree."""
        sites = network.sites()
        keep: Dict[str, np.ndarray] = {}
        for site, mask in site_masks.items():
            if site not in sites:
                raise SurgeryError(f"unknown pruning site {site!r}")
            unit = sites[site].unit
            mask = np.asarray(mask).astype(bool)
            if unit in keep and not np.array_equal(keep[unit], mask):
                raise SurgeryError(f"inconsistent masks within group {unit}: site {site} differs")
            keep[unit] = mask
        return cls(keep)

    def is_identity(self) -> bool:
        return all(v.all() for v in self.keep.values())


@dataclass
class SurgeryReport:
    units: Dict[str, Dict[str, int]] = field(default_factory=dict)
    reshaped: List[str] = field(default_factory=list)
    consumers: Dict[str, List[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"units": self.units, "reshaped": sorted(set(self.reshaped)),
                "consumers": self.consumers}


class _Editor:
    """Mutable copies of spec and weights plus bookkeeping."""

    def __init__(self, network: Network):
        self.spec = copy.deepcopy(network.spec)
        self.w = {ln: {k: t.data.copy() for k, t in d.items()} for ln, d in network.weights.items()}
        self.grad_flags = {(ln, k): t.requires_grad for ln, d in network.weights.items()
                           for k, t in d.items()}
        self.report = SurgeryReport()

    def slice_out(self, lname, idx):
        d = self.w[lname]
        for k in d:
            d[k] = d[k][idx].copy()
        self.report.reshaped.append(lname)

    def slice_in(self, lname, idx):
        self.w[lname]["weight"] = self.w[lname]["weight"][:, idx].copy()
        self.report.reshaped.append(lname)

    def to_network(self) -> Network:
        store = WeightStore({ln: {k: Tensor(a, requires_grad=self.grad_flags[(ln, k)], name=f"{ln}.{k}")
                                  for k, a in d.items()} for ln, d in self.w.items()})
        return Network(self.spec, store)


def _slice_consumer(ed: _Editor, start: int, idx: np.ndarray, unit: str) -> None:
    """Slim whatever consumes the output of item ``start`` (pass-through layers updated)."""
    n = len(idx)
    consumers = ed.report.consumers.setdefault(unit, [])
    for it in ed.spec.layers[start + 1:]:
        if isinstance(it, ResidualGroupSpec):
            b = it.blocks[0]
            b.in_channels = n
            ed.slice_in(f"{b.name}.conv1", idx)
            ed.slice_in(f"{b.name}.proj", idx)
            consumers += [f"{b.name}.conv1", f"{b.name}.proj"]
            return
        if it.kind in ("relu", "maxpool", "avgpool"):
            it.in_channels = it.out_channels = n
            continue
        if it.kind in ("conv", "dense"):
            it.in_channels = n
            ed.slice_in(it.name, idx)
            consumers.append(it.name)
            return
        raise SurgeryError(f"unit {unit}: unexpected {it.kind} layer {it.name} before the consumer")
    raise SurgeryError(f"unit {unit}: no consumer found")


def _locate(spec):
    loc = {}
    for i, it in enumerate(spec.layers):
        if isinstance(it, ResidualGroupSpec):
            loc[it.name] = ("between", i, None)
            for j, b in enumerate(it.blocks):
                loc[f"{b.name}.conv1"] = ("within", i, j)
        elif it.kind == "conv":
            loc[it.name] = ("conv", i, None)
    return loc


def _channels(spec, kind, i, j):
    it = spec.layers[i]
    if kind == "conv":
        return it.out_channels
    if kind == "within":
        return it.blocks[j].mid_channels
    return it.out_channels


def apply_mask_surgery(network: Network, plan: MaskPlan):
    """Return ``(pruned_network, SurgeryReport)``; ``network`` is not modified."""
    if isinstance(network, AugmentedNetwork):
        network = network.network
    ed = _Editor(network)
    loc = _locate(ed.spec)
    for unit, keep in plan.keep.items():
        if unit not in loc:
            raise SurgeryError(f"plan names {unit!r}, which is not a prunable unit")
        kind, i, j = loc[unit]
        expected = _channels(ed.spec, kind, i, j)
        if keep.shape != (expected,):
            raise SurgeryError(f"unit {unit}: keep-vector of length {keep.size}, layer has {expected} channels")
        if not keep.any():
            raise SurgeryError(f"unit {unit}: plan would remove every channel")

    for unit, keep in plan.keep.items():
        kind, i, j = loc[unit]
        idx = np.flatnonzero(keep)
        k = len(idx)
        ed.report.units[unit] = {"kept": k, "removed": int(keep.size - k)}
        layers = ed.spec.layers
        if kind == "conv":
            producer = layers[i]
            producer.out_channels = k
            ed.slice_out(producer.name, idx)
            nxt = i + 1
            while nxt < len(layers) and isinstance(layers[nxt], LayerSpec) \
                    and layers[nxt].kind in ("batchnorm", "relu"):
                layers[nxt].in_channels = layers[nxt].out_channels = k
                if layers[nxt].kind == "batchnorm":
                    ed.slice_out(layers[nxt].name, idx)
                nxt += 1
            _slice_consumer(ed, nxt - 1, idx, unit)
        elif kind == "within":
            b = layers[i].blocks[j]
            b.mid_channels = k
            ed.slice_out(f"{b.name}.conv1", idx)
            ed.slice_out(f"{b.name}.bn1", idx)
            ed.slice_in(f"{b.name}.conv2", idx)
            ed.report.consumers[unit] = [f"{b.name}.conv2"]
        else:
            group = layers[i]
            group.out_channels = k
            consumers = ed.report.consumers.setdefault(unit, [])
            for bj, b in enumerate(group.blocks):
                b.out_channels = k
                ed.slice_out(f"{b.name}.conv2", idx)
                ed.slice_out(f"{b.name}.bn2", idx)
                if b.projection:
                    ed.slice_out(f"{b.name}.proj", idx)
                    ed.slice_out(f"{b.name}.proj_bn", idx)
                if bj > 0:
                    b.in_channels = k
                    ed.slice_in(f"{b.name}.conv1", idx)
                    consumers.append(f"{b.name}.conv1")
                    if b.projection:
                        ed.slice_in(f"{b.name}.proj", idx)
                        consumers.append(f"{b.name}.proj")
            _slice_consumer(ed, i, idx, unit)

    pruned = ed.to_network()
    pruned.training = network.training
    return pruned, ed.report


def residual_group_surgery(network: Network, group: str, keep):
    """Apply one between-block keep-vector to every block of ``group``."""
    spec = network.network.spec if isinstance(network, AugmentedNetwork) else network.spec
    if not any(isinstance(it, ResidualGroupSpec) and it.name == group for it in spec.layers):
        raise SurgeryError(f"no residual group named {group!r}")
    return apply_mask_surgery(network, MaskPlan({group: keep}))


def validate(model: Union[Network, AugmentedNetwork]) -> List[str]:
    """Return a list of structural violations; an empty list means OK."""
    if isinstance(model, AugmentedNetwork):
        net = model.network
        problems = validate(net)
        sites = net.sites()
        for name, layer in model.layers.items():
            for s in layer.sites:
                if s not in sites:
                    problems.append(f"pruning layer {name}: orphan site {s!r}")
                elif sites[s].channels != layer.channels:
                    problems.append(f"pruning layer {name}: {layer.channels} weights for site {s} "
                                    f"with {sites[s].channels} channels")
        return problems
    problems = model.spec.violations()
    problems += weight_violations(model.spec, model.weights)
    return problems

