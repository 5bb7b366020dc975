"""Declarative architectures, weight storage and runnable networks.

A :class:`NetworkSpec` is an ordered list of plain :class:`LayerSpec` entries
and :class:`ResidualGroupSpec` groups. :func:`build` turns a spec into a
:class:`Network`; :func:`augment` attaches pruning layers at every prunable
site and returns an :class:`AugmentedNetwork`.

Pruning sites
-------------
* plain conv ``c``: after the run of BatchNorm/ReLU that follows ``c``
  (site name ``c``);
* within-block: after BN+ReLU of a block's first conv (``<block>.conv1``);
* between-block: after each block's output ReLU (``<block>.out``); all sites
  of one group share a single pruning layer named after the group.
"""

from __future__ import annotations

import contextlib
import copy
import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

if TYPE_CHECKING:
    from .pruning import PruningLayer

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "avgpool", "dense")
RESIDUAL_MODES = ("within", "between", "within+between")


class SpecError(ValueError):
    """Raised when a network spec is inconsistent."""


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"layer {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class BlockSpec:
    """Basic residual block: conv-BN-ReLU, conv-BN, shortcut add, ReLU."""

    name: str
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    projection: bool = False
    kernel: int = 3


@dataclass
class ResidualGroupSpec:
    name: str
    out_channels: int
    blocks: List[BlockSpec]

    @property
    def first_uses_projection(self) -> bool:
        return bool(self.blocks) and self.blocks[0].projection


Item = Union[LayerSpec, ResidualGroupSpec]


def conv(name, cin, cout, kernel=3, stride=1, padding=None, bias=False) -> LayerSpec:
    return LayerSpec("conv", name, cin, cout, kernel, stride,
                     kernel // 2 if padding is None else padding, bias)


def passthrough(kind, name, channels, kernel=1, stride=1) -> LayerSpec:
    return LayerSpec(kind, name, channels, channels, kernel, stride)


@dataclass
class NetworkSpec:
    name: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    layers: List[Item] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    # ---- structured text

    def to_dict(self) -> dict:
        items = []
        for it in self.layers:
            if isinstance(it, ResidualGroupSpec):
                items.append({"group": it.name, "out_channels": it.out_channels,
                              "blocks": [asdict(b) for b in it.blocks]})
            else:
                items.append(asdict(it))
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": items}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        layers: List[Item] = []
        try:
            for it in d["layers"]:
                if "group" in it:
                    layers.append(ResidualGroupSpec(it["group"], int(it["out_channels"]),
                                                    [BlockSpec(**b) for b in it["blocks"]]))
                else:
                    layers.append(LayerSpec(**it))
            return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), layers)
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    # ---- validation

    def violations(self) -> List[str]:
        return _walk_spec(self)[1]

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise SpecError(problems[0])

    def shapes(self) -> List[Tuple[str, tuple, tuple]]:
        """``(name, in_shape, out_shape)`` for every top-level item."""
        self.validate()
        return _walk_spec(self)[0]

    def groups(self) -> List["ResidualGroupSpec"]:
        return [it for it in self.layers if isinstance(it, ResidualGroupSpec)]

    def layer_names(self) -> List[str]:
        names = []
        for it in self.layers:
            if isinstance(it, ResidualGroupSpec):
                names.append(it.name)
                for b in it.blocks:
                    names.append(b.name)
                    names.extend(f"{b.name}.{s}" for s in _block_parts(b))
            else:
                names.append(it.name)
        return names


def _block_parts(b: BlockSpec) -> List[str]:
    parts = ["conv1", "bn1", "conv2", "bn2"]
    if b.projection:
        parts += ["proj", "proj_bn"]
    return parts


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _walk_spec(spec: NetworkSpec):
    """Shape propagation that keeps going after an error, collecting violations."""
    problems: List[str] = []
    shapes = []
    names = spec.layer_names()
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        problems.append(f"duplicate layer names: {', '.join(dupes)}")

    state = tuple(spec.input_shape)
    prev_name = "input"
    prev_kind = None

    for it in spec.layers:
        before = state
        if isinstance(it, ResidualGroupSpec):
            if len(state) != 3:
                problems.append(f"group {it.name}: needs feature maps, got flat features from {prev_name}")
                state = (it.out_channels, 1, 1)
            if not it.blocks:
                problems.append(f"group {it.name}: has no blocks")
            for bi, b in enumerate(it.blocks):
                if b.in_channels != state[0]:
                    problems.append(f"block {b.name}: expects {b.in_channels} input channels but "
                                    f"{prev_name} produces {state[0]}")
                if b.out_channels != it.out_channels:
                    problems.append(f"block {b.name}: has {b.out_channels} output channels, "
                                    f"group {it.name} requires {it.out_channels}")
                if bi == 0 and not b.projection:
                    problems.append(f"group {it.name}: first block {b.name} must use a 1x1 projection shortcut")
                if not b.projection and (b.in_channels != b.out_channels or b.stride != 1):
                    problems.append(f"block {b.name}: identity shortcut needs matching channels and stride 1")
                _, h, w = state
                p = b.kernel // 2
                if b.kernel > h + 2 * p or b.kernel > w + 2 * p:
                    problems.append(f"block {b.name}: kernel {b.kernel} larger than input {h}x{w}")
                state = (b.out_channels, _out_size(h, b.kernel, b.stride, p),
                         _out_size(w, b.kernel, b.stride, p))
                prev_name = b.name
            prev_kind = "group"
            shapes.append((it.name, before, state))
            continue

        kind = it.kind
        cur = state[0]
        if it.in_channels != cur:
            problems.append(f"layer {it.name}: expects {it.in_channels} input channels but "
                            f"{prev_name} produces {cur}")
        if kind in ("batchnorm", "relu", "maxpool", "avgpool") and it.in_channels != it.out_channels:
            problems.append(f"layer {it.name}: {kind} must keep channel count "
                            f"({it.in_channels} != {it.out_channels})")
        if kind == "batchnorm" and prev_kind != "conv":
            problems.append(f"layer {it.name}: batchnorm must directly follow a conv layer")
        if kind in ("conv", "batchnorm", "maxpool", "avgpool") and len(state) != 3:
            problems.append(f"layer {it.name}: {kind} needs feature maps, got flat features")
            state = (cur, 1, 1)
        if kind == "conv":
            _, h, w = state
            if it.kernel > h + 2 * it.padding or it.kernel > w + 2 * it.padding:
                problems.append(f"layer {it.name}: kernel {it.kernel} larger than padded input {h}x{w}")
            state = (it.out_channels, max(_out_size(h, it.kernel, it.stride, it.padding), 1),
                     max(_out_size(w, it.kernel, it.stride, it.padding), 1))
        elif kind == "maxpool":
            _, h, w = state
            if it.kernel > h or it.kernel > w:
                problems.append(f"layer {it.name}: pool window {it.kernel} larger than input {h}x{w}")
            state = (it.out_channels, max(_out_size(h, it.kernel, it.stride, 0), 1),
                     max(_out_size(w, it.kernel, it.stride, 0), 1))
        elif kind == "avgpool":
            state = (it.out_channels,)
        elif kind == "dense":
            if len(state) != 1:
                problems.append(f"layer {it.name}: dense needs flat features; add an avgpool before it")
            state = (it.out_channels,)
        else:
            state = (it.out_channels,) + tuple(state[1:])
        shapes.append((it.name, before, state))
        prev_name, prev_kind = it.name, kind

    last = spec.layers[-1] if spec.layers else None
    if not (isinstance(last, LayerSpec) and last.kind == "dense"):
        problems.append("network must end with a dense classification head")
    elif last.out_channels != spec.num_classes:
        problems.append(f"classifier {last.name} has {last.out_channels} outputs for "
                        f"{spec.num_classes} classes")
    return shapes, problems


# ---------------------------------------------------------------- weights


class WeightStore:
    """Layer name -> {"weight", "bias", "running_mean", "running_var"} tensors.

    Trainable entries have ``requires_grad=True``; running statistics do not.
    """

    def __init__(self, layers: Optional[Dict[str, Dict[str, Tensor]]] = None):
        self.layers: Dict[str, Dict[str, Tensor]] = layers if layers is not None else {}

    def __getitem__(self, name: str) -> Dict[str, Tensor]:
        return self.layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def items(self):
        return self.layers.items()

    def entries(self) -> Iterator[Tuple[str, str, Tensor]]:
        for lname, d in self.layers.items():
            for key, t in d.items():
                yield lname, key, t

    def parameters(self) -> List[Tensor]:
        return [t for _, _, t in self.entries() if t.requires_grad]

    def copy(self) -> "WeightStore":
        return WeightStore({ln: {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
                                 for k, t in d.items()} for ln, d in self.layers.items()})

    def equal(self, other: "WeightStore") -> bool:
        mine, theirs = list(self.entries()), list(other.entries())
        if [(a, b) for a, b, _ in mine] != [(a, b) for a, b, _ in theirs]:
            return False
        return all(np.array_equal(x.data, y.data) for (_, _, x), (_, _, y) in zip(mine, theirs))


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


def _buffer(data, name):
    return Tensor(data, requires_grad=False, name=name)


def _init_conv(store, name, cin, cout, k, bias, rng):
    std = np.sqrt(2.0 / (cin * k * k))
    d = {"weight": _param(rng.normal(0.0, std, size=(cout, cin, k, k)), f"{name}.weight")}
    if bias:
        d["bias"] = _param(np.zeros(cout), f"{name}.bias")
    store[name] = d


def _init_bn(store, name, c):
    store[name] = {"weight": _param(np.ones(c), f"{name}.weight"),
                   "bias": _param(np.zeros(c), f"{name}.bias"),
                   "running_mean": _buffer(np.zeros(c), f"{name}.running_mean"),
                   "running_var": _buffer(np.ones(c), f"{name}.running_var")}


def init_weights(spec: NetworkSpec, seed: int = 0) -> WeightStore:
    """He-normal conv/dense kernels, zero biases, identity BN; draws in declaration order."""
    rng = np.random.default_rng(seed)
    store: Dict[str, Dict[str, Tensor]] = {}
    for it in spec.layers:
        if isinstance(it, ResidualGroupSpec):
            for b in it.blocks:
                _init_conv(store, f"{b.name}.conv1", b.in_channels, b.mid_channels, b.kernel, False, rng)
                _init_bn(store, f"{b.name}.bn1", b.mid_channels)
                _init_conv(store, f"{b.name}.conv2", b.mid_channels, b.out_channels, b.kernel, False, rng)
                _init_bn(store, f"{b.name}.bn2", b.out_channels)
                if b.projection:
                    _init_conv(store, f"{b.name}.proj", b.in_channels, b.out_channels, 1, False, rng)
                    _init_bn(store, f"{b.name}.proj_bn", b.out_channels)
        elif it.kind == "conv":
            _init_conv(store, it.name, it.in_channels, it.out_channels, it.kernel, it.bias, rng)
        elif it.kind == "batchnorm":
            _init_bn(store, it.name, it.out_channels)
        elif it.kind == "dense":
            std = np.sqrt(2.0 / it.in_channels)
            d = {"weight": _param(rng.normal(0.0, std, size=(it.out_channels, it.in_channels)),
                                  f"{it.name}.weight")}
            if it.bias:
                d["bias"] = _param(np.zeros(it.out_channels), f"{it.name}.bias")
            store[it.name] = d
    return WeightStore(store)


def expected_weight_shapes(spec: NetworkSpec) -> Dict[str, Dict[str, tuple]]:
    out: Dict[str, Dict[str, tuple]] = {}

    def conv_shapes(name, cin, cout, k, bias):
        out[name] = {"weight": (cout, cin, k, k)}
        if bias:
            out[name]["bias"] = (cout,)

    def bn_shapes(name, c):
        out[name] = {k: (c,) for k in ("weight", "bias", "running_mean", "running_var")}

    for it in spec.layers:
        if isinstance(it, ResidualGroupSpec):
            for b in it.blocks:
                conv_shapes(f"{b.name}.conv1", b.in_channels, b.mid_channels, b.kernel, False)
                bn_shapes(f"{b.name}.bn1", b.mid_channels)
                conv_shapes(f"{b.name}.conv2", b.mid_channels, b.out_channels, b.kernel, False)
                bn_shapes(f"{b.name}.bn2", b.out_channels)
                if b.projection:
                    conv_shapes(f"{b.name}.proj", b.in_channels, b.out_channels, 1, False)
                    bn_shapes(f"{b.name}.proj_bn", b.out_channels)
        elif it.kind == "conv":
            conv_shapes(it.name, it.in_channels, it.out_channels, it.kernel, it.bias)
        elif it.kind == "batchnorm":
            bn_shapes(it.name, it.out_channels)
        elif it.kind == "dense":
            out[it.name] = {"weight": (it.out_channels, it.in_channels)}
            if it.bias:
                out[it.name]["bias"] = (it.out_channels,)
    return out


def weight_violations(spec: NetworkSpec, weights: WeightStore) -> List[str]:
    problems = []
    expected = expected_weight_shapes(spec)
    for lname, shapes in expected.items():
        if lname not in weights:
            problems.append(f"layer {lname}: missing weights")
            continue
        for key, shape in shapes.items():
            got = weights[lname].get(key)
            if got is None:
                problems.append(f"layer {lname}: missing {key}")
            elif got.shape != shape:
                problems.append(f"layer {lname}: {key} has shape {got.shape}, spec implies {shape}")
    for lname in weights.layers:
        if lname not in expected:
            problems.append(f"layer {lname}: weights without a matching spec entry")
    return problems


# ---------------------------------------------------------------- runnable network


@dataclass(frozen=True)
class Site:
    name: str
    unit: str
    channels: int


@dataclass(frozen=True)
class PrunableUnit:
    """A group of sites governed by one pruning layer.

    ``kind`` is ``conv`` (plain conv), ``within`` (first conv of a block) or
    ``between`` (all block outputs of a residual group).
    """

    name: str
    kind: str
    channels: int
    sites: Tuple[str, ...]


class Network:
    def __init__(self, spec: NetworkSpec, weights: WeightStore):
        spec.validate()
        problems = weight_violations(spec, weights)
        if problems:
            raise SpecError(problems[0])
        self.spec = spec
        self.weights = weights
        self.training = True
        self._site_after = self._plain_site_positions()

    def _plain_site_positions(self) -> Dict[int, str]:
        layers = self.spec.layers
        out = {}
        for i, it in enumerate(layers):
            if isinstance(it, LayerSpec) and it.kind == "conv":
                j = i
                while (j + 1 < len(layers) and isinstance(layers[j + 1], LayerSpec)
                       and layers[j + 1].kind in ("batchnorm", "relu")):
                    j += 1
                out[j] = it.name
        return out

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def copy(self) -> "Network":
        net = Network(copy.deepcopy(self.spec), self.weights.copy())
        net.training = self.training
        return net

    def parameters(self) -> List[Tensor]:
        return self.weights.parameters()

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily mark every weight as not requiring grad."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield
        finally:
            for p in params:
                p.requires_grad = True

    def units(self, mode: str = "within+between") -> List[PrunableUnit]:
        """Prunable units in network order for the given residual mode."""
        if mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {mode!r}; choose from {RESIDUAL_MODES}")
        units = []
        for it in self.spec.layers:
            if isinstance(it, ResidualGroupSpec):
                if mode in ("within", "within+between"):
                    for b in it.blocks:
                        n = f"{b.name}.conv1"
                        units.append(PrunableUnit(n, "within", b.mid_channels, (n,)))
                if mode in ("between", "within+between"):
                    units.append(PrunableUnit(it.name, "between", it.out_channels,
                                              tuple(f"{b.name}.out" for b in it.blocks)))
            elif it.kind == "conv":
                units.append(PrunableUnit(it.name, "conv", it.out_channels, (it.name,)))
        return units

    def sites(self) -> Dict[str, Site]:
        return {s: Site(s, u.name, u.channels) for u in self.units("within+between") for s in u.sites}

    # ---- forward

    def _bn(self, name, h, update_stats):
        p = self.weights[name]
        return T.batchnorm2d(h, p["weight"], p["bias"], p["running_mean"].data,
                             p["running_var"].data, self.training, update_stats)

    def _conv(self, name, h, stride, padding):
        p = self.weights[name]
        return T.conv2d(h, p["weight"], p.get("bias"), stride=stride, padding=padding)

    @staticmethod
    def _scale(h, scales, site):
        if scales is not None and site in scales:
            return T.channel_scale(h, scales[site])
        return h

    def _block(self, b: BlockSpec, x, scales, update_stats):
        pad = b.kernel // 2
        h = self._conv(f"{b.name}.conv1", x, b.stride, pad)
        h = T.relu(self._bn(f"{b.name}.bn1", h, update_stats))
        h = self._scale(h, scales, f"{b.name}.conv1")
        h = self._bn(f"{b.name}.bn2", self._conv(f"{b.name}.conv2", h, 1, pad), update_stats)
        if b.projection:
            sc = self._bn(f"{b.name}.proj_bn", self._conv(f"{b.name}.proj", x, b.stride, 0), update_stats)
        else:
            sc = x
        h = T.relu(T.add(h, sc))
        return self._scale(h, scales, f"{b.name}.out")

    def forward(self, x, scales: Optional[Mapping[str, Tensor]] = None,
                update_stats: bool = True) -> Tensor:
        """Logits for ``x``; ``scales`` maps site names to per-channel weights."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1:] != self.spec.input_shape:
            raise T.ShapeError(f"input shape {h.shape[1:]} does not match spec {self.spec.input_shape}")
        for i, it in enumerate(self.spec.layers):
            if isinstance(it, ResidualGroupSpec):
                for b in it.blocks:
                    h = self._block(b, h, scales, update_stats)
                continue
            kind = it.kind
            if kind == "conv":
                h = self._conv(it.name, h, it.stride, it.padding)
            elif kind == "batchnorm":
                h = self._bn(it.name, h, update_stats)
            elif kind == "relu":
                h = T.relu(h)
            elif kind == "maxpool":
                h = T.maxpool2d(h, it.kernel, it.stride)
            elif kind == "avgpool":
                h = T.global_avgpool(h)
            elif kind == "dense":
                p = self.weights[it.name]
                h = T.dense(h, p["weight"], p.get("bias"))
            site = self._site_after.get(i)
            if site is not None:
                h = self._scale(h, scales, site)
        return h

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Top-1 class indices in eval mode (the mode is restored afterwards)."""
        was = self.training
        self.eval()
        try:
            with self.frozen():
                out = [self.forward(x[i:i + batch_size]).data.argmax(axis=1)
                       for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    """Validate ``spec`` and instantiate it with seeded weights."""
    spec.validate()
    return Network(spec, init_weights(spec, seed))


# ---------------------------------------------------------------- augmentation


class AugmentedNetwork:
    """A network plus one pruning layer per prunable unit.

    Between-block units register the *same* :class:`PruningLayer` object at
    every block output of the group, so its ``P`` tensor is shared.
    """

    def __init__(self, network: Network, layers: Dict[str, "PruningLayer"], mode: str):
        self.network = network
        self.layers = layers
        self.mode = mode

    @property
    def site_layers(self) -> Dict[str, "PruningLayer"]:
        return {s: layer for layer in self.layers.values() for s in layer.sites}

    def units(self) -> List[PrunableUnit]:
        return [u for u in self.network.units(self.mode) if u.name in self.layers]

    def scales(self, use: str) -> Dict[str, Tensor]:
        if use == "real":
            per_layer = {n: l.P for n, l in self.layers.items()}
        elif use == "binary":
            per_layer = {n: Tensor(l.effective_mask()) for n, l in self.layers.items()}
        else:
            raise ValueError(f"use must be 'real' or 'binary', got {use!r}")
        return {s: per_layer[n] for n, l in self.layers.items() for s in l.sites}

    def forward(self, x, use: str = "binary", update_stats: bool = True) -> Tensor:
        return self.network.forward(x, self.scales(use), update_stats)

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        net = self.network
        was = net.training
        net.eval()
        try:
            with net.frozen():
                out = [self.forward(x[i:i + batch_size], "binary").data.argmax(axis=1)
                       for i in range(0, len(x), batch_size)]
        finally:
            net.train(was)
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def augment(network: Network, mode: str = "within+between", seed: int = 0) -> AugmentedNetwork:
    """Insert a pruning layer at every prunable unit; ``P ~ N(1, 0.01)``, ``B = 1``."""
    from .pruning import PruningLayer, init_pruning_weights

    rng = np.random.default_rng(seed)
    layers = {}
    for u in network.units(mode):
        layers[u.name] = PruningLayer(u.name, init_pruning_weights(u.channels, rng),
                                      sites=u.sites, kind=u.kind)
    return AugmentedNetwork(network, layers, mode)
