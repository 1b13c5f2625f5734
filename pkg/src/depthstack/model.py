"""Coarse (global) and fine (local) depth stacks built from a declarative spec."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size

LAYER_KINDS = ("conv", "maxpool", "fc", "relu", "dropout", "concat", "linear-output")
LEARNED_KINDS = ("conv", "fc", "linear-output")


class SpecError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    out_channels: int = 0
    rate: float = 0.0
    lr_mult: float = 1.0

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool"):
            if min(self.kernel) < 1:
                raise SpecError(f"{self.kind} kernel must be positive, got {self.kernel}")
            if self.stride < 1:
                raise SpecError(f"{self.kind} stride must be >= 1, got {self.stride}")
            if self.padding < 0:
                raise SpecError("padding must be non-negative")
        if self.kind == "maxpool" and self.kernel[0] != self.kernel[1]:
            raise SpecError("max-pooling windows must be square")
        if self.kind in ("conv", "fc") and self.out_channels < 1:
            raise SpecError(f"{self.kind} needs out_channels >= 1")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise SpecError(f"dropout rate must be in [0, 1), got {self.rate}")


def conv(out_channels: int, kernel: int, stride: int = 1, padding: int = 0, lr_mult: float = 1.0) -> LayerSpec:
    return LayerSpec("conv", (kernel, kernel), stride, padding, out_channels, lr_mult=lr_mult)


def pool(kernel: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", (kernel, kernel), stride or kernel)


def fc(out_features: int, lr_mult: float = 1.0) -> LayerSpec:
    return LayerSpec("fc", out_channels=out_features, lr_mult=lr_mult)


RELU = LayerSpec("relu")
CONCAT = LayerSpec("concat")


@dataclass
class NetworkSpec:
    """Input is ``input_height x input_width`` RGB; both stacks emit ``output_height x output_width``."""

    input_height: int
    input_width: int
    output_height: int
    output_width: int
    coarse: list[LayerSpec] = field(default_factory=list)
    fine: list[LayerSpec] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        raw = json.loads(text)
        raw["coarse"] = [LayerSpec(**l) for l in raw["coarse"]]
        raw["fine"] = [LayerSpec(**l) for l in raw["fine"]]
        return cls(**raw)

    def learned_layers(self, stack: str) -> list[tuple[str, LayerSpec]]:
        layers = self.coarse if stack == "coarse" else self.fine
        learned = [l for l in layers if l.kind in LEARNED_KINDS]
        return [(f"{stack}{k + 1}", l) for k, l in enumerate(learned)]

    def with_lr_mults(self, mults: dict[str, float]) -> "NetworkSpec":
        """Copy with learning-rate multipliers replaced by layer name (e.g. ``coarse6``)."""
        out = replace(self, coarse=[replace(l) for l in self.coarse], fine=[replace(l) for l in self.fine])
        for stack in ("coarse", "fine"):
            for name, layer in out.learned_layers(stack):
                if name in mults:
                    layer.lr_mult = float(mults[name])
        return out


@dataclass(frozen=True)
class ShapeTrace:
    coarse: list[tuple[str, tuple[int, int, int]]]
    fine: list[tuple[str, tuple[int, int, int]]]
    top_feature_map: tuple[int, int]


def derive_shapes(spec: NetworkSpec) -> ShapeTrace:
    """Shapes (C, H, W) after every layer of both stacks; raises SpecError on any violation."""
    h, w = spec.output_height, spec.output_width
    if spec.input_height < 1 or spec.input_width < 1 or h < 1 or w < 1:
        raise SpecError("input and output sizes must be positive")
    if (h, w) != (spec.input_height // 4, spec.input_width // 4):
        raise SpecError(f"output {h}x{w} is not 1/4 of input {spec.input_height}x{spec.input_width}")

    def walk(layers: Sequence[LayerSpec], stack: str):
        shape = (3, spec.input_height, spec.input_width)
        trace = []
        top = None
        for k, layer in enumerate(layers):
            c, hh, ww = shape
            if layer.kind == "conv":
                oh = conv_output_size(hh, layer.kernel[0], layer.stride, layer.padding)
                ow = conv_output_size(ww, layer.kernel[1], layer.stride, layer.padding)
                shape = (layer.out_channels, oh, ow)
            elif layer.kind == "maxpool":
                shape = (c, conv_output_size(hh, layer.kernel[0], layer.stride, 0),
                         conv_output_size(ww, layer.kernel[0], layer.stride, 0))
            elif layer.kind == "fc":
                if top is None:
                    top = (hh, ww)
                shape = (layer.out_channels, 1, 1)
            elif layer.kind == "linear-output":
                shape = (1, h, w)
            elif layer.kind == "concat":
                if stack != "fine":
                    raise SpecError("only the fine stack takes the coarse map")
                if (hh, ww) != (h, w):
                    raise SpecError(f"coarse map {h}x{w} cannot be concatenated with fine features {hh}x{ww}")
                shape = (c + 1, hh, ww)
            if shape[1] <= 0 or shape[2] <= 0:
                raise SpecError(f"{stack} layer {k} ({layer.kind}) derives non-positive size {shape}")
            trace.append((layer.kind, shape))
        return trace, top

    if not spec.coarse or spec.coarse[-1].kind != "linear-output":
        raise SpecError("the coarse stack must end in a linear-output layer")
    if not spec.fine or spec.fine[-1].kind != "conv" or spec.fine[-1].out_channels != 1:
        raise SpecError("the fine stack must end in a single-channel linear convolution")
    if sum(l.kind == "concat" for l in spec.fine) != 1:
        raise SpecError("the fine stack needs exactly one concat point")
    if any(l.kind in ("fc", "linear-output") for l in spec.fine):
        raise SpecError("the fine stack is convolutional only")
    coarse, top = walk(spec.coarse, "coarse")
    fine, _ = walk(spec.fine, "fine")
    if fine[-1][1] != (1, h, w):
        raise SpecError(f"fine output {fine[-1][1]} != (1, {h}, {w})")
    if top is None:
        raise SpecError("the coarse stack has no fully-connected layer")
    return ShapeTrace(coarse, fine, top)


def receptive_field(layers: Sequence[LayerSpec]) -> tuple[int, int]:
    """(size, jump) in input pixels of one output unit of a conv/pool stack."""
    size, jump = 1, 1
    for layer in layers:
        if layer.kind in ("conv", "maxpool"):
            size += (layer.kernel[0] - 1) * jump
            jump *= layer.stride
    return size, jump


# ---------------------------------------------------------------------------
# default specs
# ---------------------------------------------------------------------------

# Learning rates per learned layer at global scale 1.0.
PAPER_RATES = {
    **{f"coarse{k}": 0.001 for k in range(1, 6)},
    "coarse6": 0.1, "coarse7": 0.1,
    "fine1": 0.001, "fine2": 0.01, "fine3": 0.001,
}


def _coarse_layers(chans: Sequence[int], hidden: int, dropout: float, first: LayerSpec,
                   pool_kernel: int, pool_stride: int, rates=PAPER_RATES) -> list[LayerSpec]:
    c1, c2, c3, c4, c5 = chans
    p = lambda: pool(pool_kernel, pool_stride)  # noqa: E731
    return [
        replace(first, out_channels=c1, lr_mult=rates["coarse1"]), RELU, p(),
        conv(c2, 5, padding=2, lr_mult=rates["coarse2"]), RELU, p(),
        conv(c3, 3, padding=1, lr_mult=rates["coarse3"]), RELU,
        conv(c4, 3, padding=1, lr_mult=rates["coarse4"]), RELU,
        conv(c5, 3, padding=1, lr_mult=rates["coarse5"]), RELU, p(),
        fc(hidden, lr_mult=rates["coarse6"]), RELU, LayerSpec("dropout", rate=dropout),
        LayerSpec("linear-output", lr_mult=rates["coarse7"]),
    ]


def desk_spec(input_width: int = 76, input_height: int = 57, dropout: float = 0.5) -> NetworkSpec:
    """CPU-sized network: spatial dims ~4x and channels ~8x below full scale."""
    coarse = _coarse_layers((16, 32, 48, 48, 32), 512, dropout,
                            conv(1, 5, stride=2, padding=2), pool_kernel=2, pool_stride=2)
    fine = [
        conv(32, 5, stride=2, padding=2, lr_mult=PAPER_RATES["fine1"]), RELU, pool(2),
        CONCAT,
        conv(32, 5, padding=2, lr_mult=PAPER_RATES["fine2"]), RELU,
        conv(1, 5, padding=2, lr_mult=PAPER_RATES["fine3"]),
    ]
    spec = NetworkSpec(input_height, input_width, input_height // 4, input_width // 4, coarse, fine)
    derive_shapes(spec)
    return spec


def full_spec() -> NetworkSpec:
    """NYU-scale geometry: a 296x220 center crop of a 320x240 frame, output 74x55.

    Overlapping 3x3/stride-2 pooling gives the 8x6 top coarse feature map, and
    the fine stack's 9x9/2 conv + 3x3/2 pool + two 5x5 convs see 45x45 pixels.
    """
    coarse = _coarse_layers((96, 256, 384, 384, 256), 4096, 0.5,
                            conv(1, 11, stride=4, padding=4), pool_kernel=3, pool_stride=2)
    fine = [
        conv(63, 9, stride=2, padding=5, lr_mult=PAPER_RATES["fine1"]), RELU, pool(3, 2),
        CONCAT,
        conv(64, 5, padding=2, lr_mult=PAPER_RATES["fine2"]), RELU,
        conv(1, 5, padding=2, lr_mult=PAPER_RATES["fine3"]),
    ]
    spec = NetworkSpec(220, 296, 55, 74, coarse, fine)
    derive_shapes(spec)
    return spec


# ---------------------------------------------------------------------------
# runnable stacks
# ---------------------------------------------------------------------------

@dataclass
class Param:
    name: str
    weight: Tensor
    bias: Tensor
    lr_mult: float


class Stack:
    """Shared plumbing: parameters in declaration order and a layer walker."""

    kind = "stack"

    def __init__(self, spec: NetworkSpec, layers: list[LayerSpec], trace, dtype=np.float64):
        self.spec = spec
        self.layers = layers
        self.trace = trace
        self.dtype = np.dtype(dtype)
        self.params: list[Param] = []
        learned = iter(spec.learned_layers(self.kind))
        in_shape = (3, spec.input_height, spec.input_width)
        for layer, (_, out_shape) in zip(layers, trace):
            if layer.kind in LEARNED_KINDS:
                name, _ = next(learned)
                if layer.kind == "conv":
                    wshape = (layer.out_channels, in_shape[0]) + layer.kernel
                    nout = layer.out_channels
                elif layer.kind == "fc":
                    wshape = (layer.out_channels, int(np.prod(in_shape)))
                    nout = layer.out_channels
                else:
                    nout = spec.output_height * spec.output_width
                    wshape = (nout, int(np.prod(in_shape)))
                self.params.append(Param(name,
                                         Tensor(np.zeros(wshape, self.dtype), requires_grad=True, name=f"{name}.w"),
                                         Tensor(np.zeros(nout, self.dtype), requires_grad=True, name=f"{name}.b"),
                                         layer.lr_mult))
            in_shape = out_shape

    def tensors(self) -> list[Tensor]:
        out = []
        for p in self.params:
            out.extend([p.weight, p.bias])
        return out

    def multipliers(self) -> list[float]:
        out = []
        for p in self.params:
            out.extend([p.lr_mult, p.lr_mult])
        return out

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def init_random(self, rng: np.random.Generator, output_bias: float = 0.0) -> None:
        """He-normal weights for ReLU layers, a 0.1-scaled normal for the linear output, zero biases."""
        last = len(self.params) - 1
        for k, p in enumerate(self.params):
            fan_in = int(np.prod(p.weight.shape[1:]))
            std = np.sqrt(2.0 / fan_in) if k < last else 0.1 / np.sqrt(fan_in)
            p.weight.data[...] = rng.standard_normal(p.weight.shape) * std
            p.bias.data[...] = output_bias if k == last else 0.0

    def state(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        tensors = self.tensors()
        if len(arrays) != len(tensors):
            raise ad.ShapeError(f"expected {len(tensors)} arrays, got {len(arrays)}")
        for t, a in zip(tensors, arrays):
            if a.shape != t.shape:
                raise ad.ShapeError(f"{t.name}: shape {a.shape} != {t.shape}")
            t.data = np.array(a, dtype=self.dtype)

    def _check_input(self, rgb: Tensor) -> Tensor:
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        expect = (3, self.spec.input_height, self.spec.input_width)
        if rgb.data.ndim != 4 or rgb.shape[1:] != expect:
            raise ad.ShapeError(f"input shape {rgb.shape} does not match (N,) + {expect}")
        if rgb.dtype != self.dtype:
            rgb = Tensor(rgb.data.astype(self.dtype), requires_grad=rgb.requires_grad)
        return rgb

    def _run(self, x: Tensor, train: bool, rng, coarse_map: Tensor | None = None) -> Tensor:
        params = iter(self.params)
        for layer in self.layers:
            if layer.kind == "conv":
                p = next(params)
                x = ad.conv2d(x, p.weight, p.bias, layer.stride, layer.padding)
            elif layer.kind == "maxpool":
                x = ad.maxpool2d(x, layer.kernel[0], layer.stride)
            elif layer.kind == "fc":
                p = next(params)
                x = ad.fully_connected(x, p.weight, p.bias)
            elif layer.kind == "relu":
                x = ad.relu(x)
            elif layer.kind == "dropout":
                x = ad.dropout(x, layer.rate, rng, train)
            elif layer.kind == "concat":
                x = ad.concat([x, coarse_map], axis=1)
            elif layer.kind == "linear-output":
                p = next(params)
                x = ad.fully_connected(x, p.weight, p.bias)
                # row-major h x w grid
                x = ad.reshape(x, (x.shape[0], 1, self.spec.output_height, self.spec.output_width))
        return x


class CoarseNet(Stack):
    kind = "coarse"

    def __init__(self, spec: NetworkSpec, trace: ShapeTrace, dtype=np.float64):
        super().__init__(spec, spec.coarse, trace.coarse, dtype)

    def forward(self, rgb, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Log depth of shape (N, 1, h, w)."""
        return self._run(self._check_input(rgb), train, rng)

    def output_weight_templates(self) -> np.ndarray:
        """Output-layer weight vectors as (D, h, w) templates, descending by l2 norm."""
        w = self.params[-1].weight.data
        templates = w.T.reshape(-1, self.spec.output_height, self.spec.output_width)
        norms = np.sqrt((templates.astype(np.float64) ** 2).sum(axis=(1, 2)))
        order = np.argsort(-norms, kind="stable")
        return templates[order]


class FineNet(Stack):
    kind = "fine"

    def __init__(self, spec: NetworkSpec, trace: ShapeTrace, dtype=np.float64):
        super().__init__(spec, spec.fine, trace.fine, dtype)
        concat_at = next(k for k, l in enumerate(self.layers) if l.kind == "concat")
        self.coarse_channel = trace.fine[concat_at][1][0] - 1

    def forward(self, rgb, coarse_map) -> Tensor:
        """Refined log depth; ``coarse_map`` (N, 1, h, w) is treated as a constant input."""
        rgb = self._check_input(rgb)
        cmap = coarse_map.data if isinstance(coarse_map, Tensor) else np.asarray(coarse_map)
        expect = (rgb.shape[0], 1, self.spec.output_height, self.spec.output_width)
        if cmap.shape != expect:
            raise ad.ShapeError(f"coarse map shape {cmap.shape} != {expect}")
        # a fresh leaf without grad: nothing flows back into the coarse stack
        return self._run(rgb, False, None, Tensor(cmap.astype(self.dtype)))

    def set_pass_through(self, zero_rest: bool = True) -> None:
        """Route the coarse channel to the output unchanged.

        The first post-concat conv copies the coarse value into two channels as
        ``relu(x)`` and ``relu(-x)`` (centre tap +1 and -1); the output conv
        takes their difference, which equals ``x`` exactly.  With ``zero_rest``
        every other weight and bias after the concat is zeroed; otherwise only
        the two carrier channels are overwritten.
        """
        concat_at = next(k for k, l in enumerate(self.layers) if l.kind == "concat")
        learned_before = sum(l.kind in LEARNED_KINDS for l in self.layers[:concat_at])
        after = self.params[learned_before:]
        if len(after) != 2:
            raise ad.ShapeError("pass-through needs exactly two convolutions after the concat")
        mid, out = after
        if mid.weight.shape[0] < 2:
            raise ad.ShapeError("pass-through needs at least two channels after the concat")
        ch = self.coarse_channel
        kh, kw = mid.weight.shape[2:]
        oh, ow = out.weight.shape[2:]
        if zero_rest:
            for p in after:
                p.weight.data[...] = 0
                p.bias.data[...] = 0
        mid.weight.data[:2] = 0
        mid.bias.data[:2] = 0
        mid.weight.data[0, ch, kh // 2, kw // 2] = 1
        mid.weight.data[1, ch, kh // 2, kw // 2] = -1
        out.weight.data[:, :2] = 0
        out.weight.data[0, 0, oh // 2, ow // 2] = 1
        out.weight.data[0, 1, oh // 2, ow // 2] = -1
        if not zero_rest:
            out.bias.data[...] = 0


def build_networks(spec: NetworkSpec, dtype=np.float64) -> tuple[CoarseNet, FineNet]:
    """Validate ``spec`` and allocate zero-initialised coarse and fine stacks."""
    trace = derive_shapes(spec)
    return CoarseNet(spec, trace, dtype), FineNet(spec, trace, dtype)
