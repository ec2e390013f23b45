"""Micro encoder-refiner for boundary probability maps.

A small plain-conv encoder produces features at a pyramid of resolutions.
Refine blocks then fuse pairs or triples of those features: every input is
projected to a shared channel count when needed, upsampled to the finest
participating resolution, summed, and passed through a gated 3x3 convolution
whose scalar gate the optimizer can open or close per layer. A 1x1 head with
bias and sigmoid turns the finest fused feature into a probability map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, TopologyError
from .tensorcore import (
    Parameter,
    Tensor,
    add,
    bilinear_resize,
    conv2d,
    mul,
    relu,
    resize_array,
    sigmoid,
)


@dataclass(frozen=True)
class StageSpec:
    """One encoder stage: a stride-s 3x3 convolution with ReLU."""

    channels: int
    stride: int


@dataclass(frozen=True)
class RefineBlockSpec:
    """Wiring of one fusion block.

    ``input_slots`` lists (source id, resolution denominator) pairs, finest
    first; sources are encoder stages ("enc1"...) or earlier blocks by name.
    ``kind`` is "skip" (2 inputs spanning a 4x resolution gap) or "adjacent"
    (up to 3 inputs at neighboring resolutions). ``out_channels`` must equal
    the smallest input channel count.
    """

    name: str
    input_slots: tuple[tuple[str, int], ...]
    kind: str
    out_channels: int


@dataclass(frozen=True)
class NetworkTopology:
    in_channels: int
    encoder_stages: tuple[StageSpec, ...]
    refine_levels: tuple[tuple[RefineBlockSpec, ...], ...]

    def stage_scales(self) -> list[int]:
        scales = []
        denom = 1
        for st in self.encoder_stages:
            denom *= st.stride
            scales.append(denom)
        return scales

    def validate(self) -> dict[str, tuple[int, int]]:
        """Check wiring and return {source id: (channels, scale denominator)}.

        Raises TopologyError on dangling references, wrong channel counts, or
        connection patterns outside the skip/adjacent contracts.
        """
        if self.in_channels < 1:
            raise TopologyError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.encoder_stages:
            raise TopologyError("topology needs at least one encoder stage")
        known: dict[str, tuple[int, int]] = {}
        for i, (st, scale) in enumerate(zip(self.encoder_stages, self.stage_scales()), start=1):
            if st.channels < 1 or st.stride < 1:
                raise TopologyError(f"encoder stage {i} has invalid channels/stride {st}")
            known[f"enc{i}"] = (st.channels, scale)
        if not self.refine_levels or not self.refine_levels[-1]:
            raise TopologyError("topology needs at least one refine level with one block")
        for level in self.refine_levels:
            for spec in level:
                if spec.name in known:
                    raise TopologyError(f"duplicate block name {spec.name!r}")
                if not spec.input_slots:
                    raise TopologyError(f"block {spec.name!r} has no inputs")
                chans, scales = [], []
                for src, declared_scale in spec.input_slots:
                    if src not in known:
                        raise TopologyError(f"block {spec.name!r} references unknown source {src!r}")
                    ch, sc = known[src]
                    if sc != declared_scale:
                        raise TopologyError(
                            f"block {spec.name!r} declares source {src!r} at 1/{declared_scale}, "
                            f"but it lives at 1/{sc}")
                    chans.append(ch)
                    scales.append(sc)
                if spec.out_channels != min(chans):
                    raise TopologyError(
                        f"block {spec.name!r} out_channels {spec.out_channels} must equal the "
                        f"smallest input channel count {min(chans)}")
                if list(scales) != sorted(scales):
                    raise TopologyError(f"block {spec.name!r} inputs must be listed finest first")
                if spec.kind == "skip":
                    if len(spec.input_slots) != 2:
                        raise TopologyError(f"skip block {spec.name!r} needs exactly 2 inputs")
                    if max(scales) != 4 * min(scales):
                        raise TopologyError(
                            f"skip block {spec.name!r} needs a 4x resolution gap, got {scales}")
                elif spec.kind == "adjacent":
                    if not 1 <= len(spec.input_slots) <= 3:
                        raise TopologyError(f"adjacent block {spec.name!r} takes 1 to 3 inputs")
                    ordered = sorted(scales)
                    if any(b > 2 * a for a, b in zip(ordered, ordered[1:])):
                        raise TopologyError(
                            f"adjacent block {spec.name!r} inputs must sit at neighboring "
                            f"resolutions (each step at most 2x), got {scales}")
                else:
                    raise TopologyError(f"block {spec.name!r} has unknown kind {spec.kind!r}")
                known[spec.name] = (spec.out_channels, min(scales))
        final = self.refine_levels[-1]
        head_src = min(final, key=lambda s: known[s.name][1])
        if known[head_src.name][1] != 1:
            raise TopologyError("the final refine level must produce a full-resolution output "
                                "for the prediction head")
        return known

    def head_source(self) -> str:
        known = self.validate()
        final = self.refine_levels[-1]
        return min(final, key=lambda s: known[s.name][1]).name


def default_topology(in_channels: int = 1) -> NetworkTopology:
    """Four encoder stages at 1, 1/2, 1/4, 1/8 resolution; two skip blocks
    and one adjacent block in the first refine level, fused by a single
    adjacent block in the second."""
    return NetworkTopology(
        in_channels=in_channels,
        encoder_stages=(StageSpec(8, 1), StageSpec(16, 2), StageSpec(32, 2), StageSpec(64, 2)),
        refine_levels=(
            (
                RefineBlockSpec("r1a", (("enc1", 1), ("enc3", 4)), "skip", 8),
                RefineBlockSpec("r1b", (("enc2", 2), ("enc4", 8)), "skip", 16),
                RefineBlockSpec("r1c", (("enc2", 2), ("enc3", 4), ("enc4", 8)), "adjacent", 16),
            ),
            (
                RefineBlockSpec("r2a", (("r1a", 1), ("r1b", 2), ("r1c", 2)), "adjacent", 8),
            ),
        ),
    )


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.scales:
            raise ContractError("scale set must not be empty")
        if any(s <= 0.0 for s in self.scales):
            raise ContractError(f"scales must be positive, got {self.scales}")


class WeightConvLayer:
    """3x3 convolution + ReLU, multiplied by sigmoid(alpha) with one scalar
    alpha for the whole layer."""

    __slots__ = ("kernel", "alpha")

    def __init__(self, kernel: Parameter, alpha: Parameter):
        self.kernel = kernel
        self.alpha = alpha

    def forward(self, x: Tensor) -> Tensor:
        return mul(relu(conv2d(x, self.kernel, stride=1, padding=1)), sigmoid(self.alpha))


class RefineBlock:
    """Runtime form of a RefineBlockSpec: optional 1x1 projections per input,
    then upsample-to-finest, sum, and one weight-conv layer."""

    __slots__ = ("spec", "projections", "wconv")

    def __init__(self, spec: RefineBlockSpec, projections: dict, wconv: WeightConvLayer):
        self.spec = spec
        self.projections = projections
        self.wconv = wconv

    def forward(self, inputs: list[Tensor]) -> Tensor:
        if not inputs:
            raise ContractError(f"refine block {self.spec.name!r} got no inputs")
        target_h, target_w = inputs[0].shape[2], inputs[0].shape[3]
        total = None
        for (src, _), x in zip(self.spec.input_slots, inputs):
            proj = self.projections.get(src)
            if proj is not None:
                x = conv2d(x, proj)  # 1x1, projecting before the (cheaper) upsample
            if x.shape[2] != target_h or x.shape[3] != target_w:
                x = bilinear_resize(x, target_h, target_w)
            total = x if total is None else add(total, x)
        return self.wconv.forward(total)


class RefineNet:
    """Built network: encoder kernels, refine blocks, and the 1x1 head."""

    def __init__(self, topology: NetworkTopology, encoder_kernels, blocks, head_kernel, head_bias):
        self.topology = topology
        self.encoder_kernels = encoder_kernels
        self.blocks = blocks
        self.head_kernel = head_kernel
        self.head_bias = head_bias
        self._head_src = topology.head_source()

    def params(self) -> list[Parameter]:
        """All trainable parameters in a fixed structural order (the order
        used for initialization and for flat serialization)."""
        out = list(self.encoder_kernels)
        for block in self.blocks:
            for src, _ in block.spec.input_slots:
                if src in block.projections:
                    out.append(block.projections[src])
            out.append(block.wconv.kernel)
            out.append(block.wconv.alpha)
        out.append(self.head_kernel)
        out.append(self.head_bias)
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.topology.in_channels:
            raise ShapeError(f"network expects {self.topology.in_channels} input channels, "
                             f"got {x.shape[1]}")
        feats: dict[str, Tensor] = {}
        h = x
        for i, (kernel, st) in enumerate(zip(self.encoder_kernels, self.topology.encoder_stages), start=1):
            h = relu(conv2d(h, kernel, stride=st.stride, padding=1))
            feats[f"enc{i}"] = h
        for block in self.blocks:
            inputs = [feats[src] for src, _ in block.spec.input_slots]
            feats[block.spec.name] = block.forward(inputs)
        logits = add(conv2d(feats[self._head_src], self.head_kernel), self.head_bias)
        return sigmoid(logits)


def build_refine_net(topology: NetworkTopology | None = None, seed: int = 0) -> RefineNet:
    """Construct and deterministically initialize a network.

    Kernels draw from a centered uniform distribution scaled by the inverse
    square root of fan-in; gates start at 0 (half open) and the head bias at 0.
    """
    if topology is None:
        topology = default_topology()
    known = topology.validate()
    rng = np.random.default_rng(seed)

    def kernel(out_ch, in_ch, kh, kw):
        bound = 1.0 / np.sqrt(in_ch * kh * kw)
        return Parameter(rng.uniform(-bound, bound, (out_ch, in_ch, kh, kw)))

    encoder_kernels = []
    prev = topology.in_channels
    for st in topology.encoder_stages:
        encoder_kernels.append(kernel(st.channels, prev, 3, 3))
        prev = st.channels

    blocks = []
    for level in topology.refine_levels:
        for spec in level:
            projections = {}
            for src, _ in spec.input_slots:
                src_ch = known[src][0]
                if src_ch != spec.out_channels:
                    projections[src] = kernel(spec.out_channels, src_ch, 1, 1)
            wconv = WeightConvLayer(kernel(spec.out_channels, spec.out_channels, 3, 3),
                                    Parameter(np.zeros((1, 1, 1, 1))))
            blocks.append(RefineBlock(spec, projections, wconv))

    head_src = topology.head_source()
    head_kernel = kernel(1, known[head_src][0], 1, 1)
    head_bias = Parameter(np.zeros((1, 1, 1, 1)))
    return RefineNet(topology, encoder_kernels, blocks, head_kernel, head_bias)


def predict(net: RefineNet, image: Tensor) -> np.ndarray:
    """Single forward pass; returns the H x W probability map."""
    if image.shape[0] != 1:
        raise ContractError(f"predict takes a single-image batch, got batch {image.shape[0]}")
    return net.forward(image).data[0, 0].copy()


def predict_multiscale(net: RefineNet, image: Tensor, scales: ScaleSet = ScaleSet()) -> np.ndarray:
    """Run the network at each scale, resize every map back to the input
    size, and average them in the listed order."""
    if image.shape[0] != 1:
        raise ContractError(f"predict takes a single-image batch, got batch {image.shape[0]}")
    h, w = image.shape[2], image.shape[3]
    acc = None
    for s in scales.scales:
        th, tw = int(round(h * s)), int(round(w * s))
        if th < 8 or tw < 8:
            raise ContractError(f"scale {s} shrinks the image to {th}x{tw}; "
                                "both axes must stay >= 8 px")
        scaled = image if (th, tw) == (h, w) else bilinear_resize(image, th, tw)
        p = predict(net, scaled)
        if p.shape != (h, w):
            p = resize_array(p, h, w)
        acc = p if acc is None else acc + p
    return acc / len(scales.scales)
