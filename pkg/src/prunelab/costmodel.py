"""Channel dependency analysis and per-channel FLOPs / memory accounting.

FLOPs are counted as multiply-accumulates of dense and conv layers only.
A channel's removal cost has a producer side (its own filter) and a
consumer side (the weight slices that read it). Where a residual add
merges several gated layers into one stream, each consumer slice is
attributed in equal parts to the stream's producer layers so that no MAC
is ever counted more than once per side.

Memory cost of a channel = its removed parameters (producing filter,
bias, consumer slices) plus one sample's activation elements.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ChannelId(NamedTuple):
    layer: int
    channel: int


@dataclass(frozen=True)
class CouplingGroup:
    members: tuple  # tuple[ChannelId, ...], sorted

    def __len__(self):
        return len(self.members)


@dataclass
class ChannelCost:
    delta_flops: float
    delta_mem: float


class _Space(NamedTuple):
    producers: frozenset  # gated layer indices sharing this channel space
    width: int
    active: np.ndarray    # bool mask per channel


def _layer_spatial(model):
    """Output (h, w) per layer, None once spatial structure is gone."""
    if len(model.input_shape) == 3:
        h, w = model.input_shape[1], model.input_shape[2]
    else:
        h = w = None
    spatial = []
    for spec in model.layers:
        if spec.kind == "conv":
            h = (h + 2 * spec.pad - spec.ksize) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.ksize) // spec.stride + 1
        elif spec.kind in ("avgpool", "flatten", "dense"):
            h = w = None
        spatial.append((h, w))
    return spatial


def _active_mask(model, layer_idx, width):
    if layer_idx in model.gates:
        return model.gates[layer_idx] > 0
    return np.ones(width, dtype=bool)


def _trace_spaces(model):
    """Channel space flowing out of each layer, plus residual unions."""
    if len(model.input_shape) == 3:
        in_width = model.input_shape[0]
    else:
        in_width = model.input_shape[0]
    space = _Space(frozenset(), in_width, np.ones(in_width, dtype=bool))
    spaces_in, spaces_out = [], []
    unions = []
    for i, spec in enumerate(model.layers):
        spaces_in.append(space)
        if spec.kind in ("dense", "conv"):
            producers = frozenset([i]) if spec.gate else frozenset()
            space = _Space(producers, spec.out_dim, _active_mask(model, i, spec.out_dim))
        elif spec.kind == "residual_add":
            other = spaces_out[spec.source]
            if other.width != space.width:
                raise ValueError(f"residual_add at {i}: width {space.width} vs {other.width}")
            producers = space.producers | other.producers
            if len(producers) >= 2:
                unions.append(producers)
            space = _Space(producers, space.width, space.active | other.active)
        # relu / avgpool / flatten keep the channel space
        spaces_out.append(space)
    return spaces_in, spaces_out, unions


def trace_couplings(model):
    """Partition the gated channels into coupling groups.

    Gated layers merged by residual additions form one group covering the
    whole stream; every other gated channel is a singleton group.
    """
    _, _, unions = _trace_spaces(model)
    # merge transitively
    classes = []
    for u in unions:
        merged = set(u)
        rest = []
        for c in classes:
            if c & merged:
                merged |= c
            else:
                rest.append(c)
        classes = rest + [merged]
    in_stream = set()
    for c in classes:
        in_stream |= c
    groups = []
    for c in classes:
        members = tuple(sorted(
            ChannelId(l, j) for l in c for j in range(model.gates[l].size)))
        groups.append(CouplingGroup(members))
    for l in model.gated_layers():
        if l in in_stream:
            continue
        for j in range(model.gates[l].size):
            groups.append(CouplingGroup((ChannelId(l, j),)))
    groups.sort(key=lambda g: g.members[0])
    return groups


def channel_costs(model):
    """ΔFLOPs / ΔMem per active gated channel, on the current structure."""
    spaces_in, _, _ = _trace_spaces(model)
    spatial = _layer_spatial(model)
    costs = {}
    # producer side
    for i, spec in enumerate(model.layers):
        if not spec.gate:
            continue
        in_active = int(spaces_in[i].active.sum())
        if spec.kind == "conv":
            oh, ow = spatial[i]
            k2 = spec.ksize * spec.ksize
            macs = in_active * k2 * oh * ow
            wmem = in_active * k2 + 1
            amem = oh * ow
        else:
            macs = in_active
            wmem = in_active + 1
            amem = 1
        for j in np.nonzero(model.gates[i] > 0)[0]:
            costs[ChannelId(i, int(j))] = ChannelCost(float(macs), float(wmem + amem))
    # consumer side, split equally over the input space's producers
    for i, spec in enumerate(model.layers):
        if spec.kind not in ("dense", "conv"):
            continue
        src = spaces_in[i]
        if not src.producers:
            continue
        out_active = int(_active_mask(model, i, spec.out_dim).sum())
        if spec.kind == "conv":
            oh, ow = spatial[i]
            k2 = spec.ksize * spec.ksize
            macs = out_active * k2 * oh * ow
            wmem = out_active * k2
        else:
            macs = out_active
            wmem = out_active
        share = 1.0 / len(src.producers)
        for l in src.producers:
            for j in np.nonzero(model.gates[l] > 0)[0]:
                c = costs.get(ChannelId(l, int(j)))
                if c is not None:
                    c.delta_flops += macs * share
                    c.delta_mem += wmem * share
    return costs


def model_flops(model, only_active=True):
    """Total dense+conv MACs per sample, optionally on active channels only."""
    spaces_in, _, _ = _trace_spaces(model)
    spatial = _layer_spatial(model)
    total = 0
    for i, spec in enumerate(model.layers):
        if spec.kind not in ("dense", "conv"):
            continue
        if only_active:
            n_in = int(spaces_in[i].active.sum())
            n_out = int(_active_mask(model, i, spec.out_dim).sum())
        else:
            n_in, n_out = spaces_in[i].width, spec.out_dim
        if spec.kind == "conv":
            oh, ow = spatial[i]
            total += n_in * n_out * spec.ksize * spec.ksize * oh * ow
        else:
            total += n_in * n_out
    return total


def model_params(model, only_active=True):
    """Weight + bias element count, optionally restricted to active channels."""
    spaces_in, _, _ = _trace_spaces(model)
    total = 0
    for i, spec in enumerate(model.layers):
        if spec.kind not in ("dense", "conv"):
            continue
        if only_active:
            n_in = int(spaces_in[i].active.sum())
            n_out = int(_active_mask(model, i, spec.out_dim).sum())
        else:
            n_in, n_out = spaces_in[i].width, spec.out_dim
        if spec.kind == "conv":
            total += n_out * n_in * spec.ksize * spec.ksize + n_out
        else:
            total += n_in * n_out + n_out
    return total


def gated_channels(model, active_only=True):
    """All gated ChannelIds in (layer, channel) order."""
    out = []
    for l in model.gated_layers():
        for j in range(model.gates[l].size):
            if not active_only or model.gates[l][j] > 0:
                out.append(ChannelId(l, j))
    return out


def first_weight_layer(model):
    for i, spec in enumerate(model.layers):
        if spec.kind in ("dense", "conv"):
            return i
    raise ValueError("model has no weight layers")
