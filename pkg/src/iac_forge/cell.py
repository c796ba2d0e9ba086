"""Continuous search cell, discrete implanted cell, discretization and genotype I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import GenotypeParseError, InvalidArgumentError
from .relaxation import (
    active_channels,
    edge_weights,
    mixed_op_forward,
    node_forward,
    op_mixture_weights,
    sample_channel_mask,
)
from .search_space import OpKind, init_conv_weights, instantiate_op, op_param_count

GENOTYPE_VERSION = 1
N_INPUTS = 2


@dataclass(frozen=True)
class Genotype:
    """Per intermediate node, the two selected ``(source_index, OpKind)`` input edges.

    Sources 0 and 1 are the cell inputs (upsampled decoder features and encoder
    skip features); source ``2 + k`` is intermediate node ``k``.
    """

    nodes: tuple
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        nodes = tuple(
            tuple((int(src), OpKind(op)) for src, op in node) for node in self.nodes
        )
        if not nodes:
            raise InvalidArgumentError("genotype needs at least one node")
        for j, node in enumerate(nodes):
            if len(node) != 2:
                raise InvalidArgumentError(
                    f"node {j}: exactly two input edges required, got {len(node)}"
                )
            for src, _ in node:
                if not 0 <= src < N_INPUTS + j:
                    raise InvalidArgumentError(
                        f"node {j}: source {src} outside [0, {N_INPUTS + j})"
                    )
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_nodes(self):
        return len(self.nodes)

    def edges(self):
        """Yield ``(node, source, op)`` for all selected edges."""
        for j, node in enumerate(self.nodes):
            for src, op in node:
                yield j, src, op

    def same_architecture(self, other):
        return self.nodes == other.nodes


def config_hash(config):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def discretize(arch, config=None, meta=None):
    """Derive a genotype from architecture logits.

    Each edge keeps its strongest non-``zero`` operation. Each node keeps the
    two incoming edges with the largest normalized edge weight; ties go to
    the lowest source index.
    """
    config = config if config is not None else arch.config
    with torch.no_grad():
        alpha = arch.alpha.detach().double()
        phi = op_mixture_weights(alpha).numpy()
        psis = [edge_weights(b.detach().double(), config.edge_norm_mode).numpy()
                for b in arch.betas]
    ops = list(config.ops)
    candidates = [i for i, o in enumerate(ops) if o is not OpKind.ZERO] or list(range(len(ops)))
    nodes = []
    for j in range(config.n_nodes):
        off = config.node_edge_offset(j)
        psi = psis[j]
        ranked = sorted(range(len(psi)), key=lambda i: (-psi[i], i))[:2]
        chosen = []
        for src in sorted(ranked):
            row = phi[off + src, candidates]
            chosen.append((src, ops[candidates[int(np.argmax(row))]]))
        nodes.append(tuple(chosen))
    m = {"config_hash": config_hash(config)}
    m.update(meta or {})
    return Genotype(tuple(nodes), m)


def genotype_to_json(g):
    doc = {
        "version": GENOTYPE_VERSION,
        "nodes": [[[src, int(op)] for src, op in node] for node in g.nodes],
        "meta": {k: g.meta[k] for k in sorted(g.meta)},
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def genotype_from_json(data):
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise GenotypeParseError("document", f"not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise GenotypeParseError("document", "top level must be an object")
    if doc.get("version") != GENOTYPE_VERSION:
        raise GenotypeParseError("version", f"expected {GENOTYPE_VERSION}, got {doc.get('version')!r}")
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise GenotypeParseError("nodes", "must be a non-empty list")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise GenotypeParseError("meta", "must be an object")
    nodes = []
    for j, node in enumerate(raw_nodes):
        if not isinstance(node, list) or len(node) != 2:
            n = len(node) if isinstance(node, list) else "non-list"
            raise GenotypeParseError(f"nodes[{j}]", f"exactly two input edges required, got {n}")
        pairs = []
        for k, edge in enumerate(node):
            where = f"nodes[{j}][{k}]"
            if (not isinstance(edge, list) or len(edge) != 2
                    or not all(isinstance(v, int) and not isinstance(v, bool) for v in edge)):
                raise GenotypeParseError(where, "must be a [source, op_code] integer pair")
            src, code = edge
            if not 0 <= code < len(OpKind):
                raise GenotypeParseError(f"{where}.op_code", f"{code} not in 0..{len(OpKind) - 1}")
            if not 0 <= src < N_INPUTS + j:
                raise GenotypeParseError(f"{where}.source", f"{src} not in 0..{N_INPUTS + j - 1}")
            pairs.append((src, OpKind(code)))
        nodes.append(tuple(pairs))
    return Genotype(tuple(nodes), meta)


def source_name(src):
    if src == 0:
        return "in0 (decoder)"
    if src == 1:
        return "in1 (skip)"
    return f"node{src - N_INPUTS}"


def describe(g):
    lines = []
    for j, src, op in g.edges():
        lines.append(f"node{j} <- {source_name(src):<14} : {op.label}")
    if g.meta:
        lines.append("meta: " + ", ".join(f"{k}={g.meta[k]}" for k in sorted(g.meta)))
    return "\n".join(lines)


def genotype_to_dot(g, name="cell"):
    out = [f"digraph {name} {{", "  rankdir=LR;",
           '  in0 [label="in0 (decoder)", shape=box];',
           '  in1 [label="in1 (skip)", shape=box];']
    for j in range(g.n_nodes):
        out.append(f'  node{j} [label="{j}", shape=circle];')
    out.append('  out [label="out (1x1)", shape=box];')
    for j, src, op in g.edges():
        s = ("in0", "in1")[src] if src < N_INPUTS else f"node{src - N_INPUTS}"
        out.append(f'  {s} -> node{j} [label="{op.label}"];')
    for j in range(g.n_nodes):
        out.append(f"  node{j} -> out;")
    out.append("}")
    return "\n".join(out) + "\n"


class _AlignedCell(nn.Module):
    """1x1 input alignment to the cell width and 1x1 output alignment."""

    def __init__(self, n_nodes, up_channels, skip_channels, out_channels, generator):
        super().__init__()
        self.C = skip_channels
        self.n_nodes = n_nodes
        self.in_align0 = nn.Conv2d(up_channels, self.C, 1)
        self.in_align1 = nn.Conv2d(skip_channels, self.C, 1)
        self.out_align = nn.Conv2d(n_nodes * self.C, out_channels, 1)
        for m in (self.in_align0, self.in_align1, self.out_align):
            init_conv_weights(m, generator)

    def _align(self, up, skip):
        if up.shape[-2:] != skip.shape[-2:]:
            raise InvalidArgumentError(
                f"spatial mismatch: decoder {tuple(up.shape[-2:])} vs skip {tuple(skip.shape[-2:])}"
            )
        return [self.in_align0(up), self.in_align1(skip)]


class ContinuousCell(_AlignedCell):
    """Supercell for one skip level; the architecture logits live outside it.

    With ``fused=True`` every op kind is evaluated once per node over the
    stacked active channels of all incoming edges (grouped convolutions over
    the same per-edge weights). ``fused=False`` walks the edges one by one
    through :func:`mixed_op_forward`; both draw masks in the same order.
    """

    def __init__(self, config, up_channels, skip_channels, out_channels, generator, fused=True):
        super().__init__(config.n_nodes, up_channels, skip_channels, out_channels, generator)
        self.config = config
        self.fused = fused
        self.width = active_channels(self.C, config.K)
        self.edges = nn.ModuleList(
            nn.ModuleList(instantiate_op(o, self.width, generator) for o in config.ops)
            for _ in range(config.n_edges)
        )

    def forward(self, up, skip, arch, generator=None):
        states = self._align(up, skip)
        psis = arch.edge_weights()
        cfg = self.config
        for j in range(cfg.n_nodes):
            off = cfg.node_edge_offset(j)
            masks = [sample_channel_mask(self.C, cfg.K, generator)
                     for _ in range(cfg.node_arity(j))]
            if self.fused:
                outs = self._fused_edges(states, arch.alpha, off, masks)
            else:
                outs = [mixed_op_forward(states[src], arch.alpha[off + src],
                                         self.edges[off + src], mask)
                        for src, mask in enumerate(masks)]
            states.append(node_forward(psis[j], outs))
        return self.out_align(torch.cat(states[N_INPUTS:], dim=1))

    def _fused_edges(self, states, alpha, off, masks):
        arity = len(masks)
        w = self.width
        full = w == self.C
        xa = torch.cat([states[src] if full else states[src].index_select(1, m.active)
                        for src, m in enumerate(masks)], dim=1)
        phi = op_mixture_weights(alpha[off:off + arity]).to(xa.dtype)
        h = 0
        for k, kind in enumerate(self.config.ops):
            if kind is OpKind.ZERO:
                # contributes phi * 0; phi itself still normalizes over every op
                continue
            mods = [self.edges[off + src][k] for src in range(arity)]
            y = _fused_op(kind, mods, xa, arity, self.training)
            h = h + phi[:, k].repeat_interleave(w).view(1, -1, 1, 1) * y
        chunks = torch.split(h, w, dim=1)
        if full:
            return list(chunks)
        return [states[src].index_copy(1, m.active, c)
                for src, (m, c) in enumerate(zip(masks, chunks))]


def _fused_bn(bns, x, training):
    weight = torch.cat([b.weight for b in bns])
    bias = torch.cat([b.bias for b in bns])
    if not training:
        mean = torch.cat([b.running_mean for b in bns])
        var = torch.cat([b.running_var for b in bns])
        return F.batch_norm(x, mean, var, weight, bias, False, 0.0, bns[0].eps)
    mean = torch.cat([b.running_mean for b in bns])
    var = torch.cat([b.running_var for b in bns])
    out = F.batch_norm(x, mean, var, weight, bias, True, bns[0].momentum, bns[0].eps)
    c = bns[0].num_features
    with torch.no_grad():
        for i, b in enumerate(bns):
            b.running_mean.copy_(mean[i * c:(i + 1) * c])
            b.running_var.copy_(var[i * c:(i + 1) * c])
            b.num_batches_tracked.add_(1)
    return out


def _avg_pool_3x3(x):
    """3x3 stride-1 average excluding padding, as a depthwise conv (faster on CPU)."""
    C, (H, W) = x.shape[1], x.shape[-2:]
    ones = x.new_ones(C, 1, 3, 3)
    total = F.conv2d(x, ones, None, 1, 1, 1, C)
    count = F.conv2d(x.new_ones(1, 1, H, W), ones[:1], None, 1, 1)
    return total / count


def _fused_op(kind, mods, x, groups, training):
    """Apply ``groups`` same-kind op instances to their channel blocks of ``x`` at once."""
    if kind is OpKind.ZERO:
        return x.mul(0.0)
    if kind is OpKind.IDENTITY:
        return x
    if kind is OpKind.MAX_POOL_3X3:
        return F.max_pool2d(x, 3, 1, 1)
    if kind is OpKind.AVG_POOL_3X3:
        return _avg_pool_3x3(x)
    for layers in zip(*mods):
        first = layers[0]
        if isinstance(first, nn.ReLU):
            x = F.relu(x)
        elif isinstance(first, nn.BatchNorm2d):
            x = _fused_bn(layers, x, training)
        elif first.kernel_size != (1, 1):
            weight = torch.cat([m.weight for m in layers])
            x = F.conv2d(x, weight, None, 1, first.padding, first.dilation, x.shape[1])
        else:
            weight = torch.cat([m.weight for m in layers])
            x = F.conv2d(x, weight, None, 1, 0, 1, groups)
    return x


class DiscreteCell(_AlignedCell):
    """Implanted cell: each node is the unweighted sum of its two genotype edges."""

    def __init__(self, genotype, up_channels, skip_channels, out_channels, generator):
        super().__init__(genotype.n_nodes, up_channels, skip_channels, out_channels, generator)
        self.genotype = genotype
        self.ops = nn.ModuleList(instantiate_op(op, self.C, generator)
                                 for _, _, op in genotype.edges())

    def forward(self, up, skip, arch=None, generator=None):
        states = self._align(up, skip)
        k = 0
        for node in self.genotype.nodes:
            acc = 0
            for src, _ in node:
                acc = acc + self.ops[k](states[src])
                k += 1
            states.append(acc)
        return self.out_align(torch.cat(states[N_INPUTS:], dim=1))


def continuous_cell_param_count(config, up_channels, skip_channels, out_channels):
    C = skip_channels
    width = active_channels(C, config.K)
    align = (up_channels * C + C) + (skip_channels * C + C) + (config.n_nodes * C * out_channels + out_channels)
    return align + config.n_edges * sum(op_param_count(o, width) for o in config.ops)


def discrete_cell_param_count(genotype, up_channels, skip_channels, out_channels):
    C = skip_channels
    align = (up_channels * C + C) + (skip_channels * C + C) + (genotype.n_nodes * C * out_channels + out_channels)
    return align + sum(op_param_count(op, C) for _, _, op in genotype.edges())
