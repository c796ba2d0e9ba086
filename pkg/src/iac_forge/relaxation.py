"""Continuous relaxation: op mixtures, partial-channel mixed ops and edge normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidArgumentError, NumericalDomainError
from .search_space import EdgeNorm

# distance from an odd multiple of pi/2 treated as a tan pole
TAN_POLE_EPS = 1e-6


def _as_tensor(v):
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(v, dtype=torch.float64)


def _check_finite(v, name):
    if not torch.isfinite(v).all():
        raise InvalidArgumentError(f"{name} contains NaN or Inf")


def op_mixture_weights(alpha_edge):
    """Softmax over the op logits of one edge (or of every row of a matrix)."""
    alpha_edge = _as_tensor(alpha_edge)
    _check_finite(alpha_edge, "alpha")
    return torch.softmax(alpha_edge, dim=-1)


def edge_weights_pcdarts(beta_node):
    beta_node = _as_tensor(beta_node)
    _check_finite(beta_node, "beta")
    return torch.softmax(beta_node, dim=-1)


def edge_weights_tan_rescaled(beta_node):
    """Edge weights from tan(beta), with the largest weight capped at one half.

    The raw weights are ``softmax(tan(beta))``. When their maximum exceeds 0.5
    the argmax entry is pinned to 0.5 and the remaining mass 0.5 is shared in
    proportion to the raw weights of the other edges. The argmax choice is
    treated as fixed when differentiating.
    """
    beta_node = _as_tensor(beta_node)
    if beta_node.dim() != 1 or beta_node.numel() == 0:
        raise InvalidArgumentError("beta_node must be a non-empty vector")
    _check_finite(beta_node, "beta")
    b = beta_node.detach().double()
    pole_dist = torch.abs(torch.remainder(b - math.pi / 2, math.pi))
    pole_dist = torch.minimum(pole_dist, math.pi - pole_dist)
    if (pole_dist < TAN_POLE_EPS).any():
        raise NumericalDomainError(
            f"beta {b.tolist()} lies within {TAN_POLE_EPS} of a tan pole"
        )
    t = torch.tan(beta_node)
    psi_hat = torch.softmax(t - t.max(), dim=-1)
    n = psi_hat.numel()
    if n == 1:
        return psi_hat
    top = int(torch.argmax(psi_hat.detach()))
    if float(psi_hat[top].detach()) <= 0.5:
        return psi_hat
    others = [i for i in range(n) if i != top]
    # psi_hat_i / S_rest == softmax over the other edges; avoids underflow in S_rest
    rest = 0.5 * torch.softmax(t[others], dim=-1)
    out = torch.empty_like(psi_hat)
    out = out.index_copy(0, torch.tensor(others), rest)
    out = out.index_fill(0, torch.tensor([top]), 0.5)
    return out


def edge_weights(beta_node, mode):
    if EdgeNorm(mode) is EdgeNorm.TAN_RESCALED:
        return edge_weights_tan_rescaled(beta_node)
    return edge_weights_pcdarts(beta_node)


@dataclass(frozen=True)
class ChannelMask:
    """Active-channel selection of one edge; ``active`` holds sorted channel indices."""

    length: int
    active: torch.Tensor

    @property
    def active_count(self):
        return int(self.active.numel())

    def as_vector(self):
        v = torch.zeros(self.length)
        v[self.active] = 1.0
        return v

    @classmethod
    def full(cls, length):
        return cls(length, torch.arange(length))


def active_channels(C, K):
    return max(1, C // K)


def sample_channel_mask(C, K, generator=None):
    if C < 1 or K < 1:
        raise InvalidArgumentError(f"C and K must be >= 1, got {C}, {K}")
    n = active_channels(C, K)
    if n == C:
        return ChannelMask.full(C)
    idx = torch.randperm(C, generator=generator)[:n]
    return ChannelMask(C, torch.sort(idx).values)


def mixed_op_forward(x, alpha_edge, op_instances, mask):
    """Partial-channel mixed op.

    Active channels go through the softmax-weighted sum of ``op_instances``;
    inactive channels pass through unchanged, in their original positions.
    Accepts ``(C, H, W)`` or ``(N, C, H, W)``.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise InvalidArgumentError(f"expected a 3D or 4D tensor, got shape {tuple(x.shape)}")
    phi = op_mixture_weights(alpha_edge)
    if len(op_instances) != phi.numel():
        raise InvalidArgumentError(
            f"{len(op_instances)} op instances for {phi.numel()} mixture weights"
        )
    if mask.length != x.shape[1]:
        raise InvalidArgumentError(
            f"mask length {mask.length} does not match {x.shape[1]} channels"
        )
    phi = phi.to(x.dtype)
    full = mask.active_count == mask.length
    xa = x if full else x.index_select(1, mask.active)
    h = sum(w * op(xa) for w, op in zip(phi, op_instances))
    out = h if full else x.index_copy(1, mask.active, h)
    return out.squeeze(0) if squeeze else out


def node_forward(psi, edge_outputs):
    """Psi-weighted sum of a node's incoming edge outputs."""
    psi = _as_tensor(psi)
    if psi.numel() != len(edge_outputs):
        raise InvalidArgumentError(
            f"{psi.numel()} edge weights for {len(edge_outputs)} edge outputs"
        )
    if not edge_outputs:
        raise InvalidArgumentError("a node needs at least one incoming edge")
    shape = edge_outputs[0].shape
    if any(e.shape != shape for e in edge_outputs):
        raise InvalidArgumentError("edge outputs differ in shape")
    psi = psi.to(edge_outputs[0].dtype)
    return sum(w * e for w, e in zip(psi, edge_outputs))


class ArchParams(nn.Module):
    """Alpha (edge x op) and beta (per node) logits shared by every skip level."""

    def __init__(self, config, init=1.0):
        super().__init__()
        self.config = config
        self.alpha = nn.Parameter(torch.full((config.n_edges, len(config.ops)), float(init)))
        self.betas = nn.ParameterList(
            nn.Parameter(torch.full((config.node_arity(j),), float(init)))
            for j in range(config.n_nodes)
        )

    def op_weights(self):
        return op_mixture_weights(self.alpha)

    def edge_weights(self):
        return [edge_weights(b, self.config.edge_norm_mode) for b in self.betas]

    def numel(self):
        return sum(p.numel() for p in self.parameters())

    def to_bytes(self):
        """Raw little-endian float32 dump: alpha row-major, then each beta vector."""
        parts = [self.alpha.detach().cpu().numpy().astype("<f4").tobytes()]
        parts += [b.detach().cpu().numpy().astype("<f4").tobytes() for b in self.betas]
        return b"".join(parts)
