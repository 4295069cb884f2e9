"""Neural field F(x) -> (color, signed distance, segment probabilities).

Sign convention: the signed distance is positive inside matter and negative
outside.  After sphere initialization the field approximates radius - |x|,
i.e. a solid ball whose surface normals (the SDF gradient) face inward.

All tensors are torch.float64; forward evaluation is deterministic for a
fixed thread count, and gradients come from reverse-mode autodiff (checked
against central finite differences in the test suite).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64


@dataclass(frozen=True)
class FieldConfig:
    trunk_layers: int = 8
    trunk_width: int = 256
    color_layers: int = 4
    color_width: int = 256
    seg_layers: int = 2
    seg_width: int = 256
    n_slots: int = 24
    pe_position: int = 6
    pe_view: int = 4
    color_uses_normal: bool = True
    beta_init: float = 0.1

    @property
    def skip_at(self) -> int:
        return self.trunk_layers // 2

    def arch_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def positional_encode(x: torch.Tensor, L: int) -> torch.Tensor:
    """Concatenate x with (sin, cos)(2^l * pi * x), l = 0..L-1; length 3 + 6L."""
    if L == 0:
        return x
    bands = (2.0 ** torch.arange(L, dtype=x.dtype, device=x.device)) * math.pi
    ang = x[..., :, None] * bands  # (..., 3, L)
    flat = ang.flatten(-2)
    return torch.cat([x, torch.sin(flat), torch.cos(flat)], dim=-1)


def _mlp_layers(dims, act):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i + 2 < len(dims):
            layers.append(act())
    return nn.Sequential(*layers)


def _softplus():
    # sharp-ish softplus keeps the field C^2 for double-backprop and smooth
    # enough that finite-difference gradient oracles are meaningful
    return nn.Softplus(beta=20)


class FieldNetwork(nn.Module):
    """Geometry trunk with SDF + feature outputs, color head, segment head."""

    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        cfg = config or FieldConfig()
        self.config = cfg
        in_dim = 3 + 6 * cfg.pe_position
        w = cfg.trunk_width

        self.trunk = nn.ModuleList()
        for i in range(cfg.trunk_layers):
            d_in = in_dim if i == 0 else w
            if i == cfg.skip_at and i > 0:
                d_in = w + in_dim
            d_out = w if i + 1 < cfg.trunk_layers else w + 1
            self.trunk.append(nn.Linear(d_in, d_out))
        self.trunk_act = _softplus()

        view_dim = 3 + 6 * cfg.pe_view
        color_in = 3 + view_dim + w + (3 if cfg.color_uses_normal else 0)
        self.color_head = _mlp_layers(
            [color_in] + [cfg.color_width] * (cfg.color_layers - 1) + [3], _softplus
        )
        self.seg_head = _mlp_layers(
            [3 + w] + [cfg.seg_width] * (cfg.seg_layers - 1) + [cfg.n_slots], _softplus
        )
        self.log_beta = nn.Parameter(torch.tensor(math.log(cfg.beta_init), dtype=DTYPE))
        self.to(DTYPE)

    @property
    def beta(self) -> torch.Tensor:
        return self.log_beta.exp()

    def sdf_and_feature(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        enc = positional_encode(x, self.config.pe_position)
        h = enc
        for i, layer in enumerate(self.trunk):
            if i == self.config.skip_at and i > 0:
                h = torch.cat([h, enc], dim=-1)
            h = layer(h)
            if i + 1 < len(self.trunk):
                h = self.trunk_act(h)
        s, feat = h[..., 0], h[..., 1:]
        if not torch.isfinite(s).all():
            bad = [n for n, p in self.named_parameters() if not torch.isfinite(p).all()]
            raise FloatingPointError(
                f"field produced non-finite SDF values (non-finite params: {bad or 'none'})"
            )
        return s, feat

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.sdf_and_feature(x)[0]

    def color(self, x, view, normal, feat) -> torch.Tensor:
        parts = [x, positional_encode(view, self.config.pe_view)]
        if self.config.color_uses_normal:
            assert normal is not None, "this architecture requires normals for the color head"
            parts.append(normal)
        parts.append(feat)
        return torch.sigmoid(self.color_head(torch.cat(parts, dim=-1)))

    def segment_probs(self, x, feat) -> torch.Tensor:
        return torch.sigmoid(self.seg_head(torch.cat([x, feat], dim=-1)))

    def query(self, x: torch.Tensor, view: torch.Tensor, normal: torch.Tensor | None = None):
        """Full evaluation: returns (color, sdf, segment probs, feature).

        When the color head consumes normals and none are supplied they are
        computed from the SDF gradient (differentiably).
        """
        s, feat = self.sdf_and_feature(x)
        if self.config.color_uses_normal and normal is None:
            _, grad = sdf_with_gradient(self, x, create_graph=torch.is_grad_enabled())
            normal = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        c = self.color(x, view, normal, feat)
        h = self.segment_probs(x, feat)
        return c, s, h, feat


def sdf_with_gradient(net: FieldNetwork, x: torch.Tensor, create_graph: bool = False):
    """Evaluate the SDF and its spatial gradient at x; returns (s, grad)."""
    with torch.enable_grad():
        xg = x if (x.requires_grad and create_graph) else x.detach().requires_grad_(True)
        s = net.sdf(xg)
        if s.requires_grad:
            (grad,) = torch.autograd.grad(s.sum(), xg, create_graph=create_graph,
                                          allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(xg)
        else:  # field is constant in x
            grad = torch.zeros_like(xg)
    if not create_graph:
        s, grad = s.detach(), grad.detach()
    return s, grad


def sdf_gradient(net: FieldNetwork, x: torch.Tensor) -> torch.Tensor:
    return sdf_with_gradient(net, x)[1]


def sphere_initialize(net: FieldNetwork, radius: float = 1.0, seed: int = 0,
                      steps: int = 1200, batch: int = 768, lr: float = 1e-3) -> FieldNetwork:
    """Fit the SDF head to radius - |x| (positive inside, normals inward).

    Starts from a smooth state (positional-encoding columns of the first
    trunk layer zeroed) and runs a short Adam fit of both the value and its
    gradient on points out to 2.5 * radius, with extra samples on the sphere
    surface so the zero crossing is accurate there.
    """
    assert radius > 0
    with torch.no_grad():
        net.trunk[0].weight[:, 3:].zero_()
    rng = np.random.default_rng(seed)
    params = [p for name, p in net.named_parameters() if name.startswith("trunk")]
    opt = torch.optim.Adam(params, lr=lr)
    n_tip = batch // 8
    n_in, n_out = batch // 3, batch // 4
    n_surf = batch - n_tip - n_in - n_out
    for step in range(steps):
        for g in opt.param_groups:  # cosine decay to polish the fit
            g["lr"] = 2e-4 + 0.5 * (lr - 2e-4) * (1 + math.cos(math.pi * step / steps))
        pts = rng.standard_normal((batch, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        r_tip = 0.25 * radius * rng.uniform(0.0, 1.0, (n_tip, 1)) ** (1 / 3)
        r_in = 1.2 * radius * rng.uniform(0.0, 1.0, (n_in, 1)) ** (1 / 3)
        r_out = radius * rng.uniform(1.2, 2.5, (n_out, 1))
        r_surf = radius * np.abs(1.0 + 0.05 * rng.standard_normal((n_surf, 1)))
        pts *= np.concatenate([r_tip, r_in, r_out, r_surf], axis=0)
        x = torch.from_numpy(pts).to(DTYPE)
        r = x.norm(dim=-1).clamp_min(1e-6)
        s, grad = sdf_with_gradient(net, x, create_graph=True)
        # the gradient target -x/r is singular at the origin; mask it out
        # there and lean on the (upweighted) value term instead
        mask = (r > 0.1 * radius).to(DTYPE)[:, None]
        grad_err = (mask * (grad + x / r[:, None]) ** 2).sum(-1).mean()
        w_val = torch.where(r < 0.3 * radius, 8.0, 1.0)
        loss = (w_val * (s - (radius - r)) ** 2).mean() + 0.7 * grad_err
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


CHECKPOINT_VERSION = 1


def save_checkpoint(net: FieldNetwork, path, extras: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch_hash": net.config.arch_hash(),
        "field_config": asdict(net.config),
        "state": net.state_dict(),
        "extras": extras or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: FieldConfig | None = None):
    """Restore a FieldNetwork; returns (net, extras).

    Raises ValueError when the stored architecture hash does not match the
    requested configuration.
    """
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('format_version')}")
    cfg = FieldConfig(**payload["field_config"])
    if cfg.arch_hash() != payload["arch_hash"]:
        raise ValueError("checkpoint is corrupt: architecture hash mismatch")
    if expected_config is not None and expected_config.arch_hash() != payload["arch_hash"]:
        raise ValueError(
            f"architecture hash mismatch: checkpoint {payload['arch_hash']} "
            f"vs requested {expected_config.arch_hash()}"
        )
    net = FieldNetwork(cfg)
    net.load_state_dict(payload["state"])
    return net, payload["extras"]
