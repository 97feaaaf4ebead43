"""Shared test helpers: seeded generators and random geometric objects.

Oracles in the test files are either frozen closed-form values or
independently recomputed quantities (numpy, brute force, hand algebra);
helpers here only produce inputs, never expected outputs.
"""

from __future__ import annotations

import math

import torch

from grassfuse import linalg

DTYPE = torch.float64


def gen(seed: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def random_spd(n: int, g: torch.Generator, scale: float = 1.0, ridge: float = 0.5) -> torch.Tensor:
    """Well-conditioned SPD: A A^T / n + ridge I."""
    a = torch.randn(n, n, generator=g, dtype=DTYPE) * scale
    return linalg.symmetrize(a @ a.transpose(-1, -2) / n + ridge * torch.eye(n, dtype=DTYPE))


def random_spd_batch(b: int, n: int, g: torch.Generator, **kw) -> torch.Tensor:
    return torch.stack([random_spd(n, g, **kw) for _ in range(b)])


def random_orthonormal(n: int, p: int, g: torch.Generator) -> torch.Tensor:
    q, _ = linalg.qr_thin(torch.randn(n, p, generator=g, dtype=DTYPE))
    return q


def random_orthogonal(p: int, g: torch.Generator) -> torch.Tensor:
    return random_orthonormal(p, p, g)


def angle_basis(theta: float) -> torch.Tensor:
    """Point on G(2,1): the line at angle theta."""
    return torch.tensor([[math.cos(theta)], [math.sin(theta)]], dtype=DTYPE)


def horizontal_at(u: torch.Tensor, g: torch.Generator, norm: float) -> torch.Tensor:
    z = torch.randn(*u.shape, generator=g, dtype=DTYPE)
    d = z - u @ (u.transpose(-1, -2) @ z)
    return d * (norm / torch.linalg.matrix_norm(d))


def projector(u: torch.Tensor) -> torch.Tensor:
    return u @ u.transpose(-1, -2)


def fro(x: torch.Tensor) -> float:
    return float(torch.linalg.matrix_norm(x))
