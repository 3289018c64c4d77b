"""Frequency-band positional encoding with a coarse-to-fine window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class EncodingConfig:
    L: int = 16
    alpha: float = 1.0
    include_input: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def width(self) -> int:
        return 6 * self.L + (3 if self.include_input else 0)


def window(j, alpha: float, L: int):
    """Cosine easing weight of band ``j``: ``(1 - cos(clamp(alpha L - j, 0, 1) pi)) / 2``."""
    x = np.clip(alpha * L - np.asarray(j, dtype=float), 0.0, 1.0)
    return (1.0 - np.cos(x * np.pi)) / 2.0


def anneal_step(alpha: float, n_max: int) -> float:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    return min(alpha + 1.0 / n_max, 1.0)


def encode(x, cfg: EncodingConfig):
    """Encode ``(N, 3)`` points to ``(N, 6L [+3])``.

    Band ``j`` contributes ``[sin(2^j pi x), cos(2^j pi x)]`` (3 + 3 entries)
    scaled by its window; raw coordinates go last when ``include_input``.
    """
    n = ad.value_of(x).shape[0]
    freqs = (2.0 ** np.arange(cfg.L) * np.pi).reshape(1, cfg.L, 1)
    w = window(np.arange(cfg.L), cfg.alpha, cfg.L).reshape(1, cfg.L, 1)
    dtype = ad.value_of(x).dtype
    freqs, w = freqs.astype(dtype), w.astype(dtype)
    arg = ad.reshape(x, (n, 1, 3)) * freqs
    bands = ad.concat([ad.sin(arg) * w, ad.cos(arg) * w], axis=-1)
    out = ad.reshape(bands, (n, 6 * cfg.L))
    if cfg.include_input:
        out = ad.concat([out, x], axis=-1)
    return out


def encode_jacobian(x: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Analytic ``d encode / d x`` of shape ``(N, 6L [+3], 3)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    freqs = 2.0 ** np.arange(cfg.L) * np.pi
    w = window(np.arange(cfg.L), cfg.alpha, cfg.L)
    J = np.zeros((n, cfg.L, 2, 3, 3))
    arg = x[:, None, :] * freqs[None, :, None]
    scale = (w * freqs)[None, :, None]
    for k in range(3):
        J[:, :, 0, k, k] = scale[..., 0] * np.cos(arg[:, :, k])
        J[:, :, 1, k, k] = -scale[..., 0] * np.sin(arg[:, :, k])
    J = J.reshape(n, 6 * cfg.L, 3)
    if cfg.include_input:
        J = np.concatenate([J, np.broadcast_to(np.eye(3), (n, 3, 3))], axis=1)
    return J
