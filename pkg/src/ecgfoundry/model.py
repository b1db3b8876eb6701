"""Patch-based 1D transformer: conv patch projection, pre-norm encoder,
half-width decoder, contrastive projection head and linear classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import N_LEADS, TARGET_LEN


class NumericError(FloatingPointError):
    def __init__(self, layer: int, where: str = "encoder"):
        super().__init__(f"non-finite activations in {where} block {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 125
    depth: int = 2
    dim: int = 256
    decoder_depth: int = 2
    n_heads: Optional[int] = None
    mlp_ratio: int = 4
    proj_dim: int = 128
    n_samples: int = TARGET_LEN

    def __post_init__(self):
        if self.n_heads is None:
            object.__setattr__(self, "n_heads", max(1, self.dim // 64))
        if self.patch < 1 or self.depth < 0 or self.dim < 2:
            raise ValueError(f"invalid config {self}")
        if self.dim % 2:
            raise ValueError("dim must be even so the decoder is exactly half width")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.seq_len < 1:
            raise ValueError(f"patch {self.patch} longer than signal ({self.n_samples})")

    @property
    def seq_len(self) -> int:
        return self.n_samples // self.patch

    @property
    def decoder_dim(self) -> int:
        return self.dim // 2

    @property
    def decoder_heads(self) -> int:
        h = max(1, self.decoder_dim // 64)
        while self.decoder_dim % h:
            h -= 1
        return h

    @property
    def patch_values(self) -> int:
        return N_LEADS * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


class Block(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(b, s, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, s, d))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class FoundationModel(nn.Module):
    """Encoder with optional reconstruction decoder and projection head.

    Which heads exist depends on the pre-training method: CL needs only the
    projection head, GL only the decoder, HL both.
    """

    def __init__(self, config: ModelConfig, decoder: bool = True, projection: bool = True):
        super().__init__()
        c = config
        self.config = c
        self.patch_conv = nn.Conv1d(N_LEADS, c.dim, kernel_size=c.patch, stride=c.patch)
        self.register_buffer("pos", sinusoidal_positions(c.seq_len, c.dim).float(), persistent=False)
        self.blocks = nn.ModuleList(Block(c.dim, c.n_heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.dim)
        self.has_decoder = decoder
        self.has_projection = projection
        if decoder:
            dd = c.decoder_dim
            self.decoder_embed = nn.Linear(c.dim, dd)
            self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
            self.register_buffer("dec_pos", sinusoidal_positions(c.seq_len, dd).float(), persistent=False)
            self.decoder_blocks = nn.ModuleList(
                Block(dd, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_depth))
            self.decoder_norm = nn.LayerNorm(dd)
            self.decoder_pred = nn.Linear(dd, c.patch_values)
        if projection:
            self.proj_fc1 = nn.Linear(c.dim, c.dim)
            self.proj_fc2 = nn.Linear(c.dim, c.proj_dim)

    # -- encoder path
    def patch_embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != N_LEADS:
            raise ValueError(f"expected [batch x {N_LEADS} x time], got {tuple(x.shape)}")
        if x.shape[2] < self.config.patch:
            raise ValueError("signal shorter than one patch")
        n = self.config.seq_len * self.config.patch
        tokens = self.patch_conv(x[:, :, :n]).transpose(1, 2)
        return tokens + self.pos[: tokens.shape[1]]

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if not torch.isfinite(tokens).all():
                raise NumericError(i)
        return self.norm(tokens)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled representation of full (unmasked) records."""
        return pool(self.encode(self.patch_embed(x)))

    def encode_visible(self, x: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Encode only the tokens at ``visible`` [batch x n_visible]."""
        tokens = self.patch_embed(x)
        idx = visible.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        return self.encode(torch.gather(tokens, 1, idx))

    # -- decoder path
    def decode(self, latent: torch.Tensor, visible: torch.Tensor,
               masked: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Predict every patch from visible-token latents.

        ``visible`` and ``masked`` are per-sample index tensors that must
        partition ``range(seq_len)``.
        """
        if not self.has_decoder:
            raise RuntimeError("model was built without a decoder")
        b = latent.shape[0]
        s = self.config.seq_len
        counts = torch.zeros(b, s, dtype=torch.long)
        counts.scatter_add_(1, visible, torch.ones_like(visible))
        if masked is not None:
            counts.scatter_add_(1, masked, torch.ones_like(masked))
            if not bool((counts == 1).all()):
                raise ValueError("visible and masked positions must partition the sequence")
        elif bool((counts > 1).any()):
            raise ValueError("duplicate visible positions")
        h = self.decoder_embed(latent)
        full = self.mask_token.expand(b, s, -1)
        idx = visible.unsqueeze(-1).expand(-1, -1, h.shape[-1])
        full = torch.scatter(full, 1, idx, h) + self.dec_pos
        for i, blk in enumerate(self.decoder_blocks):
            full = blk(full)
            if not torch.isfinite(full).all():
                raise NumericError(i, "decoder")
        return self.decoder_pred(self.decoder_norm(full))

    # -- contrastive head
    def project(self, vectors: torch.Tensor) -> torch.Tensor:
        if not self.has_projection:
            raise RuntimeError("model was built without a projection head")
        z = self.proj_fc2(F.gelu(self.proj_fc1(vectors)))
        return F.normalize(z, dim=-1)

    def encoder_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if _is_encoder_key(k)}


_ENCODER_PREFIXES = ("patch_conv.", "blocks.", "norm.")


def _is_encoder_key(name: str) -> bool:
    return name.startswith(_ENCODER_PREFIXES)


def pool(tokens: torch.Tensor) -> torch.Tensor:
    return tokens.mean(dim=1)


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """[B x leads x T] -> [B x seq_len x leads*patch], lead-major within a patch."""
    b, l, t = x.shape
    s = t // patch
    return x[:, :, : s * patch].reshape(b, l, s, patch).permute(0, 2, 1, 3).reshape(b, s, l * patch)


class Classifier(nn.Module):
    """Encoder plus a single-logit linear head."""

    def __init__(self, encoder: FoundationModel):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return classify(self.encoder.embed(x), self.head)


def classify(vectors: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return head(vectors)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def reset_parameters(module: nn.Module, seed: int) -> None:
    """Truncated-normal (sigma 0.02) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    norm_weights = {f"{n}.weight" for n, m in module.named_modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name in norm_weights:
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.from_numpy(trunc_normal(rng, tuple(p.shape))))


def init_params(config: ModelConfig, seed: int = 0, method: Optional[str] = None) -> FoundationModel:
    """Fresh model for ``method`` (CL/GL/HL); ``None`` builds every head."""
    decoder, projection = heads_for(method)
    model = FoundationModel(config, decoder=decoder, projection=projection)
    reset_parameters(model, seed)
    return model


def heads_for(method: Optional[str]) -> tuple[bool, bool]:
    if method is None:
        return True, True
    m = method.upper()
    if m not in ("CL", "GL", "HL"):
        raise ValueError(f"unknown method {method!r}")
    return m in ("GL", "HL"), m in ("CL", "HL")


def count_params(config: ModelConfig, method: Optional[str] = None) -> int:
    """Exact trainable-scalar count, derived from the config alone."""
    c = config
    decoder, projection = heads_for(method)

    def block(d):
        h = c.mlp_ratio * d
        return 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)

    n = N_LEADS * c.patch * c.dim + c.dim
    n += c.depth * block(c.dim) + 2 * c.dim
    if decoder:
        dd = c.decoder_dim
        n += c.dim * dd + dd + dd
        n += c.decoder_depth * block(dd) + 2 * dd
        n += dd * c.patch_values + c.patch_values
    if projection:
        n += c.dim * c.dim + c.dim + c.dim * c.proj_dim + c.proj_dim
    return n
