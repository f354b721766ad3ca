"""Model components for text-prompted nodule segmentation.

The image encoder (ViT-style) and the mask decoder (two-way cross-attention
plus an upscaling mask head) stay frozen; only the text prompt encoder,
including its learnable prefix tokens, trains. The decoder reads the first
prompt position as its mask token: that token's transformed embedding is
mapped to per-pixel weights over an upscaled hypercolumn (decoder features,
raw intensity, a constant, and normalized coordinates), which keeps a
thresholding solution reachable even from a randomly initialized frozen
backbone.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError

DEFAULT_PROMPT_SUITE = (
    "nodules",
    "nodule",
    "lung nodule",
    "LUNG NODULE",
    "Nodule",
    "segment nodule",
)

_KNOWN_WORDS = ("nodule", "nodules", "lung", "segment")
_HASH_BUCKETS = 28


def tokenize(text: str) -> list[int]:
    """Lowercase whitespace tokenizer over a tiny fixed vocabulary.

    Unknown words fall into stable CRC32 hash buckets so any prompt can be
    encoded without an external tokenizer.
    """
    words = text.lower().split()
    if not words:
        raise ValueError(f"prompt {text!r} tokenizes to an empty sequence")
    ids = []
    for word in words:
        if word in _KNOWN_WORDS:
            ids.append(_KNOWN_WORDS.index(word))
        else:
            ids.append(len(_KNOWN_WORDS) + zlib.crc32(word.encode()) % _HASH_BUCKETS)
    return ids


def vocab_size() -> int:
    return len(_KNOWN_WORDS) + _HASH_BUCKETS


@dataclass(frozen=True)
class SegModelConfig:
    """Architecture settings for the segmentation stage."""

    input_resolution: int = 64
    patch_size: int = 8
    image_embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    text_embed_dim: int = 32
    text_layers: int = 2
    num_heads: int = 4
    prefix_length: int = 8
    freeze_image_encoder: bool = True
    freeze_mask_decoder: bool = True

    def __post_init__(self):
        if self.input_resolution % self.patch_size != 0:
            raise ConfigError(
                f"input_resolution {self.input_resolution} must be a multiple of "
                f"patch_size {self.patch_size}"
            )
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size must be a power of two, got {self.patch_size}")
        if self.prefix_length < 0:
            raise ConfigError(f"prefix_length must be >= 0, got {self.prefix_length}")

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @classmethod
    def toy(cls, **overrides) -> "SegModelConfig":
        """Small random-init configuration for desk-scale runs and tests."""
        return cls(**overrides)

    @classmethod
    def paper(cls) -> "SegModelConfig":
        """Full-scale configuration: 12-layer ViT encoder, 2-layer decoder."""
        return cls(
            input_resolution=1024,
            patch_size=16,
            image_embed_dim=768,
            encoder_layers=12,
            decoder_layers=2,
            text_embed_dim=512,
            text_layers=12,
            num_heads=8,
            prefix_length=8,
        )


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    i = torch.arange(dim, dtype=torch.float32)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / dim)
    pe = torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return pe


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, 2 * dim)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    """Patch-embedding transformer producing a token grid per slice."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        d = config.image_embed_dim
        self.patch_embed = nn.Conv2d(1, d, kernel_size=config.patch_size, stride=config.patch_size)
        n_tokens = config.grid_size**2
        self.pos_embed = nn.Parameter(torch.randn(1, n_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(
            _EncoderBlock(d, config.num_heads) for _ in range(config.encoder_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) unit-interval slices -> (B, grid, grid, D) token grid."""
        if images.ndim != 3 or images.shape[-2:] != (self.config.input_resolution,) * 2:
            raise ConfigError(
                f"expected slices of shape (B, {self.config.input_resolution}, "
                f"{self.config.input_resolution}), got {tuple(images.shape)}"
            )
        x = self.patch_embed(images[:, None, :, :])
        b, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.reshape(b, gh, gw, d)


class TextPromptEncoder(nn.Module):
    """Trainable prompt pathway: prefix tokens, text transformer, projection."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        d = config.text_embed_dim
        self.token_embed = nn.Embedding(vocab_size(), d)
        self.prefix = nn.Parameter(torch.randn(config.prefix_length, d) * 0.02)
        self.blocks = nn.ModuleList(
            _EncoderBlock(d, min(config.num_heads, d)) for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.image_embed_dim)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(L,) token ids -> (prefix_length + L, image_embed_dim) features."""
        if token_ids.numel() == 0:
            raise ValueError("token sequence is empty")
        embeds = self.token_embed(token_ids)
        x = torch.cat([self.prefix, embeds], dim=0)
        x = x + sinusoidal_positions(x.shape[0], x.shape[1]).to(x.dtype)
        x = x[None]
        for block in self.blocks:
            x = block(x)
        return self.out_proj(self.norm(x[0]))


class _TwoWayBlock(nn.Module):
    """Prompt self-attention plus bidirectional prompt/image cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_p2i = nn.LayerNorm(dim)
        self.cross_p2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, 2 * dim)
        self.norm_i2p = nn.LayerNorm(dim)
        self.cross_i2p = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, prompt, image):
        h = self.norm_self(prompt)
        prompt = prompt + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.norm_p2i(prompt)
        prompt = prompt + self.cross_p2i(h, image, image, need_weights=False)[0]
        prompt = prompt + self.mlp(self.norm_mlp(prompt))
        h = self.norm_i2p(image)
        image = image + self.cross_i2p(h, prompt, prompt, need_weights=False)[0]
        return prompt, image


class MaskDecoder(nn.Module):
    """Cross-attention decoder emitting a per-pixel probability map."""

    # Extra hypercolumn channels: raw intensity, constant, y, x.
    EXTRA_CHANNELS = 4

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        d = config.image_embed_dim
        self.blocks = nn.ModuleList(
            _TwoWayBlock(d, config.num_heads) for _ in range(config.decoder_layers)
        )
        ups = []
        chans = d
        for _ in range(int(math.log2(config.patch_size))):
            out = max(chans // 2, 16)
            ups.append(nn.ConvTranspose2d(chans, out, kernel_size=2, stride=2))
            ups.append(nn.GELU())
            chans = out
        ups.pop()  # no activation after the last upscale
        self.upscale = nn.Sequential(*ups)
        self.pixel_channels = chans + self.EXTRA_CHANNELS
        self.mask_head = nn.Linear(d, self.pixel_channels)
        nn.init.normal_(self.mask_head.weight, std=0.02)
        nn.init.zeros_(self.mask_head.bias)

    def forward(self, tokens: torch.Tensor, prompt: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """Token grid (B,g,g,D) + prompt (B,L,D) + slices (B,H,W) -> probs (B,H,W)."""
        if tokens.shape[-1] != self.config.image_embed_dim or prompt.shape[-1] != tokens.shape[-1]:
            raise ConfigError(
                f"embedding dims disagree: image {tokens.shape[-1]}, prompt {prompt.shape[-1]}"
            )
        b, gh, gw, d = tokens.shape
        image = tokens.reshape(b, gh * gw, d)
        for block in self.blocks:
            prompt, image = block(prompt, image)
        feat = image.transpose(1, 2).reshape(b, d, gh, gw)
        feat = self.upscale(feat)
        h, w = feat.shape[-2:]
        ys = torch.linspace(-1.0, 1.0, h, dtype=feat.dtype)[None, None, :, None].expand(b, 1, h, w)
        xs = torch.linspace(-1.0, 1.0, w, dtype=feat.dtype)[None, None, None, :].expand(b, 1, h, w)
        ones = torch.ones(b, 1, h, w, dtype=feat.dtype)
        hyper = torch.cat([feat, pixels[:, None, :, :].to(feat.dtype), ones, ys, xs], dim=1)
        weights = self.mask_head(prompt[:, 0, :])
        logits = torch.einsum("bchw,bc->bhw", hyper, weights)
        return torch.sigmoid(logits)


def parameter_checksum(module: nn.Module) -> str:
    """Stable digest over all parameters and buffers, by name."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def state_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def arrays_to_state(arrays: dict, prefix: str) -> dict[str, torch.Tensor]:
    skip = len(prefix) + 1
    return {
        key[skip:]: torch.as_tensor(value)
        for key, value in arrays.items()
        if key.startswith(f"{prefix}/")
    }


def config_to_dict(config: SegModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> SegModelConfig:
    return SegModelConfig(**d)
