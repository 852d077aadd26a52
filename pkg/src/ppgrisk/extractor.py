"""Miniature GPT-style causal transformer over 1 s patches of PPG.

Pretraining objective: predict the next patch (MSE, teacher forced). The
per-chunk feature is the hidden state of the last position of the final
layer, taken after the final normalization. Chunks are z-scored with their
own mean/std (std floor 1e-6), so all-zero gap chunks map to all-zero inputs.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericError
from .segmentation import CHUNK_SAMPLES, PATCH_SAMPLES, PATCHES_PER_CHUNK

STD_FLOOR = 1e-6

# Desk-scale stand-ins for the 19M..1B ladder; tags name the rough param count.
SIZE_PRESETS = {
    "tiny-0.05M": dict(n_layers=3, d_model=32, n_heads=4, d_ff=128),
    "small-0.2M": dict(n_layers=4, d_model=64, n_heads=4, d_ff=256),
    "base-0.8M": dict(n_layers=4, d_model=128, n_heads=8, d_ff=512),
}


@dataclass
class ExtractorConfig:
    n_layers: int = 3
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    patch_size: int = PATCH_SAMPLES
    context_patches: int = PATCHES_PER_CHUNK
    dropout: float = 0.0
    size_tag: str = "tiny-0.05M"

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.patch_size != PATCH_SAMPLES or self.context_patches != PATCHES_PER_CHUNK:
            raise ConfigError(f"patch layout is fixed at {PATCHES_PER_CHUNK}x{PATCH_SAMPLES}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")

    @classmethod
    def from_size_tag(cls, tag: str, **overrides) -> "ExtractorConfig":
        if tag not in SIZE_PRESETS:
            raise ConfigError(f"unknown size tag {tag!r}; known: {sorted(SIZE_PRESETS)}")
        return cls(size_tag=tag, **{**SIZE_PRESETS[tag], **overrides})


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.d_head = config.d_model // config.n_heads
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        self.dropout = nn.Dropout(config.dropout)
        mask = torch.tril(torch.ones(config.context_patches, config.context_patches, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        att = att.masked_fill(~self.causal_mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.dropout(att)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU(),
            nn.Linear(config.d_ff, config.d_model),
            nn.Dropout(config.dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class PatchTransformer(nn.Module):
    """Pre-norm causal transformer: patches in, next-patch predictions and
    per-position hidden states out."""

    def __init__(self, config: ExtractorConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_in = nn.Linear(config.patch_size, config.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(config.context_patches, config.d_model))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.patch_out = nn.Linear(config.d_model, config.patch_size)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                module.weight.data = torch.normal(
                    0.0, 0.02, module.weight.shape, generator=gen)
                module.bias.data.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()
        self.pos_emb.data = torch.normal(0.0, 0.02, self.pos_emb.shape, generator=gen)

    def forward(self, patches: torch.Tensor):
        """patches: (B, 30, 40) -> hidden (B, 30, d_model), preds (B, 30, 40).

        Strictly causal: outputs at position t depend only on patches <= t.
        """
        if patches.ndim != 3 or patches.shape[1:] != (self.config.context_patches,
                                                      self.config.patch_size):
            raise DataError(f"expected (B, {self.config.context_patches}, "
                            f"{self.config.patch_size}), got {tuple(patches.shape)}")
        x = self.patch_in(patches) + self.pos_emb
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        preds = self.patch_out(hidden)
        return hidden, preds

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def standardize_chunks(chunks: np.ndarray) -> np.ndarray:
    """Per-chunk z-scoring, std floored at 1e-6. chunks: (..., 1200)."""
    chunks = np.asarray(chunks, dtype=np.float64)
    mean = chunks.mean(axis=-1, keepdims=True)
    std = chunks.std(axis=-1, keepdims=True)
    return (chunks - mean) / np.maximum(std, STD_FLOOR)


def chunks_to_patches(chunks: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Standardize raw chunks and reshape to (B, 30, 40) model input."""
    z = standardize_chunks(np.atleast_2d(chunks))
    return torch.as_tensor(z.reshape(-1, PATCHES_PER_CHUNK, PATCH_SAMPLES), dtype=dtype)


def next_patch_loss(preds: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
    """MSE between the prediction at position t and the true patch t+1,
    averaged over positions 0..28, batch, and patch samples."""
    return F.mse_loss(preds[:, :-1, :], patches[:, 1:, :])


def copy_last_patch_baseline(patches: torch.Tensor) -> float:
    """MSE of predicting patch t+1 as a copy of patch t, same averaging."""
    with torch.no_grad():
        return F.mse_loss(patches[:, :-1, :], patches[:, 1:, :]).item()


def pretrain_step(model: PatchTransformer, patches: torch.Tensor, optimizer) -> float:
    """One optimizer step of next-patch training; returns the scalar loss."""
    model.train()
    _, preds = model(patches)
    loss = next_patch_loss(preds, patches)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite pretraining loss: {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.inference_mode()
def embed_chunk(model: PatchTransformer, chunk_samples: np.ndarray) -> np.ndarray:
    """Feature of one 30 s chunk: final-layer hidden state at the last
    position, post final normalization."""
    model.eval()
    patches = chunks_to_patches(chunk_samples, dtype=next(model.parameters()).dtype)
    hidden, _ = model(patches)
    return hidden[:, -1, :].cpu().numpy()[0]


@torch.inference_mode()
def embed_chunks(model: PatchTransformer, chunks: np.ndarray,
                 batch_size: int = 2048) -> np.ndarray:
    """Embed (L, 1200) chunks independently -> (L, d_model) float32."""
    chunks = np.atleast_2d(np.asarray(chunks))
    if chunks.shape[0] == 0:
        raise DataError("empty window: no chunks to embed")
    model.eval()
    dtype = next(model.parameters()).dtype
    out = np.empty((chunks.shape[0], model.config.d_model), dtype=np.float32)
    for i in range(0, chunks.shape[0], batch_size):
        patches = chunks_to_patches(chunks[i:i + batch_size], dtype=dtype)
        hidden, _ = model(patches)
        out[i:i + patches.shape[0]] = hidden[:, -1, :].cpu().numpy().astype(np.float32)
    return out


def embed_window(model: PatchTransformer, window_samples: np.ndarray,
                 batch_size: int = 2048) -> np.ndarray:
    """Per-chunk embeddings of a window, temporal order, chunks independent."""
    from .segmentation import chunk_array
    return embed_chunks(model, chunk_array(window_samples), batch_size=batch_size)


# ---------------------------------------------------------------------------
# Checkpoint container: config JSON + named weight arrays + format version.
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def state_dict_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_extractor(model: PatchTransformer, path) -> None:
    arrays = {f"weight/{k}": v for k, v in state_dict_arrays(model).items()}
    np.savez(path,
             format_version=np.int64(CHECKPOINT_VERSION),
             config_json=np.bytes_(json.dumps(asdict(model.config))),
             **arrays)


def load_extractor(path) -> PatchTransformer:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        config = ExtractorConfig(**json.loads(bytes(data["config_json"]).decode()))
        model = PatchTransformer(config)
        state = {k[len("weight/"):]: torch.as_tensor(data[k])
                 for k in data.files if k.startswith("weight/")}
    model.load_state_dict(state)
    model.eval()
    return model


def weights_digest(module: nn.Module) -> str:
    """Stable content hash of all weights (order-independent by name)."""
    import hashlib
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(module.state_dict()):
        h.update(name.encode())
        h.update(module.state_dict()[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
