"""A miniature latent-diffusion backend for desk-scale verification.

The denoiser is a two-block transformer over an 8x8x4 latent with real
self- and cross-attention layers (the adapter targets and the surface the
attention controller hooks into).  Weight magnitudes are kept small so the
noise prediction is a smooth function of the latent; that keeps few-step
deterministic inversion accurate, which the fixture tests rely on.

Everything is CPU float32 and seeded: constructing twice with the same seed
gives bit-identical behaviour.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Optional

import torch
from torch import nn

from .. import sched
from ..adapt import AdapterWeights, LoraLinear
from ..errors import AdapterStateError, ValidationError
from ..imageio import to_float_batch
from .tokenizer import MAX_TOKENS, ToyTokenizer

LATENT_CHANNELS = 4
LATENT_SIZE = 8
IMAGE_SIZE = 32
D_MODEL = 32
N_HEADS = 2


class _Attention(nn.Module):
    """Multi-head attention whose probability maps pass through a controller."""

    def __init__(self, name: str, is_cross: bool, d_model: int = D_MODEL, heads: int = N_HEADS):
        super().__init__()
        self.name = name
        self.is_cross = is_cross
        self.heads = heads
        self.d_head = d_model // heads
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_model, d_model, bias=False)
        self.to_v = nn.Linear(d_model, d_model, bias=False)
        self.to_out = nn.Linear(d_model, d_model, bias=False)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor], controller) -> torch.Tensor:
        ctx = x if context is None else context
        b, n, _ = x.shape
        m = ctx.shape[1]
        q = self.to_q(x).view(b, n, self.heads, self.d_head).transpose(1, 2)
        k = self.to_k(ctx).view(b, m, self.heads, self.d_head).transpose(1, 2)
        v = self.to_v(ctx).view(b, m, self.heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        probs = scores.softmax(dim=-1)
        if controller is not None:
            probs = controller.on_attention(probs, is_cross=self.is_cross, layer=self.name)
        out = (probs @ v).transpose(1, 2).reshape(b, n, self.heads * self.d_head)
        return self.to_out(out)


class _Block(nn.Module):
    def __init__(self, index: int):
        super().__init__()
        self.self_attn = _Attention(f"block{index}.self_attn", is_cross=False)
        self.cross_attn = _Attention(f"block{index}.cross_attn", is_cross=True)
        self.norm1 = nn.LayerNorm(D_MODEL)
        self.norm2 = nn.LayerNorm(D_MODEL)
        self.norm3 = nn.LayerNorm(D_MODEL)
        self.mlp = nn.Sequential(nn.Linear(D_MODEL, D_MODEL * 2), nn.GELU(), nn.Linear(D_MODEL * 2, D_MODEL))

    def forward(self, x, text, controller):
        x = x + self.self_attn(self.norm1(x), None, controller)
        x = x + self.cross_attn(self.norm2(x), text, controller)
        x = x + self.mlp(self.norm3(x))
        return x


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=1)


class _TinyDenoiser(nn.Module):
    def __init__(self, out_scale: float = 0.05):
        super().__init__()
        self.patch_in = nn.Linear(LATENT_CHANNELS, D_MODEL)
        self.time_mlp = nn.Sequential(nn.Linear(D_MODEL, D_MODEL), nn.SiLU(), nn.Linear(D_MODEL, D_MODEL))
        self.blocks = nn.ModuleList([_Block(0), _Block(1)])
        self.patch_out = nn.Linear(D_MODEL, LATENT_CHANNELS)
        self.out_scale = out_scale

    def forward(self, latent, t, text, controller=None):
        b, c, h, w = latent.shape
        x = latent.permute(0, 2, 3, 1).reshape(b, h * w, c)
        x = self.patch_in(x)
        x = x + self.time_mlp(_timestep_embedding(t, D_MODEL))[:, None, :]
        for block in self.blocks:
            x = block(x, text, controller)
        eps = self.patch_out(x) * self.out_scale
        return eps.reshape(b, h, w, c).permute(0, 3, 1, 2)


class TinyBackend(nn.Module):
    """Deterministic fixture implementation of the denoiser backend contract."""

    image_size = IMAGE_SIZE

    def __init__(self, seed: int = 0, num_train_timesteps: int = 1000):
        super().__init__()
        self.seed = seed
        self.tokenizer = ToyTokenizer()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.denoiser = _TinyDenoiser()
        with torch.no_grad():
            for p in self.denoiser.parameters():
                p.mul_(0.5)
        self.schedule = sched.linear_schedule(num_train_timesteps)
        # Frozen token-embedding table; per-token overrides hold any trained
        # identity embeddings.
        table = torch.randn(self.tokenizer.vocab_size, D_MODEL, generator=torch.Generator().manual_seed(seed + 1))
        self.register_buffer("_embedding_table", table / math.sqrt(D_MODEL))
        pos = torch.randn(MAX_TOKENS, D_MODEL, generator=torch.Generator().manual_seed(seed + 2))
        self.register_buffer("_positional", pos / math.sqrt(D_MODEL))
        self._token_overrides: dict[int, torch.Tensor] = {}
        self._controller = None
        self._attached: "OrderedDict[str, LoraLinear]" = OrderedDict()

    # -- images <-> latents -------------------------------------------------

    def encode_image(self, image) -> torch.Tensor:
        """Average-pool an RGB image into a (1, 4, 8, 8) latent in [-1, 1]."""
        x = to_float_batch(image)
        if x.shape[-1] != IMAGE_SIZE or x.shape[-2] != IMAGE_SIZE:
            raise ValidationError(
                f"expected {IMAGE_SIZE}x{IMAGE_SIZE} input, got {tuple(x.shape[-2:])}"
            )
        pooled = torch.nn.functional.avg_pool2d(x, IMAGE_SIZE // LATENT_SIZE)
        luma = pooled.mean(dim=1, keepdim=True)
        latent = torch.cat([pooled, luma], dim=1)
        return latent * 2.0 - 1.0

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Invert the channel map and upsample; returns (B, 3, H, W) in [0, 1]."""
        rgb = (latent[:, :3] + 1.0) / 2.0
        return torch.nn.functional.interpolate(rgb, scale_factor=IMAGE_SIZE // LATENT_SIZE, mode="nearest").clamp(0.0, 1.0)

    # -- text ----------------------------------------------------------------

    def text_embed(self, prompt: str) -> torch.Tensor:
        ids = self.tokenizer.encode(prompt) if prompt else []
        if len(ids) > MAX_TOKENS:
            raise ValidationError(f"prompt tokenizes to {len(ids)} > {MAX_TOKENS} tokens: {prompt!r}")
        rows = []
        for tid in ids:
            override = self._token_overrides.get(tid)
            rows.append(override if override is not None else self._embedding_table[tid])
        while len(rows) < MAX_TOKENS:
            rows.append(self._embedding_table[self.tokenizer.pad_id])
        emb = torch.stack(rows) + self._positional
        return emb.unsqueeze(0)

    def trainable_token_embedding(self, token: str) -> nn.Parameter:
        """Expose one token's embedding as a trainable override parameter."""
        ids = self.tokenizer.encode(token)
        # A multi-piece token trains its first piece; enough for fixtures.
        tid = ids[0]
        if tid not in self._token_overrides or not isinstance(self._token_overrides[tid], nn.Parameter):
            param = nn.Parameter(self._embedding_table[tid].detach().clone())
            self._token_overrides[tid] = param
        return self._token_overrides[tid]

    def set_token_embedding(self, token: str, embedding: torch.Tensor) -> None:
        tid = self.tokenizer.encode(token)[0]
        self._token_overrides[tid] = embedding.detach().clone()

    # -- denoising -----------------------------------------------------------

    def predict_noise(self, latent, timestep, text_embedding) -> torch.Tensor:
        if isinstance(timestep, int):
            t = torch.full((latent.shape[0],), timestep, dtype=torch.long)
        else:
            t = timestep.to(torch.long)
        return self.denoiser(latent, t, text_embedding, self._controller)

    # -- adapters ------------------------------------------------------------

    def lora_target_layers(self) -> "OrderedDict[str, nn.Linear]":
        out: "OrderedDict[str, nn.Linear]" = OrderedDict()
        for i, block in enumerate(self.denoiser.blocks):
            for attn_name, attn in (("self_attn", block.self_attn), ("cross_attn", block.cross_attn)):
                for proj in ("to_q", "to_k", "to_v", "to_out"):
                    out[f"block{i}.{attn_name}.{proj}"] = getattr(attn, proj)
        return out

    def attach(self, adapters: AdapterWeights) -> None:
        if self._attached:
            raise AdapterStateError("adapters already attached; detach first")
        available = self.lora_target_layers()
        for name, pair in adapters.layers.items():
            if name not in available:
                raise AdapterStateError(f"unknown adapter target {name!r}")
            base = available[name]
            if pair.A.shape[0] != base.weight.shape[0] or pair.B.shape[1] != base.weight.shape[1]:
                raise AdapterStateError(
                    f"layer {name!r}: adapter shapes {tuple(pair.A.shape)}x{tuple(pair.B.shape)} "
                    f"do not match weight {tuple(base.weight.shape)}"
                )
            wrapped = LoraLinear(base, pair, adapters.scale)
            self._set_projection(name, wrapped)
            self._attached[name] = wrapped

    def detach(self) -> None:
        """Remove adapter wrappers, keeping whatever base weights now hold."""
        for name, module in self._attached.items():
            module.base.weight.requires_grad_(True)
            self._set_projection(name, module.base)
        self._attached = OrderedDict()

    def attached_lora_modules(self) -> "OrderedDict[str, LoraLinear]":
        return OrderedDict(self._attached)

    def _set_projection(self, name: str, module: nn.Module) -> None:
        block_name, attn_name, proj = name.split(".")
        block = self.denoiser.blocks[int(block_name.removeprefix("block"))]
        setattr(getattr(block, attn_name), proj, module)

    def base_parameters(self):
        for name, param in self.denoiser.named_parameters():
            if "lora_A" in name or "lora_B" in name:
                continue
            yield name, param

    def parameters(self, recurse: bool = True):
        return self.denoiser.parameters(recurse)

    # -- attention control ----------------------------------------------------

    def set_attention_controller(self, controller) -> None:
        self._controller = controller

    def clear_attention_controller(self) -> None:
        self._controller = None
