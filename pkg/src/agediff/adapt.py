"""Low-rank adapters and the personalization fine-tuning loop.

A frozen weight W is augmented with a trainable product dW = A @ B of rank
r << d.  At initialization B is zero, so an attached adapter leaves the base
model's behaviour untouched; merging materializes W + dW into the base
weight.  Fine-tuning mixes self-reference batches with regularization
batches and adds a contrastive identity term on face embeddings of one-step
denoised estimates.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import promptkit, sched
from .core import AgeLabeledManifest, IdentityProfile, PipelineConfig, validate_profile
from .errors import (
    AdapterStateError,
    ConfigurationError,
    TrainingDivergedError,
    ValidationError,
)
from .imageio import to_float_batch as to_float_image
from .regset import effective_age


class DenoiserBackend(Protocol):
    """Contract a latent-diffusion backend must satisfy.

    ``predict_noise`` must route attention probabilities through the
    attention controller installed via ``set_attention_controller`` so that
    editing can swap maps; with no controller installed, or with adapters
    detached or zero-initialized, it must equal the base model's prediction.
    """

    schedule: sched.DiffusionSchedule

    def encode_image(self, image) -> torch.Tensor: ...

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor: ...

    def predict_noise(self, latent, timestep, text_embedding) -> torch.Tensor: ...

    def text_embed(self, prompt: str) -> torch.Tensor: ...

    def attach(self, adapters: "AdapterWeights") -> None: ...

    def detach(self) -> None: ...

    def lora_target_layers(self) -> "OrderedDict[str, nn.Linear]": ...

    def attached_lora_modules(self) -> "OrderedDict[str, LoraLinear]": ...

    def base_parameters(self) -> Iterable[tuple[str, torch.Tensor]]: ...

    def set_attention_controller(self, controller) -> None: ...

    def clear_attention_controller(self) -> None: ...


class FaceEmbedder(Protocol):
    """Maps a face image to a unit-norm feature vector."""

    def embed(self, image) -> torch.Tensor: ...


@dataclass
class LoraPair:
    """One layer's low-rank factors: dW = A @ B, A: (d_out, r), B: (r, d_in)."""

    A: torch.Tensor
    B: torch.Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> torch.Tensor:
        return self.A @ self.B


@dataclass
class AdapterWeights:
    """Per-layer low-rank pairs plus their shared rank and scale."""

    layers: "OrderedDict[str, LoraPair]"
    rank: int
    scale: float = 1.0

    def clone_detached(self) -> "AdapterWeights":
        layers = OrderedDict(
            (name, LoraPair(p.A.detach().clone(), p.B.detach().clone()))
            for name, p in self.layers.items()
        )
        return AdapterWeights(layers=layers, rank=self.rank, scale=self.scale)


class LoraLinear(nn.Module):
    """A frozen Linear plus a trainable low-rank bypass.

    ``merged`` means dW has been folded into the base weight; the bypass is
    then skipped so the delta is not applied twice.
    """

    def __init__(self, base: nn.Linear, pair: LoraPair, scale: float):
        super().__init__()
        self.base = base
        self.lora_A = nn.Parameter(pair.A)
        self.lora_B = nn.Parameter(pair.B)
        self.scale = scale
        self.merged = False
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if not self.merged:
            out = out + self.scale * ((x @ self.lora_B.T) @ self.lora_A.T)
        return out

    def pair(self) -> LoraPair:
        return LoraPair(self.lora_A, self.lora_B)


def init_adapters(
    backend: DenoiserBackend,
    rank: int,
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
    scale: float = 1.0,
    init_std: float = 0.02,
) -> AdapterWeights:
    """Build zero-effect adapters for the backend's attention projections.

    A is random normal, B is zero, so A @ B vanishes and an attached backend
    behaves exactly like the base model until training moves B.
    """
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    available = backend.lora_target_layers()
    if targets is None:
        names = list(available.keys())
    else:
        names = list(targets)
        unknown = [n for n in names if n not in available]
        if unknown:
            raise ConfigurationError(f"unknown adapter target layers: {unknown}")
    gen = torch.Generator().manual_seed(seed)
    layers: "OrderedDict[str, LoraPair]" = OrderedDict()
    for name in names:
        weight = available[name].weight
        d_out, d_in = weight.shape
        if rank >= min(d_out, d_in):
            raise ConfigurationError(
                f"rank {rank} must be < layer dimension {min(d_out, d_in)} for {name!r}"
            )
        A = torch.empty(d_out, rank).normal_(mean=0.0, std=init_std, generator=gen)
        B = torch.zeros(rank, d_in)
        layers[name] = LoraPair(A, B)
    return AdapterWeights(layers=layers, rank=rank, scale=scale)


def merge(adapters: AdapterWeights, backend: DenoiserBackend) -> DenoiserBackend:
    """Fold each attached adapter's dW into its base weight, in place.

    After merging, the adapter bypass is disabled; detaching afterwards
    leaves the merged weights in the backend.  Merging twice without a
    detach in between is an error.
    """
    attached = backend.attached_lora_modules()
    if not attached:
        raise AdapterStateError("no adapters attached; call backend.attach first")
    for name in adapters.layers:
        if name not in attached:
            raise AdapterStateError(f"adapter layer {name!r} is not attached")
    with torch.no_grad():
        for name, module in attached.items():
            if module.merged:
                raise AdapterStateError(f"layer {name!r} already merged; detach first")
            delta = module.scale * (module.lora_A @ module.lora_B)
            if delta.shape != module.base.weight.shape:
                raise AdapterStateError(
                    f"layer {name!r}: delta shape {tuple(delta.shape)} does not match "
                    f"weight shape {tuple(module.base.weight.shape)}"
                )
        for module in attached.values():
            module.base.weight += module.scale * (module.lora_A @ module.lora_B)
            module.merged = True
    return backend


# ---------------------------------------------------------------------------
# NT-Xent
# ---------------------------------------------------------------------------


def ntxent(
    embeddings: torch.Tensor | Sequence[torch.Tensor],
    positives: Iterable[tuple[int, int]],
    temperature: float,
) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over cosine similarities.

    Mean over positive pairs (i, j) of
    -log( exp(sim(z_i, z_j)/t) / sum_{k != i} exp(sim(z_i, z_k)/t) ).
    Returns a scalar tensor (zero for an empty pair set).
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    if not isinstance(embeddings, torch.Tensor):
        embeddings = torch.stack(list(embeddings))
    pairs = list(positives)
    if not pairs:
        return torch.zeros((), dtype=embeddings.dtype)
    n = embeddings.shape[0]
    z = torch.nn.functional.normalize(embeddings, dim=1)
    sim = (z @ z.T) / temperature
    # exclude self-similarity from each row's normalizer
    mask = torch.eye(n, dtype=torch.bool)
    sim_masked = sim.masked_fill(mask, float("-inf"))
    log_norm = torch.logsumexp(sim_masked, dim=1)
    losses = []
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValidationError(f"invalid positive pair ({i}, {j}) for {n} embeddings")
        losses.append(log_norm[i] - sim[i, j])
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    adapters: AdapterWeights
    token_text: str
    token_embedding: Optional[torch.Tensor]
    log: list[dict] = field(default_factory=list)


def _default_loader(image_size: int) -> Callable[[str], np.ndarray]:
    from .imageio import load_image

    def load(path: str) -> np.ndarray:
        return load_image(path, size=image_size)

    return load


def finetune(
    profile: IdentityProfile,
    regset: AgeLabeledManifest,
    config: PipelineConfig,
    backend: DenoiserBackend,
    embedder: FaceEmbedder,
    seed: int = 0,
    image_loader: Optional[Callable[[str], np.ndarray]] = None,
    noise_sampler: Optional[Callable[..., torch.Tensor]] = None,
) -> FinetuneResult:
    """Personalize the backend on self-reference plus regularization images.

    Each step draws roughly half the batch from the profile's references
    (their own prompt and age) and half from the regularization set, then
    minimizes  rec_ref + lambda_reg * rec_reg + lambda_id * ntxent.  Only
    adapter parameters and the identity token's embedding are optimized
    unless ``use_lora`` is off, in which case every backend weight trains.
    """
    violations = validate_profile(profile)
    if violations:
        raise ValidationError("; ".join(str(v) for v in violations))
    if len(regset) == 0:
        raise ConfigurationError("regularization set is empty")

    loader = image_loader or _default_loader(config.image_size)
    gen = torch.Generator().manual_seed(seed)
    noise_sampler = noise_sampler or (lambda shape, generator: torch.randn(shape, generator=generator))
    schedule = backend.schedule

    adapters: Optional[AdapterWeights] = None
    if config.use_lora:
        adapters = init_adapters(backend, rank=config.lora_rank, seed=seed)
        backend.attach(adapters)
        params = [m.lora_A for m in backend.attached_lora_modules().values()]
        params += [m.lora_B for m in backend.attached_lora_modules().values()]
    else:
        params = [p for p in backend.parameters()]
        for p in params:
            p.requires_grad_(True)

    token_param = None
    if hasattr(backend, "trainable_token_embedding"):
        token_param = backend.trainable_token_embedding(profile.token)
        if token_param is not None:
            params.append(token_param)

    optimizer = torch.optim.AdamW(params, lr=config.learning_rate)

    # Pre-compute prompts/latents for every image once; the sets are small.
    ref_items = []
    for ref in profile.references:
        prompt = promptkit.ref_prompt(
            profile.token, ref.age, config.use_hyphenated_age, config.use_ref_age
        )
        image = loader(ref.image_ref)
        ref_items.append((backend.encode_image(image), prompt, to_float_image(image)))
    reg_items = []
    for entry in regset:
        age = effective_age(entry, use_refined=config.use_refined_regset)
        prompt = promptkit.reg_prompt(age, config.use_hyphenated_age)
        image = loader(entry.image_ref)
        reg_items.append((backend.encode_image(image), prompt, to_float_image(image)))

    n_ref_per_batch = max(1, config.batch_size // 2)
    n_reg_per_batch = max(0, config.batch_size - n_ref_per_batch)

    log: list[dict] = []
    for step in range(config.iterations):
        # batch_size 1 alternates between the two supervision sources
        if config.batch_size == 1:
            take_ref = step % 2 == 0 or not reg_items
            n_ref, n_reg = (1, 0) if take_ref else (0, 1)
        else:
            n_ref, n_reg = n_ref_per_batch, n_reg_per_batch

        batch_latents, batch_prompts, batch_images, ref_slots = [], [], [], []
        for _ in range(n_ref):
            idx = int(torch.randint(len(ref_items), (1,), generator=gen))
            latent, prompt, image = ref_items[idx]
            ref_slots.append((len(batch_latents), idx))
            batch_latents.append(latent)
            batch_prompts.append(prompt)
            batch_images.append(image)
        reg_slots = []
        for _ in range(n_reg):
            idx = int(torch.randint(len(reg_items), (1,), generator=gen))
            latent, prompt, image = reg_items[idx]
            reg_slots.append((len(batch_latents), idx))
            batch_latents.append(latent)
            batch_prompts.append(prompt)
            batch_images.append(image)

        z0 = torch.cat(batch_latents, dim=0)
        t = torch.randint(schedule.num_train_timesteps, (z0.shape[0],), generator=gen)
        noise = noise_sampler(z0.shape, generator=gen)
        z_t = sched.add_noise(schedule, z0, noise, t)
        text = torch.cat([backend.text_embed(p) for p in batch_prompts], dim=0)

        noise_pred = backend.predict_noise(z_t, t, text)

        ref_rows = [slot for slot, _ in ref_slots]
        reg_rows = [slot for slot, _ in reg_slots]
        rec_ref = (
            ((noise_pred[ref_rows] - noise[ref_rows]) ** 2).mean()
            if ref_rows else torch.zeros(())
        )
        rec_reg = (
            ((noise_pred[reg_rows] - noise[reg_rows]) ** 2).mean()
            if reg_rows else torch.zeros(())
        )

        id_loss = torch.zeros(())
        if config.lambda_id != 0.0 and ref_rows:
            # Contrastive term on the one-step denoised estimates, decoded to
            # pixel space: positives pair each generated estimate with its
            # real self-reference image; in-batch regularization images are
            # the negatives.
            clean_est = sched.predict_clean(schedule, z_t, noise_pred, t)
            generated = backend.decode_latent(clean_est[ref_rows])
            gen_emb = embedder.embed(generated)
            with torch.no_grad():
                ref_emb = embedder.embed(torch.cat([batch_images[r] for r in ref_rows], dim=0))
                neg_emb = (
                    embedder.embed(torch.cat([batch_images[r] for r in reg_rows], dim=0))
                    if reg_rows else None
                )
            parts = [gen_emb, ref_emb] + ([neg_emb] if neg_emb is not None else [])
            embeddings = torch.cat(parts, dim=0)
            pairs = [(i, len(gen_emb) + i) for i in range(len(gen_emb))]
            id_loss = ntxent(embeddings, pairs, config.ntxent_temperature)

        loss = rec_ref + config.lambda_reg * rec_reg + config.lambda_id * id_loss
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)

        if loss.requires_grad:
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

        log.append(
            {
                "step": step,
                "loss": float(loss.detach()),
                "rec_ref": float(rec_ref.detach()),
                "rec_reg": float(rec_reg.detach()),
                "ntxent": float(id_loss.detach()),
            }
        )

    if config.use_lora:
        result_adapters = AdapterWeights(
            layers=OrderedDict(
                (name, module.pair()) for name, module in backend.attached_lora_modules().items()
            ),
            rank=config.lora_rank,
            scale=adapters.scale,
        ).clone_detached()
        backend.detach()
    else:
        result_adapters = AdapterWeights(layers=OrderedDict(), rank=config.lora_rank)

    token_embedding = token_param.detach().clone() if token_param is not None else None
    return FinetuneResult(
        adapters=result_adapters,
        token_text=profile.token,
        token_embedding=token_embedding,
        log=log,
    )


# ---------------------------------------------------------------------------
# Checkpointing and fingerprints
# ---------------------------------------------------------------------------


def base_weights_fingerprint(backend: DenoiserBackend) -> str:
    """SHA-256 over every base (non-adapter) weight, stable across calls."""
    h = hashlib.sha256()
    for name, tensor in backend.base_parameters():
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_adapters(
    result: FinetuneResult,
    out_dir: str | Path,
    config_hash: str = "",
    extra_meta: Optional[dict] = None,
) -> Path:
    """Write per-layer A/B tensors plus a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = list(result.adapters.layers.keys())
    for name, pair in result.adapters.layers.items():
        safe = name.replace("/", "_")
        np.save(out / f"{safe}.A.npy", pair.A.detach().cpu().numpy())
        np.save(out / f"{safe}.B.npy", pair.B.detach().cpu().numpy())
    if result.token_embedding is not None:
        np.save(out / "token_embedding.npy", result.token_embedding.cpu().numpy())
    manifest = {
        "rank": result.adapters.rank,
        "scale": result.adapters.scale,
        "targets": targets,
        "config_hash": config_hash,
        "token": result.token_text,
        "has_token_embedding": result.token_embedding is not None,
    }
    if extra_meta:
        manifest.update(extra_meta)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def load_adapters(adapter_dir: str | Path) -> FinetuneResult:
    adir = Path(adapter_dir)
    manifest = json.loads((adir / "manifest.json").read_text(encoding="utf-8"))
    layers: "OrderedDict[str, LoraPair]" = OrderedDict()
    for name in manifest["targets"]:
        safe = name.replace("/", "_")
        A = torch.from_numpy(np.load(adir / f"{safe}.A.npy"))
        B = torch.from_numpy(np.load(adir / f"{safe}.B.npy"))
        layers[name] = LoraPair(A, B)
    token_embedding = None
    if manifest.get("has_token_embedding"):
        token_embedding = torch.from_numpy(np.load(adir / "token_embedding.npy"))
    adapters = AdapterWeights(layers=layers, rank=manifest["rank"], scale=manifest["scale"])
    return FinetuneResult(
        adapters=adapters,
        token_text=manifest["token"],
        token_embedding=token_embedding,
        log=[],
    )
