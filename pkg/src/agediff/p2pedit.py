"""Attention-controlled editing: replay the source trajectory, transplant its
attention into the target trajectory at the designated token positions.

Both trajectories start from the same inverted latent and share the
optimized null embeddings.  For an initial fraction of steps the target's
cross-attention columns at the replacement spans are overwritten with the
source's aligned columns (all other positions keep the target's own
attention); optionally the target's self-attention maps are injected from
the source for an initial fraction as well.
"""
from __future__ import annotations

from typing import Optional

import torch

from . import invert, promptkit, sched
from .core import EditRequest, EditResult, IdentityProfile, PipelineConfig
from .errors import StageError, ValidationError
from .imageio import to_uint8


class AttentionController:
    """Per-edit state driving cross/self attention replacement.

    The backend calls :meth:`on_attention` with post-softmax probability
    maps.  During the source pass the maps are cached per (step, layer);
    during the target pass they are consumed.  Control applies to the
    conditional forward passes only.
    """

    def __init__(
        self,
        spans_in: tuple[int, ...],
        spans_tar: tuple[int, ...],
        alignment: tuple[tuple[int, int], ...],
        total_steps: int,
        cross_replace_fraction: float = 0.8,
        self_replace_fraction: float = 0.4,
        inject_self_attention: bool = True,
        record_maps: bool = False,
    ):
        for name, value in (("cross_replace_fraction", cross_replace_fraction),
                            ("self_replace_fraction", self_replace_fraction)):
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        self.spans_in = tuple(spans_in)
        self.spans_tar = tuple(spans_tar)
        self.alignment = tuple(alignment)
        self.total_steps = total_steps
        self.cross_replace_fraction = cross_replace_fraction
        self.self_replace_fraction = self_replace_fraction
        self.inject_self_attention = inject_self_attention
        self.record_maps = record_maps
        self.records: list[dict] = []
        self._step = -1
        self._pass: Optional[str] = None
        self._cache: dict[str, torch.Tensor] = {}

    # -- wiring used by the sampling loop -------------------------------------

    def begin_step(self, step: int) -> None:
        self._step = step
        self._cache = {}

    def set_pass(self, role: Optional[str]) -> None:
        if role not in (None, "source", "target"):
            raise ValidationError(f"unknown pass role {role!r}")
        self._pass = role

    # -- schedule helpers ------------------------------------------------------

    def _within(self, fraction: float) -> bool:
        return self._step < fraction * self.total_steps

    def replace_cross_now(self) -> bool:
        return self._within(self.cross_replace_fraction)

    def replace_self_now(self) -> bool:
        return self.inject_self_attention and self._within(self.self_replace_fraction)

    # -- the hook ---------------------------------------------------------------

    def on_attention(self, probs: torch.Tensor, is_cross: bool, layer: str) -> torch.Tensor:
        if self._pass == "source":
            self._cache[("cross" if is_cross else "self", layer)] = probs.detach().clone()
            return probs
        if self._pass != "target":
            return probs
        key = ("cross" if is_cross else "self", layer)
        cached = self._cache.get(key)
        if cached is None:
            raise ValidationError(f"no cached source attention for {key}; run the source pass first")
        if is_cross:
            if not self.replace_cross_now():
                return probs
            out = probs.clone()
            max_pos = probs.shape[-1]
            for tar_pos, src_pos in self.alignment:
                if tar_pos >= max_pos or src_pos >= cached.shape[-1]:
                    raise ValidationError(
                        f"replacement position ({tar_pos}, {src_pos}) outside attention width {max_pos}"
                    )
                out[..., tar_pos] = cached[..., src_pos]
            if self.record_maps:
                self.records.append(
                    {
                        "step": self._step,
                        "layer": layer,
                        "kind": "cross",
                        "positions": [t for t, _ in self.alignment],
                        "before": probs.detach().clone(),
                        "after": out.detach().clone(),
                    }
                )
            return out
        if not self.replace_self_now():
            return probs
        if self.record_maps:
            self.records.append(
                {"step": self._step, "layer": layer, "kind": "self",
                 "before": probs.detach().clone(), "after": cached.clone()}
            )
        return cached.clone()


def controller_from_bundle(
    bundle: promptkit.PromptBundle,
    total_steps: int,
    config: PipelineConfig,
    record_maps: bool = False,
) -> AttentionController:
    if bundle.replace_spans_in is None or bundle.alignment is None:
        raise ValidationError("bundle has no spans; call promptkit.resolve_bundle first")
    return AttentionController(
        spans_in=bundle.replace_spans_in,
        spans_tar=bundle.replace_spans_tar,
        alignment=bundle.alignment,
        total_steps=total_steps,
        cross_replace_fraction=config.cross_replace_fraction,
        self_replace_fraction=config.self_replace_fraction,
        inject_self_attention=config.inject_self_attention,
        record_maps=record_maps,
    )


def edit(
    inversion: invert.InversionResult,
    bundle: promptkit.PromptBundle,
    controller: AttentionController,
    backend,
) -> tuple[torch.Tensor, dict]:
    """Run the paired source/target trajectories and decode the edit.

    Returns the decoded target image tensor plus diagnostics (per-step
    replacement activity and any recorded maps).
    """
    if bundle.p_in != inversion.source_prompt:
        raise ValidationError(
            f"bundle input prompt {bundle.p_in!r} does not match inversion prompt "
            f"{inversion.source_prompt!r}"
        )
    if not inversion.null_embeddings:
        raise ValidationError("inversion has no null embeddings")
    schedule = backend.schedule
    steps = inversion.steps
    timesteps = sched.inference_timesteps(schedule, steps)
    spacing = sched.timestep_spacing(schedule, steps)
    cond_in = backend.text_embed(bundle.p_in)
    cond_tar = backend.text_embed(bundle.p_tar)
    guidance = inversion.guidance

    z_src = inversion.z_T
    z_tar = inversion.z_T
    activity = []
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            controller.begin_step(i)
            null = inversion.null_embeddings[i]

            eps_uncond_src = backend.predict_noise(z_src, t, null)
            controller.set_pass("source")
            backend.set_attention_controller(controller)
            try:
                eps_cond_src = backend.predict_noise(z_src, t, cond_in)
            finally:
                backend.clear_attention_controller()
                controller.set_pass(None)
            eps_src = eps_uncond_src + guidance * (eps_cond_src - eps_uncond_src)
            z_src = sched.denoise_step(schedule, eps_src, t, t - spacing, z_src)

            eps_uncond_tar = backend.predict_noise(z_tar, t, null)
            controller.set_pass("target")
            backend.set_attention_controller(controller)
            try:
                eps_cond_tar = backend.predict_noise(z_tar, t, cond_tar)
            finally:
                backend.clear_attention_controller()
                controller.set_pass(None)
            eps_tar = eps_uncond_tar + guidance * (eps_cond_tar - eps_uncond_tar)
            z_tar = sched.denoise_step(schedule, eps_tar, t, t - spacing, z_tar)

            activity.append(
                {
                    "step": i,
                    "timestep": t,
                    "cross_replaced": controller.replace_cross_now(),
                    "self_replaced": controller.replace_self_now(),
                }
            )

    image = backend.decode_latent(z_tar)
    diagnostics = {"activity": activity, "records": controller.records}
    return image, diagnostics


def transform_age(
    request: EditRequest,
    profile: IdentityProfile,
    adapters,
    backend,
    config: PipelineConfig,
    estimator=None,
    image=None,
    record_maps: bool = False,
    inversion_cache_dir=None,
) -> EditResult:
    """Full edit pipeline: estimate source age if missing, build prompts,
    invert, optimize nulls, run the controlled edit.

    ``adapters`` may be None or empty (base model editing).  ``image`` may
    be passed directly to skip file loading.  With ``inversion_cache_dir``
    set, a matching persisted inversion is reused instead of recomputed,
    and a fresh one is written there after computing.
    """
    from .adapt import FinetuneResult

    if image is None:
        from .imageio import load_image

        image = load_image(request.input_image, size=config.image_size)

    alpha_in = request.alpha_in
    if alpha_in is None:
        if estimator is None:
            raise StageError("estimate-age", "alpha_in missing and no estimator provided")
        try:
            alpha_in = int(estimator.estimate(image))
        except Exception as exc:
            raise StageError("estimate-age", exc) from exc

    token_applied = False
    attached_here = False
    try:
        if adapters is not None:
            if isinstance(adapters, FinetuneResult):
                if adapters.token_embedding is not None and hasattr(backend, "set_token_embedding"):
                    backend.set_token_embedding(adapters.token_text, adapters.token_embedding)
                    token_applied = True
                adapters = adapters.adapters
            if adapters.layers:
                backend.attach(adapters)
                attached_here = True
    except Exception as exc:
        raise StageError("attach-adapters", exc) from exc

    try:
        try:
            ref_age = profile.references[0].age if profile.references else alpha_in
            bundle = promptkit.build_bundle(
                profile,
                alpha_in=alpha_in,
                alpha_tar=request.alpha_tar,
                ref_age=ref_age,
                reg_age=alpha_in,
                use_hyphenated_age=config.use_hyphenated_age,
                use_ref_age=config.use_ref_age,
                use_extreme_nouns=config.use_extreme_nouns,
            )
            bundle = promptkit.resolve_bundle(bundle, backend.tokenizer)
        except Exception as exc:
            raise StageError("build-prompts", exc) from exc

        inversion = None
        if inversion_cache_dir is not None:
            from pathlib import Path

            cache = Path(inversion_cache_dir)
            if (cache / "metadata.json").exists():
                cached = invert.load_inversion(cache)
                if (
                    cached.source_prompt == bundle.p_in
                    and cached.steps == config.diffusion_steps
                    and cached.guidance == config.guidance_scale
                ):
                    inversion = cached

        if inversion is None:
            try:
                trajectory = invert.ddim_invert(image, bundle.p_in, backend, config.diffusion_steps)
            except Exception as exc:
                raise StageError("ddim-invert", exc) from exc

            try:
                inversion = invert.optimize_null_text(
                    trajectory,
                    bundle.p_in,
                    backend,
                    inner_steps=config.null_inner_steps,
                    inner_lr=config.null_inner_lr,
                    guidance=config.guidance_scale,
                    early_stop=config.null_early_stop,
                )
            except Exception as exc:
                raise StageError("null-text", exc) from exc
            if inversion_cache_dir is not None:
                from .runmeta import config_hash

                invert.save_inversion(inversion, inversion_cache_dir,
                                      config_hash=config_hash(config))

        try:
            controller = controller_from_bundle(
                bundle, total_steps=inversion.steps, config=config, record_maps=record_maps
            )
            image_tensor, diagnostics = edit(inversion, bundle, controller, backend)
        except Exception as exc:
            raise StageError("edit", exc) from exc
    finally:
        if attached_here:
            backend.detach()

    diagnostics = dict(diagnostics)
    diagnostics["token_embedding_applied"] = token_applied
    return EditResult(
        image=to_uint8(image_tensor),
        prompt_in=bundle.p_in,
        prompt_tar=bundle.p_tar,
        alpha_in=alpha_in,
        alpha_tar=request.alpha_tar,
        seed=request.seed,
        spans_in=bundle.replace_spans_in,
        spans_tar=bundle.replace_spans_tar,
        diagnostics=diagnostics,
    )
