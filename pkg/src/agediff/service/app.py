"""FastAPI application wrapping the editing pipeline.

Every endpoint resolves pluggable components by id, does the work
synchronously (the fixture backend is fast; real backends are expected to
sit behind a worker pool), writes a run manifest next to its outputs, and
returns paths plus content hashes.
"""
from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import adapt, evalkit, p2pedit, promptkit, regset as regset_mod
from ..core import (
    EditRequest,
    IdentityProfile,
    PipelineConfig,
    load_config,
    load_manifest,
    load_profile,
    load_skip_list,
    save_manifest,
)
from ..errors import AgediffError, ConfigurationError
from ..fixtures.tokenizer import ToyTokenizer
from ..imageio import save_image
from ..registry import make_backend, make_embedder, make_estimator
from ..runmeta import RunManifest, config_hash, sha256_file
from . import schemas


def _resolve_config(payload: schemas.ConfigPayload) -> PipelineConfig:
    return load_config(payload.config_path, overrides=payload.overrides or None)


def _check_backend_image_size(backend, config: PipelineConfig) -> None:
    size = getattr(backend, "image_size", None)
    if size is not None and config.image_size != size:
        raise ConfigurationError(
            f"config.image_size {config.image_size} does not match the backend's "
            f"native size {size}; set image_size = {size}"
        )


def create_app() -> FastAPI:
    app = FastAPI(title="agediff", version=__version__)

    @app.exception_handler(AgediffError)
    async def _domain_error(request: Request, exc: AgediffError):
        body = schemas.ErrorBody(
            error=str(exc),
            stage=getattr(exc, "stage", None),
            type=type(exc).__name__,
        )
        return JSONResponse(status_code=422, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", name="agediff", version=__version__)

    @app.post("/prompts", response_model=schemas.PromptResponse)
    def prompts(req: schemas.PromptRequest):
        profile = IdentityProfile(token=req.token, gender=req.gender, references=())
        bundle = promptkit.build_bundle(
            profile,
            alpha_in=req.age_in,
            alpha_tar=req.age_tar,
            ref_age=req.ref_age if req.ref_age is not None else req.age_in,
            reg_age=req.reg_age if req.reg_age is not None else req.age_in,
            use_hyphenated_age=req.use_hyphenated_age,
            use_ref_age=req.use_ref_age,
            use_extreme_nouns=req.use_extreme_nouns,
        )
        tokenizer = ToyTokenizer()
        bundle = promptkit.resolve_bundle(bundle, tokenizer)
        return schemas.PromptResponse(
            p_ref=bundle.p_ref,
            p_reg=bundle.p_reg,
            p_in=bundle.p_in,
            p_tar=bundle.p_tar,
            replace_spans_in=list(bundle.replace_spans_in),
            replace_spans_tar=list(bundle.replace_spans_tar),
            alignment=[tuple(p) for p in bundle.alignment],
            tokens_in=[piece for piece, _, _ in tokenizer.tokenize(bundle.p_in)],
            tokens_tar=[piece for piece, _, _ in tokenizer.tokenize(bundle.p_tar)],
        )

    @app.post("/regset/refine", response_model=schemas.RegsetRefineResponse)
    def regset_refine(req: schemas.RegsetRefineRequest):
        manifest = load_manifest(req.manifest_path)
        skip = load_skip_list(req.skip_list_path) if req.skip_list_path else ()
        estimator = make_estimator(req.estimator)
        result = regset_mod.refine_regularization_set(
            manifest, estimator, skip_list=skip, workers=req.workers
        )
        save_manifest(result.manifest, req.out_path)
        run = RunManifest("prepare-regset")
        run.add_input("manifest", req.manifest_path)
        if req.skip_list_path:
            run.add_input("skip_list", req.skip_list_path)
        run.add_artifact(req.out_path)
        run_path = run.write(Path(req.out_path).parent)
        return schemas.RegsetRefineResponse(
            out_path=req.out_path,
            kept=len(result.manifest),
            skipped=[schemas.SkippedItem(image_ref=s.image_ref, reason=s.reason) for s in result.skipped],
            run_manifest=str(run_path),
        )

    @app.post("/regset/sample", response_model=schemas.RegsetSampleResponse)
    def regset_sample(req: schemas.RegsetSampleRequest):
        manifest = load_manifest(req.manifest_path)
        sampled = regset_mod.sample_balanced(manifest, per_group=req.per_group, seed=req.seed)
        save_manifest(sampled, req.out_path)
        run = RunManifest("sample-regset", seed=req.seed)
        run.add_input("manifest", req.manifest_path)
        run.add_artifact(req.out_path)
        run_path = run.write(Path(req.out_path).parent)
        return schemas.RegsetSampleResponse(
            out_path=req.out_path, count=len(sampled), run_manifest=str(run_path)
        )

    @app.post("/finetune", response_model=schemas.FinetuneResponse)
    def finetune_endpoint(req: schemas.FinetuneRequest):
        config = _resolve_config(req.config)
        profile = load_profile(req.profile_path)
        regset = load_manifest(req.regset_path)
        backend = make_backend(req.backend)
        _check_backend_image_size(backend, config)
        embedder = make_embedder("toy")
        result = adapt.finetune(profile, regset, config, backend, embedder, seed=req.seed)
        out = adapt.save_adapters(
            result,
            req.out_dir,
            config_hash=config_hash(config),
            extra_meta={"backend": req.backend, "seed": req.seed},
        )
        run = RunManifest("finetune", seed=req.seed, config=config)
        run.add_input("profile", req.profile_path)
        run.add_input("regset", req.regset_path)
        run.add_artifact_tree(out)
        run_path = run.write(out)
        losses = [entry["loss"] for entry in result.log]
        finite = all(x == x and abs(x) != float("inf") for x in losses)
        return schemas.FinetuneResponse(
            adapter_dir=str(out),
            steps=len(result.log),
            final_loss=losses[-1] if losses else 0.0,
            losses_finite=finite,
            run_manifest=str(run_path),
        )

    @app.post("/edit", response_model=schemas.EditResponse)
    def edit_endpoint(req: schemas.EditRequestModel):
        config = _resolve_config(req.config)
        profile = load_profile(req.profile_path)
        backend = make_backend(req.backend)
        _check_backend_image_size(backend, config)
        adapters = adapt.load_adapters(req.adapters_dir) if req.adapters_dir else None
        estimator = make_estimator(req.estimator) if req.estimator else None
        request = EditRequest(
            input_image=req.image_path,
            alpha_tar=req.target_age,
            alpha_in=req.age_in,
            seed=req.seed,
        )
        result = p2pedit.transform_age(
            request,
            profile,
            adapters,
            backend,
            config,
            estimator=estimator,
            inversion_cache_dir=req.inversion_cache_dir,
        )
        out_path = Path(req.out_path)
        save_image(result.image, out_path)
        sidecar = out_path.with_suffix(out_path.suffix + ".json")
        sidecar.write_text(
            json.dumps(
                {
                    "prompt_in": result.prompt_in,
                    "prompt_tar": result.prompt_tar,
                    "spans_in": list(result.spans_in),
                    "spans_tar": list(result.spans_tar),
                    "cross_replace_fraction": config.cross_replace_fraction,
                    "self_replace_fraction": config.self_replace_fraction,
                    "alpha_in": result.alpha_in,
                    "alpha_tar": result.alpha_tar,
                    "seed": req.seed,
                    "config_hash": config_hash(config),
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        run = RunManifest("edit", seed=req.seed, config=config)
        run.add_input("image", req.image_path)
        run.add_input("profile", req.profile_path)
        run.add_artifact(out_path)
        run.add_artifact(sidecar)
        run_path = run.write(out_path.parent)
        return schemas.EditResponse(
            out_path=str(out_path),
            sidecar_path=str(sidecar),
            prompt_in=result.prompt_in,
            prompt_tar=result.prompt_tar,
            alpha_in=result.alpha_in,
            alpha_tar=result.alpha_tar,
            image_sha256=sha256_file(out_path),
            run_manifest=str(run_path),
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate_endpoint(req: schemas.EvaluateRequest):
        pairs = []
        with open(req.records_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    pairs.append(json.loads(line))
        estimator = make_estimator(req.estimator)
        embedder = make_embedder(req.embedder)
        target_ages = tuple(req.target_ages) if req.target_ages else evalkit.DEFAULT_TARGET_AGES
        report = evalkit.evaluate_records(
            pairs,
            estimator,
            embedder,
            target_ages=target_ages,
            estimator_id=req.estimator,
            embedder_id=req.embedder,
        )
        paths = report.write(req.out_dir)
        run = RunManifest("evaluate")
        run.add_input("records", req.records_path)
        for p in paths.values():
            run.add_artifact(p)
        run_path = run.write(req.out_dir)
        return schemas.EvaluateResponse(
            report_path=str(paths["table"]),
            records_path=str(paths["records"]),
            age_all=report.age.overall,
            id_all=report.id_result.value,
            failures=len(report.failures),
            run_manifest=str(run_path),
        )

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate_endpoint(req: schemas.AblateRequest):
        if req.flag not in PipelineConfig.ablation_flags():
            raise ConfigurationError(
                f"unknown ablation flag {req.flag!r}; one of {PipelineConfig.ablation_flags()}"
            )
        base_config = _resolve_config(req.config)
        profile = load_profile(req.profile_path)
        regset = load_manifest(req.regset_path)
        estimator = make_estimator(req.estimator)
        embedder = make_embedder(req.embedder)
        target_ages = tuple(req.target_ages) if req.target_ages else evalkit.DEFAULT_TARGET_AGES

        arms: dict[str, schemas.AblateArm] = {}
        for label, value in (("enabled", True), ("disabled", False)):
            config = base_config.replace(**{req.flag: value})
            backend = make_backend(req.backend)
            _check_backend_image_size(backend, config)
            result = adapt.finetune(profile, regset, config, backend, embedder, seed=req.seed)

            def edit_fn(prof, input_path, target_age, seed, _config=config,
                        _backend=backend, _result=result):
                request = EditRequest(input_image=str(input_path), alpha_tar=int(target_age), seed=seed)
                out = p2pedit.transform_age(
                    request, prof, _result, _backend, _config, estimator=estimator
                )
                return out.image

            arm_dir = Path(req.out_dir) / ("with_" + req.flag if value else "without_" + req.flag)
            report = evalkit.run_benchmark(
                [profile],
                {profile.token: req.input_paths},
                edit_fn,
                estimator,
                embedder,
                arm_dir,
                target_ages=target_ages,
                seed=req.seed,
                estimator_id=req.estimator,
                embedder_id=req.embedder,
            )
            arms[label] = schemas.AblateArm(
                report_dir=str(arm_dir),
                age_all=report.age.overall if report.age else None,
                id_all=report.id_result.value if report.id_result else None,
            )

        summary = Path(req.out_dir) / "ablation_summary.tsv"
        with summary.open("w", encoding="utf-8") as fh:
            fh.write(f"flag\t{req.flag}\n")
            fh.write("arm\tAGE_ALL\tID_ALL\n")
            for label, arm in arms.items():
                fh.write(f"{label}\t{arm.age_all}\t{arm.id_all}\n")

        # side-by-side qualitative grid: one row per arm, one column per age
        from ..imageio import load_image

        rows = []
        for arm in arms.values():
            cells = []
            for t in target_ages:
                matches = sorted(Path(arm.report_dir).glob(f"edits/*_to_{t}.png"))
                cells.append(load_image(matches[0]) if matches else None)
            rows.append(cells)
        if any(cell is not None for row in rows for cell in row):
            save_image(
                evalkit.render_grid(rows),
                Path(req.out_dir) / f"ablation_grid_{profile.token}.png",
            )
        run = RunManifest("ablate", seed=req.seed, config=base_config)
        run.add_input("profile", req.profile_path)
        run.add_input("regset", req.regset_path)
        run.add_artifact(summary)
        run_path = run.write(req.out_dir)
        return schemas.AblateResponse(
            flag=req.flag,
            enabled=arms["enabled"],
            disabled=arms["disabled"],
            summary_path=str(summary),
            run_manifest=str(run_path),
        )

    return app
