"""Pydantic request/response models for the HTTP service.

All heavy payloads travel as workspace paths, not inline bytes; the service
and its clients share a filesystem.
"""
from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    name: str
    version: str


class ConfigPayload(BaseModel):
    """Optional config source: a server-side file and/or inline overrides."""

    config_path: Optional[str] = None
    overrides: dict = Field(default_factory=dict)


class PromptRequest(BaseModel):
    token: str = "sks"
    gender: str
    age_in: int
    age_tar: int
    ref_age: Optional[int] = None
    reg_age: Optional[int] = None
    use_hyphenated_age: bool = True
    use_ref_age: bool = True
    use_extreme_nouns: bool = True


class PromptResponse(BaseModel):
    p_ref: str
    p_reg: str
    p_in: str
    p_tar: str
    replace_spans_in: list[int]
    replace_spans_tar: list[int]
    alignment: list[tuple[int, int]]
    tokens_in: list[str]
    tokens_tar: list[str]


class RegsetRefineRequest(BaseModel):
    manifest_path: str
    out_path: str
    estimator: str = "mean-intensity"
    skip_list_path: Optional[str] = None
    workers: int = 1


class SkippedItem(BaseModel):
    image_ref: str
    reason: str


class RegsetRefineResponse(BaseModel):
    out_path: str
    kept: int
    skipped: list[SkippedItem]
    run_manifest: str


class RegsetSampleRequest(BaseModel):
    manifest_path: str
    out_path: str
    per_group: int
    seed: int = 0


class RegsetSampleResponse(BaseModel):
    out_path: str
    count: int
    run_manifest: str


class FinetuneRequest(BaseModel):
    profile_path: str
    regset_path: str
    out_dir: str
    backend: str = "tiny"
    seed: int = 0
    config: ConfigPayload = Field(default_factory=ConfigPayload)


class FinetuneResponse(BaseModel):
    adapter_dir: str
    steps: int
    final_loss: float
    losses_finite: bool
    run_manifest: str


class EditRequestModel(BaseModel):
    profile_path: str
    image_path: str
    target_age: int
    out_path: str
    adapters_dir: Optional[str] = None
    age_in: Optional[int] = None
    seed: int = 0
    backend: str = "tiny"
    estimator: str = "mean-intensity"
    inversion_cache_dir: Optional[str] = None
    config: ConfigPayload = Field(default_factory=ConfigPayload)


class EditResponse(BaseModel):
    out_path: str
    sidecar_path: str
    prompt_in: str
    prompt_tar: str
    alpha_in: int
    alpha_tar: int
    image_sha256: str
    run_manifest: str


class EvaluateRequest(BaseModel):
    records_path: str
    out_dir: str
    estimator: str = "mean-intensity"
    embedder: str = "toy"
    target_ages: Optional[list[int]] = None


class EvaluateResponse(BaseModel):
    report_path: str
    records_path: str
    age_all: float
    id_all: float
    failures: int
    run_manifest: str


class AblateRequest(BaseModel):
    flag: str
    profile_path: str
    regset_path: str
    input_paths: list[str]
    out_dir: str
    backend: str = "tiny"
    estimator: str = "mean-intensity"
    embedder: str = "toy"
    target_ages: Optional[list[int]] = None
    seed: int = 0
    config: ConfigPayload = Field(default_factory=ConfigPayload)


class AblateArm(BaseModel):
    report_dir: str
    age_all: Optional[float] = None
    id_all: Optional[float] = None


class AblateResponse(BaseModel):
    flag: str
    enabled: AblateArm
    disabled: AblateArm
    summary_path: str
    run_manifest: str


class ErrorBody(BaseModel):
    error: str
    stage: Optional[str] = None
    type: str
