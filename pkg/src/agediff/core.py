"""Domain types, manifests, and configuration shared by every other module.

All types here are immutable after construction and safe to share across
concurrent readers.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    import numpy as np

from .errors import ConfigurationError, ManifestParseError, ValidationError

AGE_MIN = 0
AGE_MAX = 100

#: The six coarse source groups a regularization image may carry.
AGE_GROUPS = ("child", "teenager", "young adults", "middle-aged", "elderly", "old")

#: Words the prompt grammar itself uses; an identity token must not collide
#: with any of them.
PROMPT_VOCABULARY = frozenset(
    {"photo", "of", "person", "as", "man", "woman", "boy", "girl", "baby",
     "elderly", "year", "old"}
)

DEFAULT_TOKEN = "sks"
DEFAULT_MAX_REFERENCES = 5

GENDERS = ("male", "female")


def _check_age(age: int, what: str) -> None:
    if not isinstance(age, int) or isinstance(age, bool):
        raise ValidationError(f"{what} must be an integer, got {age!r}")
    if not AGE_MIN <= age <= AGE_MAX:
        raise ValidationError(f"{what} must be in [{AGE_MIN}, {AGE_MAX}], got {age}")


@dataclass(frozen=True)
class Reference:
    """One self-reference image of the target person at a known age."""

    image_ref: str
    age: int


@dataclass(frozen=True)
class IdentityProfile:
    """A person's placeholder token, gender, and self-reference image set."""

    token: str
    gender: str
    references: tuple[Reference, ...]

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def validate_profile(
    profile: IdentityProfile, max_references: int = DEFAULT_MAX_REFERENCES
) -> list[Violation]:
    """Return every invariant violation of ``profile`` (empty list if valid)."""
    out: list[Violation] = []
    n = len(profile.references)
    if n < 1:
        out.append(Violation("missing-references", "profile has no self-reference images"))
    if n > max_references:
        out.append(
            Violation(
                "too-many-references",
                f"profile has {n} references, maximum is {max_references}",
            )
        )
    for ref in profile.references:
        if not isinstance(ref.age, int) or not AGE_MIN <= ref.age <= AGE_MAX:
            out.append(
                Violation(
                    "age-range",
                    f"reference {ref.image_ref!r} has age {ref.age}, "
                    f"expected [{AGE_MIN}, {AGE_MAX}]",
                )
            )
    token = profile.token
    if not token or any(c.isspace() for c in token):
        out.append(Violation("token-whitespace", f"token {token!r} is empty or has whitespace"))
    elif token.lower() in PROMPT_VOCABULARY:
        out.append(
            Violation("token-dictionary-word", f"token {token!r} collides with the prompt vocabulary")
        )
    if profile.gender not in GENDERS:
        out.append(Violation("gender", f"gender must be one of {GENDERS}, got {profile.gender!r}"))
    return out


@dataclass(frozen=True)
class ManifestEntry:
    """One (image path, integer age, optional source group) record."""

    image_ref: str
    age: int
    source_group: Optional[str] = None


@dataclass(frozen=True)
class AgeLabeledManifest:
    """An ordered, validated list of age-labeled image records."""

    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen: set[str] = set()
        for e in entries:
            _check_age(e.age, f"age of {e.image_ref!r}")
            if e.source_group is not None and e.source_group not in AGE_GROUPS:
                raise ValidationError(
                    f"unknown source group {e.source_group!r} for {e.image_ref!r}"
                )
            if e.image_ref in seen:
                raise ValidationError(f"duplicate image_ref {e.image_ref!r}")
            seen.add(e.image_ref)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def image_refs(self) -> list[str]:
        return [e.image_ref for e in self.entries]

    def groups(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.source_group, []).append(e)
        return out


def load_manifest(path: str | os.PathLike) -> AgeLabeledManifest:
    """Load a tab-separated ``path<TAB>age<TAB>group?`` manifest file.

    Blank lines are ignored.  Parse failures report the 1-based line number.
    """
    p = Path(path)
    entries: list[ManifestEntry] = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ManifestParseError(p, lineno, f"expected 2 or 3 tab-separated fields, got {len(fields)}")
            image_ref = fields[0]
            if not image_ref:
                raise ManifestParseError(p, lineno, "empty image path")
            try:
                age = int(fields[1])
            except ValueError:
                raise ManifestParseError(p, lineno, f"age is not an integer: {fields[1]!r}") from None
            group = fields[2] if len(fields) == 3 and fields[2] != "" else None
            if group is not None and group not in AGE_GROUPS:
                raise ManifestParseError(p, lineno, f"unknown group {group!r}")
            if not AGE_MIN <= age <= AGE_MAX:
                raise ValidationError(f"{p}:{lineno}: age {age} out of range [{AGE_MIN}, {AGE_MAX}]")
            entries.append(ManifestEntry(image_ref, age, group))
    return AgeLabeledManifest(tuple(entries))


def save_manifest(manifest: AgeLabeledManifest, path: str | os.PathLike) -> None:
    """Write ``manifest`` in the same tab-separated format ``load_manifest`` reads."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for e in manifest.entries:
            if "\t" in e.image_ref or "\n" in e.image_ref:
                raise ValidationError(f"image_ref {e.image_ref!r} cannot contain tabs or newlines")
            group = e.source_group or ""
            fh.write(f"{e.image_ref}\t{e.age}\t{group}\n")


def load_skip_list(path: str | os.PathLike) -> list[str]:
    """Read a skip-list file: one image path per line, blanks ignored."""
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                out.append(line)
    return out


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------

_ABLATION_FLAGS = (
    "use_lora",
    "use_refined_regset",
    "use_hyphenated_age",
    "use_ref_age",
    "use_extreme_nouns",
)


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the training/editing pipeline, with published defaults.

    The defaults reproduce the reference experimental settings; ablation
    flags switch individual pipeline refinements off one at a time.
    """

    iterations: int = 800
    batch_size: int = 2
    learning_rate: float = 1.0e-6
    lora_rank: int = 16
    image_size: int = 224
    diffusion_steps: int = 50
    guidance_scale: float = 7.5

    # ablation switches, all on by default
    use_lora: bool = True
    use_refined_regset: bool = True
    use_hyphenated_age: bool = True
    use_ref_age: bool = True
    use_extreme_nouns: bool = True

    # loss weighting; reconstruction stays dominant by default
    lambda_reg: float = 1.0
    lambda_id: float = 0.1
    ntxent_temperature: float = 0.5

    # null-text optimization
    null_inner_steps: int = 10
    null_inner_lr: float = 1.0e-2
    null_early_stop: float = 1.0e-5

    # attention injection schedule
    cross_replace_fraction: float = 0.8
    self_replace_fraction: float = 0.4
    inject_self_attention: bool = True

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigurationError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lora_rank < 1:
            raise ConfigurationError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.diffusion_steps < 1:
            raise ConfigurationError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        for name in ("cross_replace_fraction", "self_replace_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")

    def replace(self, **overrides) -> "PipelineConfig":
        return dataclasses.replace(self, **overrides)

    @staticmethod
    def ablation_flags() -> tuple[str, ...]:
        return _ABLATION_FLAGS


def _parse_config_value(name: str, text: str, target_type: type):
    text = text.strip()
    if target_type is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError:
        raise ConfigurationError(f"{name}: expected {target_type.__name__}, got {text!r}") from None


_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(PipelineConfig)}

ENV_PREFIX = "AGEDIFF_"


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Optional[dict] = None,
    env: Optional[dict] = None,
) -> PipelineConfig:
    """Build a PipelineConfig from an optional ``key = value`` file.

    Precedence, lowest to highest: defaults, file, ``AGEDIFF_<KEY>``
    environment variables, explicit ``overrides``.
    """
    values: dict = {}
    if path is not None:
        with Path(path).open("r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _FIELD_TYPES:
                    raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_config_value(key, value, _FIELD_TYPES[key])
    env = os.environ if env is None else env
    for key, typ in _FIELD_TYPES.items():
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = _parse_config_value(key, env[env_key], typ)
    if overrides:
        for key, value in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"unknown config key {key!r}")
            typ = _FIELD_TYPES[key]
            if isinstance(value, str):
                value = _parse_config_value(key, value, typ)
            elif typ is bool:
                if not isinstance(value, bool):
                    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
            elif typ is int and isinstance(value, float):
                if not value.is_integer():
                    raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
                value = int(value)
            else:
                value = typ(value)
            values[key] = value
    return PipelineConfig(**values)


def save_config(config: PipelineConfig, path: str | os.PathLike) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Edit request / result
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditRequest:
    """A single editing job: input image, optional source age, target age."""

    input_image: str
    alpha_tar: int
    alpha_in: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        _check_age(self.alpha_tar, "alpha_tar")
        if self.alpha_in is not None:
            _check_age(self.alpha_in, "alpha_in")


@dataclass(frozen=True)
class EditResult:
    """Edited image plus the diagnostics needed to audit the run."""

    image: "np.ndarray"  # HxWx3 uint8
    prompt_in: str
    prompt_tar: str
    alpha_in: int
    alpha_tar: int
    seed: int
    spans_in: tuple[int, ...]
    spans_tar: tuple[int, ...]
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Profile file I/O (JSON)
# ---------------------------------------------------------------------------


def load_profile(path: str | os.PathLike) -> IdentityProfile:
    """Read an identity profile from JSON: token, gender, references[{path, age}]."""
    import json

    with Path(path).open("r", encoding="utf-8") as fh:
        data = json.load(fh)
    refs = tuple(Reference(r["path"], int(r["age"])) for r in data.get("references", ()))
    profile = IdentityProfile(
        token=data.get("token", DEFAULT_TOKEN), gender=data["gender"], references=refs
    )
    violations = validate_profile(profile)
    if violations:
        raise ValidationError("; ".join(str(v) for v in violations))
    return profile


def save_profile(profile: IdentityProfile, path: str | os.PathLike) -> None:
    import json

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "token": profile.token,
        "gender": profile.gender,
        "references": [{"path": r.image_ref, "age": r.age} for r in profile.references],
    }
    p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
