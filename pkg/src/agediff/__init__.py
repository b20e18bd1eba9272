"""Personalized facial age editing on latent diffusion backends.

Fine-tune low-rank adapters on a handful of self-reference images plus an
integer-age-relabeled regularization set, then edit any input face to an
integer target age via deterministic inversion and attention-controlled
prompt editing.  Ships with a desk-scale fixture backend, an evaluation
harness, an HTTP service, and a thin CLI client.
"""

__version__ = "0.1.0"

from .core import (
    AgeLabeledManifest,
    EditRequest,
    EditResult,
    IdentityProfile,
    ManifestEntry,
    PipelineConfig,
    Reference,
    load_config,
    load_manifest,
    load_profile,
    save_config,
    save_manifest,
    save_profile,
    validate_profile,
)

__all__ = [
    "__version__",
    "AgeLabeledManifest",
    "EditRequest",
    "EditResult",
    "IdentityProfile",
    "ManifestEntry",
    "PipelineConfig",
    "Reference",
    "load_config",
    "load_manifest",
    "load_profile",
    "save_config",
    "save_manifest",
    "save_profile",
    "validate_profile",
]
