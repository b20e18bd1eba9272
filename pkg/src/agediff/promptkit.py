"""Prompt construction and cross-attention replacement span computation.

Builds the four pipeline prompts (self-reference, regularization, input,
target), substitutes the person-describing noun by age and gender, and maps
the editable words to token positions of a tokenizer so attention control
knows exactly which columns to swap.

Everything in this module is pure: equal inputs give equal outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Protocol

from .core import AGE_MAX, AGE_MIN, IdentityProfile
from .errors import SpanResolutionError, ValidationError


class TokenizerAdapter(Protocol):
    """Minimal tokenizer surface needed for span mapping."""

    def encode(self, text: str) -> list[int]:
        """Deterministic token ids for ``text``."""

    def offsets(self, text: str) -> list[tuple[int, int]]:
        """Per-token character spans, in order, non-overlapping."""


def _check_age(age: int, what: str = "age") -> None:
    if not isinstance(age, int) or isinstance(age, bool) or not AGE_MIN <= age <= AGE_MAX:
        raise ValidationError(f"{what} must be an integer in [{AGE_MIN}, {AGE_MAX}], got {age!r}")


def person_word(age: int, gender: str, use_extreme_nouns: bool = True) -> str:
    """Person-describing noun for an (age, gender) pair.

    Bands: <5 "baby", 5-14 "boy"/"girl", 15-64 "man"/"woman", >=65 "elderly".
    With ``use_extreme_nouns`` off, the outer bands collapse into their
    gendered neighbours (<15 "boy"/"girl", >=15 "man"/"woman").
    """
    _check_age(age)
    male = gender == "male"
    if use_extreme_nouns:
        if age < 5:
            return "baby"
        if age < 15:
            return "boy" if male else "girl"
        if age < 65:
            return "man" if male else "woman"
        return "elderly"
    if age < 15:
        return "boy" if male else "girl"
    return "man" if male else "woman"


def age_phrase(age: int, use_hyphenated_age: bool = True) -> str:
    """Render ``age`` as "<age>-year-old" (or "<age> year old" with the flag off)."""
    _check_age(age)
    return f"{age}-year-old" if use_hyphenated_age else f"{age} year old"


@dataclass(frozen=True)
class _EditRegions:
    """Character ranges of the editable parts of one edit prompt."""

    noun: tuple[int, int]
    age_number: tuple[int, int]
    age_phrase: tuple[int, int]


@dataclass(frozen=True)
class PromptBundle:
    """The four pipeline prompts plus replacement bookkeeping.

    ``replace_spans_in`` / ``replace_spans_tar`` are token positions, filled
    by :func:`replacement_spans`; until then they are ``None``.
    """

    p_ref: str
    p_reg: str
    p_in: str
    p_tar: str
    alpha_in: int
    alpha_tar: int
    use_hyphenated_age: bool
    regions_in: _EditRegions
    regions_tar: _EditRegions
    replace_spans_in: Optional[tuple[int, ...]] = None
    replace_spans_tar: Optional[tuple[int, ...]] = None
    alignment: Optional[tuple[tuple[int, int], ...]] = None

    def with_spans(
        self,
        spans_in: tuple[int, ...],
        spans_tar: tuple[int, ...],
        alignment: tuple[tuple[int, int], ...],
    ) -> "PromptBundle":
        return replace(
            self,
            replace_spans_in=spans_in,
            replace_spans_tar=spans_tar,
            alignment=alignment,
        )


def ref_prompt(token: str, ref_age: int, use_hyphenated_age: bool = True,
               use_ref_age: bool = True) -> str:
    """Training prompt for a self-reference image."""
    if not use_ref_age:
        return f"photo of {token} person"
    return f"photo of {token} person as {age_phrase(ref_age, use_hyphenated_age)}"


def reg_prompt(reg_age: int, use_hyphenated_age: bool = True) -> str:
    """Training prompt for a regularization image."""
    return f"photo of person as {age_phrase(reg_age, use_hyphenated_age)}"


def _edit_prompt(token: str, noun: str, phrase: str, number_len: int) -> tuple[str, _EditRegions]:
    head = f"photo of {token} "
    noun_start = len(head)
    noun_end = noun_start + len(noun)
    mid = f"{head}{noun} as "
    phrase_start = len(mid)
    text = mid + phrase
    regions = _EditRegions(
        noun=(noun_start, noun_end),
        age_number=(phrase_start, phrase_start + number_len),
        age_phrase=(phrase_start, phrase_start + len(phrase)),
    )
    return text, regions


def build_bundle(
    profile: IdentityProfile,
    alpha_in: int,
    alpha_tar: int,
    ref_age: int,
    reg_age: int,
    use_hyphenated_age: bool = True,
    use_ref_age: bool = True,
    use_extreme_nouns: bool = True,
) -> PromptBundle:
    """Construct the four prompts for one identity and one edit.

    The input/target prompts each pick their person noun from their own age.
    """
    for age, what in ((alpha_in, "alpha_in"), (alpha_tar, "alpha_tar"),
                      (ref_age, "ref_age"), (reg_age, "reg_age")):
        _check_age(age, what)
    token = profile.token

    p_ref = ref_prompt(token, ref_age, use_hyphenated_age, use_ref_age)
    p_reg = reg_prompt(reg_age, use_hyphenated_age)

    noun_in = person_word(alpha_in, profile.gender, use_extreme_nouns)
    noun_tar = person_word(alpha_tar, profile.gender, use_extreme_nouns)
    p_in, regions_in = _edit_prompt(
        token, noun_in, age_phrase(alpha_in, use_hyphenated_age), len(str(alpha_in))
    )
    p_tar, regions_tar = _edit_prompt(
        token, noun_tar, age_phrase(alpha_tar, use_hyphenated_age), len(str(alpha_tar))
    )
    return PromptBundle(
        p_ref=p_ref,
        p_reg=p_reg,
        p_in=p_in,
        p_tar=p_tar,
        alpha_in=alpha_in,
        alpha_tar=alpha_tar,
        use_hyphenated_age=use_hyphenated_age,
        regions_in=regions_in,
        regions_tar=regions_tar,
    )


def _tokens_in_region(
    offsets: list[tuple[int, int]], region: tuple[int, int], prompt: str, what: str
) -> list[int]:
    lo, hi = region
    hits = [i for i, (s, e) in enumerate(offsets) if s < hi and e > lo]
    if not hits:
        raise SpanResolutionError(
            f"{what} at chars {region} of {prompt!r} matches no token in the offset map"
        )
    return hits


def _regions_for_replacement(bundle: PromptBundle, regions: _EditRegions) -> list[tuple[int, int]]:
    # Hyphenated mode swaps the noun and the whole "<age>-year-old" phrase;
    # non-hyphenated mode swaps only the noun and the bare number.
    if bundle.use_hyphenated_age:
        return [regions.noun, regions.age_phrase]
    return [regions.noun, regions.age_number]


def replacement_spans(
    bundle: PromptBundle, tokenizer: TokenizerAdapter
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Token positions whose cross-attention gets swapped, per prompt.

    Returns the (input, target) span tuples; both cover exactly the person
    noun plus the age phrase (or just the bare age number when hyphenation
    is off).
    """
    spans = {}
    for side, prompt, regions in (
        ("in", bundle.p_in, bundle.regions_in),
        ("tar", bundle.p_tar, bundle.regions_tar),
    ):
        offs = tokenizer.offsets(prompt)
        region_tokens = [
            _tokens_in_region(offs, region, prompt, what)
            for region, what in zip(
                _regions_for_replacement(bundle, regions), ("person noun", "age phrase")
            )
        ]
        spans[side] = tuple(i for group in region_tokens for i in group)
    return spans["in"], spans["tar"]


def alignment_map(
    bundle: PromptBundle, tokenizer: TokenizerAdapter
) -> tuple[tuple[int, int], ...]:
    """Pair target replacement positions with source positions.

    Alignment is per region (noun with noun, age phrase with age phrase),
    index by index.  Target positions without a source counterpart are left
    out: they keep the target's own attention.
    """
    pairs: list[tuple[int, int]] = []
    offs_in = tokenizer.offsets(bundle.p_in)
    offs_tar = tokenizer.offsets(bundle.p_tar)
    regions_in = _regions_for_replacement(bundle, bundle.regions_in)
    regions_tar = _regions_for_replacement(bundle, bundle.regions_tar)
    for region_in, region_tar, what in zip(regions_in, regions_tar, ("person noun", "age phrase")):
        src = _tokens_in_region(offs_in, region_in, bundle.p_in, what)
        tar = _tokens_in_region(offs_tar, region_tar, bundle.p_tar, what)
        pairs.extend(zip(tar, src))
    return tuple(pairs)


def resolve_bundle(bundle: PromptBundle, tokenizer: TokenizerAdapter) -> PromptBundle:
    """Return a copy of ``bundle`` with spans and alignment filled in."""
    spans_in, spans_tar = replacement_spans(bundle, tokenizer)
    return bundle.with_spans(spans_in, spans_tar, alignment_map(bundle, tokenizer))
