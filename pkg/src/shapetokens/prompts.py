"""Prompt templating, the combinatorial training-prompt bank, and prompt
encoding with tracked token positions."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from shapetokens.backends.base import TextEncoderBackend

__all__ = [
    "PLACEHOLDER",
    "STRATEGIES",
    "PromptError",
    "TokenLayout",
    "PromptTemplate",
    "PromptBank",
    "expand_template",
    "build_prompt_bank",
    "encode_prompt",
    "load_word_list",
    "default_mediums",
    "default_adjectives",
    "write_bank",
    "read_bank",
]

PLACEHOLDER = "[SHAPE-ID]"
DEFAULT_BANK_PATTERN = "a {adjective} {medium} of a " + PLACEHOLDER
STRATEGIES = ("all_tokens", "object_only", "eos_only", "object_and_eos")


class PromptError(ValueError):
    """Invalid template, bank input, or prompt/shape-word combination."""


@dataclass(frozen=True)
class TokenLayout:
    """Token positions inside a 77-slot prompt embedding.

    ``shape_span`` is the inclusive index range of the shape-word token(s);
    it is ``None`` until located by :func:`encode_prompt`. Slot 0 is the
    begin marker, so content indices start at 1.
    """

    eos_index: int
    content_length: int
    shape_span: tuple[int, int] | None = None
    max_tokens: int = 77

    def validate(self) -> None:
        if not (1 <= self.eos_index < self.max_tokens):
            raise PromptError(f"eos_index {self.eos_index} out of range")
        if not (2 <= self.content_length <= self.max_tokens):
            raise PromptError(f"content_length {self.content_length} out of range")
        if self.shape_span is not None:
            start, end = self.shape_span
            if not (1 <= start <= end < self.eos_index):
                raise PromptError(
                    f"shape_span {self.shape_span} must be nonempty and precede EOS "
                    f"index {self.eos_index}"
                )

    def selected_rows(self, strategy: str) -> list[int]:
        """Row indices a guidance strategy applies the residual to."""
        if strategy == "all_tokens":
            return list(range(self.max_tokens))
        if strategy == "eos_only":
            return [self.eos_index]
        if strategy not in STRATEGIES:
            raise PromptError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
        if self.shape_span is None:
            raise PromptError(f"strategy {strategy!r} needs a located shape span")
        start, end = self.shape_span
        if strategy == "object_only":
            return list(range(start, end + 1))
        return sorted({*range(start, end + 1), self.eos_index})


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt text containing exactly one [SHAPE-ID] placeholder."""

    text: str
    id: str = ""

    def __post_init__(self) -> None:
        count = self.text.count(PLACEHOLDER)
        if count != 1:
            raise PromptError(
                f"template must contain exactly one {PLACEHOLDER}, found {count}: {self.text!r}"
            )


def expand_template(template: PromptTemplate | str, category_label: str) -> str:
    """Substitute the category label for the placeholder, verbatim."""
    if not category_label:
        raise PromptError("category label must be nonempty")
    if isinstance(template, str):
        template = PromptTemplate(template)
    return template.text.replace(PLACEHOLDER, category_label)


@dataclass(frozen=True)
class PromptBank:
    mediums: tuple[str, ...]
    adjectives: tuple[str, ...]
    pattern: str = DEFAULT_BANK_PATTERN
    prompts: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.prompts)


def _check_entries(name: str, entries: Sequence[str]) -> tuple[str, ...]:
    cleaned = tuple(e.strip() for e in entries)
    if not cleaned or any(not e for e in cleaned):
        raise PromptError(f"{name} list must be nonempty with no blank entries")
    if len(set(cleaned)) != len(cleaned):
        dupes = sorted({e for e in cleaned if cleaned.count(e) > 1})
        raise PromptError(f"duplicate {name} entries: {dupes}")
    return cleaned


def build_prompt_bank(
    mediums: Sequence[str],
    adjectives: Sequence[str],
    template_pattern: str = DEFAULT_BANK_PATTERN,
) -> PromptBank:
    """Render the medium x adjective Cartesian product through one pattern.

    Iteration order is mediums-outer, adjectives-inner, so the bank is stable
    across runs for fixed inputs.
    """
    mediums_t = _check_entries("medium", mediums)
    adjectives_t = _check_entries("adjective", adjectives)
    prompts = tuple(
        template_pattern.format(medium=m, adjective=a)
        for m, a in itertools.product(mediums_t, adjectives_t)
    )
    if len(set(prompts)) != len(prompts):
        raise PromptError("pattern collapses distinct medium/adjective pairs into duplicates")
    return PromptBank(mediums_t, adjectives_t, template_pattern, prompts)


def encode_prompt(
    backend: "TextEncoderBackend", text: str, shape_word: str
) -> tuple[np.ndarray, TokenLayout]:
    """Encode ``text`` and locate the token span of ``shape_word``.

    The shape word must tokenize to a contiguous subsequence occurring exactly
    once in the prompt's tokens; multi-word category labels yield multi-token
    spans. Texts longer than the 77-slot budget are rejected, never truncated.
    """
    embedding, layout = backend.encode(text)
    tokens = backend.tokenize(text)
    target = backend.tokenize(shape_word)
    if not target:
        raise PromptError("shape word must be nonempty")
    hits = [
        i
        for i in range(len(tokens) - len(target) + 1)
        if tokens[i : i + len(target)] == target
    ]
    if not hits:
        raise PromptError(f"shape word {shape_word!r} does not occur in {text!r}")
    if len(hits) > 1:
        raise PromptError(f"shape word {shape_word!r} is ambiguous in {text!r} ({len(hits)} hits)")
    start = backend.content_offset + hits[0]
    located = replace(layout, shape_span=(start, start + len(target) - 1))
    located.validate()
    return embedding, located


def _word_lines(text: str) -> list[str]:
    lines = [line.strip() for line in text.splitlines()]
    return [line for line in lines if line and not line.startswith("#")]


def load_word_list(path: str | Path) -> list[str]:
    """Read a one-entry-per-line UTF-8 word list (``#`` comments allowed),
    rejecting duplicates."""
    entries = _word_lines(Path(path).read_text(encoding="utf-8"))
    return list(_check_entries(Path(path).name, entries))


def _packaged_list(name: str) -> list[str]:
    text = resources.files("shapetokens.data").joinpath(name).read_text(encoding="utf-8")
    return _word_lines(text)


def default_mediums() -> list[str]:
    """The shipped 127-entry artistic-medium list."""
    return _packaged_list("mediums.txt")


def default_adjectives() -> list[str]:
    """The shipped 108-entry style-adjective list."""
    return _packaged_list("adjectives.txt")


def write_bank(bank: PromptBank, path: str | Path) -> None:
    """Export as line-delimited ``{id, text}`` records."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, text in enumerate(bank.prompts):
            fh.write(json.dumps({"id": i, "text": text}) + "\n")


def read_bank(path: str | Path) -> list[str]:
    prompts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            prompts.append(json.loads(line)["text"])
    return prompts
