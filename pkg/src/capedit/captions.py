"""Before/after caption production.

The before-edit caption comes from the image captioner (one caption serves
both the inversion conditioning and the edit direction). The after-edit
caption comes from prompting an LLM with a template and parsing its raw
completion. Templates live in plain-text files with a small front-matter
record and are loaded by name; the default is the single-caption prompt
(template "simplified").

Completion parse rules (documented so fixtures can be reproduced): split on
newlines, drop "before/after transformation" section headers (keeping only
the relevant block), strip enumeration labels such as "Caption 1:", "1.",
"-", strip wrapping quotes, then take the first n non-empty lines.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from PIL import Image

from .adapters.base import AdapterSet
from .errors import CaptionParseError, ContractError, TemplateError

logger = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\[([A-Z_]+)\]")
_SHOT_SEP = "=== shot ==="
_COMPLETION_SEP = "--- completion ---"

# Overridable per model family if a checkpoint decorates its output differently.
DEFAULT_LABEL_PATTERNS = [
    r"^\s*output\s*:\s*",
    r"^\s*caption\s*\d*\s*[:.\-)]\s*",
    r"^\s*\d+\s*[:.)\-]\s*",
    r"^\s*[-*•]\s*",
]
_SECTION_RE = re.compile(r"^\s*(before|after)\b.*transformation.*$", re.IGNORECASE)


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt template plus its few-shot examples.

    ``template_text`` must contain every required placeholder exactly as
    written (e.g. ``[CAPTION]``); ``shots`` equals the number of few-shot
    (filled-prompt, completion) pairs prepended at render time.
    """

    name: str
    template_text: str
    required_placeholders: frozenset[str]
    few_shot_examples: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for placeholder in self.required_placeholders:
            if f"[{placeholder}]" not in self.template_text:
                raise TemplateError(
                    f"template {self.name!r} is missing required placeholder "
                    f"[{placeholder}]")
        if self.shots not in (0, 1, 3):
            raise TemplateError(
                f"template {self.name!r} has {self.shots} shots; supported: 0, 1, 3")

    @property
    def shots(self) -> int:
        return len(self.few_shot_examples)


def parse_template_file(text: str, name_hint: str = "?") -> PromptTemplate:
    if not text.startswith("---"):
        raise TemplateError(f"template {name_hint!r} lacks a front-matter block")
    try:
        _, front, body = text.split("---", 2)
    except ValueError as exc:
        raise TemplateError(f"template {name_hint!r} front matter is unterminated") from exc
    meta: dict[str, str] = {}
    for line in front.strip().splitlines():
        if ":" not in line:
            raise TemplateError(f"bad front-matter line in {name_hint!r}: {line!r}")
        key, value = line.split(":", 1)
        meta[key.strip()] = value.strip()
    name = meta.get("name", name_hint)
    placeholders = frozenset(
        p.strip() for p in meta.get("placeholders", "").split(",") if p.strip())
    declared_shots = int(meta.get("shots", "0"))

    sections = body.split(_SHOT_SEP)
    template_text = sections[0].strip("\n").strip()
    shots = []
    for section in sections[1:]:
        if _COMPLETION_SEP not in section:
            raise TemplateError(f"shot in {name!r} is missing its completion")
        prompt_part, completion_part = section.split(_COMPLETION_SEP, 1)
        shots.append((prompt_part.strip(), completion_part.strip()))
    if declared_shots != len(shots):
        raise TemplateError(
            f"template {name!r} declares {declared_shots} shots but contains {len(shots)}")
    return PromptTemplate(name=name, template_text=template_text,
                          required_placeholders=placeholders,
                          few_shot_examples=tuple(shots))


def load_template(name: str, extra_dir: str | Path | None = None) -> PromptTemplate:
    """Load a template by name from ``extra_dir`` (if given) or the built-ins."""
    if extra_dir is not None:
        candidate = Path(extra_dir) / f"{name}.txt"
        if candidate.exists():
            return parse_template_file(candidate.read_text(), name_hint=name)
    builtin = resources.files("capedit.templates").joinpath(f"{name}.txt")
    if not builtin.is_file():
        raise TemplateError(f"unknown template {name!r}")
    return parse_template_file(builtin.read_text(), name_hint=name)


def render_prompt(tmpl: PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute placeholders in a single pass and prepend the few-shots.

    Substitution is non-recursive: a binding value containing a placeholder
    token is inserted literally. Unknown non-required tokens are left alone.
    """
    missing = [p for p in sorted(tmpl.required_placeholders) if p not in bindings]
    if missing:
        raise TemplateError(
            f"template {tmpl.name!r} is missing bindings for: {', '.join(missing)}")

    def substitute(match: re.Match) -> str:
        key = match.group(1)
        return bindings[key] if key in bindings else match.group(0)

    rendered = _PLACEHOLDER_RE.sub(substitute, tmpl.template_text)
    parts = [f"{shot_prompt}\n{shot_completion}"
             for shot_prompt, shot_completion in tmpl.few_shot_examples]
    parts.append(rendered)
    return "\n\n".join(parts)


def _clean_line(line: str, label_patterns: list[str]) -> str:
    for pattern in label_patterns:
        line = re.sub(pattern, "", line, flags=re.IGNORECASE)
    line = line.strip()
    while len(line) >= 2 and line[0] == line[-1] and line[0] in "\"'`":
        line = line[1:-1].strip()
    return line


def parse_captions(completion: str, n: int, which: str = "after",
                   label_patterns: list[str] | None = None) -> list[str]:
    """Recover ``n`` captions from a raw completion.

    If the completion carries before/after section headers, only the block
    named by ``which`` is read; otherwise every line is a candidate. Raises
    CaptionParseError (carrying the raw completion) when nothing survives.
    Completions with fewer than ``n`` usable lines are padded by repeating
    the last caption, with a warning.
    """
    if which not in ("before", "after"):
        raise ContractError(f"which must be 'before' or 'after', got {which!r}")
    patterns = label_patterns or DEFAULT_LABEL_PATTERNS
    current = "after" if which == "after" else "before"
    sections: dict[str, list[str]] = {"before": [], "after": []}
    has_headers = False
    active = "before"
    for raw_line in completion.splitlines():
        header = _SECTION_RE.match(
            re.sub(r"^\s*output\s*:\s*", "", raw_line, flags=re.IGNORECASE))
        if header:
            has_headers = True
            active = header.group(1).lower()
            continue
        cleaned = _clean_line(raw_line, patterns)
        if cleaned:
            sections[active].append(cleaned)
    if has_headers:
        lines = sections[current]
    else:
        lines = sections["before"] + sections["after"]
    captions = lines[:n]
    if not captions:
        raise CaptionParseError(
            f"no {which}-edit captions recovered from completion", raw_completion=completion)
    if len(captions) < n:
        logger.warning("parsed %d/%d %s-edit captions; padding with the last one",
                       len(captions), n, which)
        captions = captions + [captions[-1]] * (n - len(captions))
    return captions


@dataclass(frozen=True)
class CaptionPair:
    """The caption sets that root one edit direction."""

    before: tuple[str, ...]
    after: tuple[str, ...]
    before_source: str  # "captioner" or "llm"
    n_captions: int

    def __post_init__(self):
        if self.before_source not in ("captioner", "llm"):
            raise ContractError(f"before_source must be captioner|llm, got "
                                f"{self.before_source!r}")
        if self.n_captions not in (1, 2, 4):
            raise ContractError(f"n_captions must be 1, 2 or 4, got {self.n_captions}")
        if not self.before or not self.after:
            raise ContractError("caption lists must be non-empty")
        if any(not c.strip() for c in self.before + self.after):
            raise ContractError("captions must be non-empty strings")
        object.__setattr__(self, "before", tuple(self.before))
        object.__setattr__(self, "after", tuple(self.after))


class CaptionPipeline:
    """Produces caption pairs against one adapter set."""

    def __init__(self, adapters: AdapterSet, templates_dir: str | Path | None = None,
                 label_patterns: list[str] | None = None):
        self.adapters = adapters
        self.templates_dir = templates_dir
        self.label_patterns = label_patterns

    def before_caption(self, image: Image.Image) -> str:
        """The captioner's description; also the inversion conditioning text."""
        return self.adapters.captioner.caption_image(image)

    def after_captions(self, before: str, instruction: str,
                       tmpl: PromptTemplate | None = None, n_captions: int = 1) -> list[str]:
        """Prompt the LLM for after-edit caption(s) and parse the completion."""
        if not before.strip() or not instruction.strip():
            raise ContractError("before caption and instruction must be non-empty")
        tmpl = tmpl or load_template("simplified", self.templates_dir)
        bindings = {"CAPTION": before, "TRANSFORMATION": instruction,
                    "NUMBER": str(n_captions)}
        prompt = render_prompt(tmpl, bindings)
        completion = self.adapters.generator.generate_text(prompt, self.adapters.llm_config)
        return parse_captions(completion, n_captions, which="after",
                              label_patterns=self.label_patterns)

    def template_for(self, n_captions: int, shots: int, before_source: str,
                     template: str | None = None) -> PromptTemplate:
        if template is not None:
            return load_template(template, self.templates_dir)
        base = "simplified" if (n_captions == 1 and before_source == "captioner") else "terse"
        name = base if shots == 0 else f"{base}-{shots}shot"
        return load_template(name, self.templates_dir)

    def make_caption_pair(self, image: Image.Image, instruction: str,
                          n_captions: int = 1, shots: int = 0,
                          before_source: str = "captioner",
                          template: str | None = None,
                          before_override: str | None = None,
                          after_override: str | None = None) -> CaptionPair:
        """Assemble the before/after caption sets for one edit.

        The default configuration is the single-caption prompt with the
        captioner supplying the before caption. Multi-caption and llm-before
        configurations use the count-style templates, whose completions carry
        both caption blocks; when ``before_source`` is "captioner" the first
        before-edit caption is replaced by the captioner's.
        """
        if n_captions not in (1, 2, 4):
            raise ContractError(f"n_captions must be 1, 2 or 4, got {n_captions}")
        if shots not in (0, 1, 3):
            raise ContractError(f"shots must be 0, 1 or 3, got {shots}")
        tmpl = self.template_for(n_captions, shots, before_source, template)

        captioner_caption = None
        if before_source == "captioner":
            captioner_caption = before_override or self.before_caption(image)

        if "NUMBER" in tmpl.required_placeholders:
            bindings = {"TRANSFORMATION": instruction, "NUMBER": str(n_captions)}
            if "CAPTION" in tmpl.required_placeholders:
                bindings["CAPTION"] = captioner_caption or ""
            prompt = render_prompt(tmpl, bindings)
            completion = self.adapters.generator.generate_text(
                prompt, self.adapters.llm_config)
            before = parse_captions(completion, n_captions, which="before",
                                    label_patterns=self.label_patterns)
            if after_override:
                after = [after_override] * n_captions
            else:
                after = parse_captions(completion, n_captions, which="after",
                                       label_patterns=self.label_patterns)
            if before_source == "captioner":
                before[0] = captioner_caption
        else:
            if captioner_caption is None:
                raise ContractError(
                    f"template {tmpl.name!r} generates no before captions; "
                    "it requires before_source='captioner'")
            before = [captioner_caption]
            if after_override:
                after = [after_override]
            else:
                after = self.after_captions(captioner_caption, instruction, tmpl,
                                            n_captions=n_captions)
        return CaptionPair(before=tuple(before), after=tuple(after),
                           before_source=before_source, n_captions=n_captions)
