"""Multimodal prompt assembly.

Builds the retrieval-augmented pretraining prompts and the three
instruction-prefixed task prompts (subject-driven, video prediction,
text-to-video). Entity extraction and segmentation are pluggable; the
defaults are a dictionary phrase matcher and a synthetic-crop segmenter
so the pipeline runs without any model weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

from .retrieval import RetrievalResult

logger = logging.getLogger(__name__)


class InstructionTask(Enum):
    SUBJECT_DRIVEN = "subject_driven"
    VIDEO_PREDICTION = "video_prediction"
    TEXT_TO_VIDEO = "text_to_video"


# Registered task instructions. Byte-exact, trailing period included; a
# checksum test pins them.
INSTRUCTION_TEMPLATES: dict[InstructionTask, str] = {
    InstructionTask.SUBJECT_DRIVEN: "Generate a video with the text and image interleaved prompt.",
    InstructionTask.VIDEO_PREDICTION: "Generate a video with the following text and first frame.",
    InstructionTask.TEXT_TO_VIDEO: "Generate a video with the retrieved text-image examples and text prompt.",
}


class MissingFrameError(Exception):
    """First-frame reference absent or unresolvable."""


class EmptyCaptionError(Exception):
    """Caption empty where a non-empty one is required."""


@dataclass(frozen=True)
class PromptUnit:
    """One unit of a multimodal sequence: text, or an image reference with
    an optional bounding region (x0, y0, x1, y1 in relative coordinates)."""

    kind: str  # "text" | "image"
    text: str | None = None
    image_ref: str | None = None
    region: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.kind == "text":
            if self.text is None or self.image_ref is not None:
                raise ValueError("text unit must carry text only")
        elif self.kind == "image":
            if self.image_ref is None or self.text is not None:
                raise ValueError("image unit must carry image_ref only")
        else:
            raise ValueError(f"unknown unit kind {self.kind!r}")

    @staticmethod
    def of_text(text: str) -> "PromptUnit":
        return PromptUnit(kind="text", text=text)

    @staticmethod
    def of_image(image_ref: str, region: tuple[float, float, float, float] | None = None) -> "PromptUnit":
        return PromptUnit(kind="image", image_ref=image_ref, region=region)


@dataclass(frozen=True)
class MultimodalPrompt:
    """Ordered text/image units, optionally prefixed by a task instruction.

    If an instruction is present it must be one of the registered
    templates, byte for byte.
    """

    units: tuple[PromptUnit, ...]
    instruction: str | None = None

    def __post_init__(self):
        if not self.units:
            raise ValueError("prompt must have at least one unit")
        if self.instruction is not None and self.instruction not in INSTRUCTION_TEMPLATES.values():
            raise ValueError("instruction is not a registered template")

    def to_dict(self) -> dict:
        units = []
        for u in self.units:
            if u.kind == "text":
                units.append({"kind": "text", "text": u.text})
            else:
                entry: dict = {"kind": "image", "image_ref": u.image_ref}
                if u.region is not None:
                    entry["region"] = list(u.region)
                units.append(entry)
        return {"instruction": self.instruction, "units": units}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @staticmethod
    def from_dict(obj: dict) -> "MultimodalPrompt":
        units = []
        for entry in obj["units"]:
            if entry["kind"] == "text":
                units.append(PromptUnit.of_text(entry["text"]))
            else:
                region = tuple(entry["region"]) if entry.get("region") else None
                units.append(PromptUnit.of_image(entry["image_ref"], region))
        return MultimodalPrompt(units=tuple(units), instruction=obj.get("instruction"))

    @staticmethod
    def from_json(text: str) -> "MultimodalPrompt":
        return MultimodalPrompt.from_dict(json.loads(text))


@dataclass(frozen=True)
class EntitySpan:
    """An entity mention located in its source caption."""

    surface: str
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad span ({self.start}, {self.end})")


class EntityExtractor(Protocol):
    def extract(self, caption: str) -> list[EntitySpan]: ...


class Segmenter(Protocol):
    def segment(self, caption: str, span: EntitySpan) -> PromptUnit | None: ...


class DictionaryExtractor:
    """Phrase-list entity extractor.

    Matches case-insensitively at word boundaries, longest phrase first,
    leftmost first on equal length; matches never overlap. The span's
    surface is the literal caption slice, so caption[start:end] == surface.
    """

    def __init__(self, phrases: list[str]):
        self.phrases = sorted({p.lower() for p in phrases if p.strip()}, key=lambda p: (-len(p), p))

    def extract(self, caption: str) -> list[EntitySpan]:
        lowered = caption.lower()
        taken = [False] * len(caption)
        spans: list[EntitySpan] = []
        for phrase in self.phrases:
            start = 0
            while True:
                pos = lowered.find(phrase, start)
                if pos == -1:
                    break
                end = pos + len(phrase)
                if _word_bounded(lowered, pos, end) and not any(taken[pos:end]):
                    for i in range(pos, end):
                        taken[i] = True
                    spans.append(EntitySpan(surface=caption[pos:end], start=pos, end=end))
                start = pos + 1
        spans.sort(key=lambda s: s.start)
        return spans


def _word_bounded(text: str, start: int, end: int) -> bool:
    before_ok = start == 0 or not text[start - 1].isalnum()
    after_ok = end == len(text) or not text[end].isalnum()
    return before_ok and after_ok


class SyntheticCropSegmenter:
    """Stand-in segmenter: emits a deterministic crop reference for a span
    instead of running detection + segmentation models."""

    def segment(self, caption: str, span: EntitySpan) -> PromptUnit | None:
        ref = f"crop://{span.surface}?span={span.start}-{span.end}"
        return PromptUnit.of_image(ref, region=(0.25, 0.25, 0.75, 0.75))


def build_pretraining_prompt(caption: str, retrieved: RetrievalResult) -> MultimodalPrompt:
    """Retrieved pairs in score order, each as caption then image, followed
    by the query caption. No instruction prefix; an empty retrieval
    degrades to a text-only prompt."""
    units: list[PromptUnit] = []
    for pair, _score in retrieved.pairs:
        units.append(PromptUnit.of_text(pair.caption))
        units.append(PromptUnit.of_image(pair.image_ref))
    units.append(PromptUnit.of_text(caption))
    return MultimodalPrompt(units=tuple(units))


def build_instructed_t2v_prompt(caption: str, retrieved: RetrievalResult) -> MultimodalPrompt:
    """Pretraining layout plus the text-to-video instruction prefix."""
    base = build_pretraining_prompt(caption, retrieved)
    return MultimodalPrompt(
        units=base.units, instruction=INSTRUCTION_TEMPLATES[InstructionTask.TEXT_TO_VIDEO]
    )


def extract_entities(caption: str, extractor: EntityExtractor) -> list[EntitySpan]:
    """Run the pluggable extractor and enforce ordered, non-overlapping,
    caption-consistent spans."""
    spans = extractor.extract(caption)
    spans = sorted(spans, key=lambda s: s.start)
    prev_end = 0
    for span in spans:
        if span.start < prev_end:
            raise ValueError(f"overlapping entity span at {span.start}")
        if caption[span.start : span.end] != span.surface:
            raise ValueError(f"span surface mismatch at {span.start}")
        prev_end = span.end
    return spans


def curate_subject_prompt(
    caption: str, entities: list[EntitySpan], segmenter: Segmenter
) -> MultimodalPrompt:
    """Interleave each entity's segment image right after its mention.

    Text is only ever split, never altered: concatenating the text units
    reproduces the caption exactly. Entities the segmenter cannot handle
    stay text-only.
    """
    units: list[PromptUnit] = []
    cursor = 0
    for span in entities:
        segment = None
        try:
            segment = segmenter.segment(caption, span)
        except Exception:
            logger.warning("segmenter failed on %r, keeping it text-only", span.surface, exc_info=True)
        if segment is None:
            logger.debug("no segment for %r, keeping it text-only", span.surface)
            continue
        units.append(PromptUnit.of_text(caption[cursor : span.end]))
        units.append(segment)
        cursor = span.end
    if cursor < len(caption) or not units:
        units.append(PromptUnit.of_text(caption[cursor:]))
    return MultimodalPrompt(
        units=tuple(units), instruction=INSTRUCTION_TEMPLATES[InstructionTask.SUBJECT_DRIVEN]
    )


def build_prediction_prompt(caption: str, first_frame: str | None) -> MultimodalPrompt:
    """Caption followed by the first frame, with the prediction prefix."""
    if not caption:
        raise EmptyCaptionError("video prediction needs a non-empty caption")
    if not first_frame:
        raise MissingFrameError("video prediction needs a first-frame reference")
    return MultimodalPrompt(
        units=(PromptUnit.of_text(caption), PromptUnit.of_image(first_frame)),
        instruction=INSTRUCTION_TEMPLATES[InstructionTask.VIDEO_PREDICTION],
    )
