"""Class-conditioned conversation templates, tokenization, and loss masks.

Every utterance is terminated by the reserved end-of-turn marker, which
tokenizes to a single id and doubles as the generation stop token. Three
variants control where the class condition appears:

    before_speaker    "GPT4 User: Q<|end_of_turn|>GPT4 Assistant: A<|end_of_turn|>"
    before_assistant  "User: Q<|end_of_turn|>GPT4 Assistant: A<|end_of_turn|>"
    beginning         "Assistant is GPT4<|end_of_turn|>User: Q<|end_of_turn|>Assistant: A<|end_of_turn|>"

before_speaker repeats the condition every turn and is the default
(conditioning only at the beginning trains markedly worse). Inference
prefixes stop right after the assistant label's colon, with no trailing
space. Golden copies of every class x variant rendering live under
goldens/templates/.

The tokenizer is symbol-level over a small closed vocabulary plus the
reserved end-of-turn and pad ids, so rendering and masking are exact.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import END_OF_TURN, ClassSpec, Conversation, Role
from .errors import NonPositiveWeight, ReservedStringInText, UnknownSymbol

PAD = "<pad>"

# Labels used when the class condition is absent from a turn (the
# before_assistant user side and the beginning variant). They are
# reserved strings like the class labels.
GENERIC_USER_LABEL = "User"
GENERIC_ASSISTANT_LABEL = "Assistant"

# Label pair for runs that drop the class condition entirely (plain
# unconditioned training and the no_condition ablation). Chosen to match
# the standard class labels everywhere except the tag character, so
# unconditioned and conditioned renderings align token for token and
# differ only at the positions that carry the class.
SHARED_CLASS_SPEC = ClassSpec(
    name="shared",
    user_label="GPT8 User",
    assistant_label="GPT8 Assistant",
    reward=0.0,
)


class PositionVariant(enum.Enum):
    BEFORE_SPEAKER = "before_speaker"
    BEFORE_ASSISTANT = "before_assistant"
    BEGINNING = "beginning"


DEFAULT_VARIANT = PositionVariant.BEFORE_SPEAKER


@dataclass(frozen=True)
class Vocabulary:
    """Bijective symbol <-> id map with reserved end-of-turn and pad ids."""

    symbols: tuple[str, ...]
    eot_id: int
    pad_id: int

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols) + 2

    @classmethod
    def from_symbols(cls, symbols) -> "Vocabulary":
        symbols = tuple(symbols)
        for s in symbols:
            if len(s) != 1:
                raise ValueError(f"text symbols must be single characters, got {s!r}")
            if s == "\n":
                raise ValueError("newline cannot be a vocabulary symbol")
        return cls(symbols, eot_id=len(symbols), pad_id=len(symbols) + 1)

    def id_of(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def to_file(self, path: str | Path):
        """One symbol per line in id order; the reserved marker and pad
        appear as their literal multi-character strings."""
        lines = list(self.symbols) + [END_OF_TURN, PAD]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if len(lines) < 2 or lines[-2] != END_OF_TURN or lines[-1] != PAD:
            raise ValueError("vocabulary file must end with the reserved marker and pad")
        return cls.from_symbols(lines[:-2])


def default_vocabulary() -> Vocabulary:
    """Symbols covering the standard template labels plus the synthetic
    corpus content alphabet (letters and digits disjoint from the labels)."""
    label_chars = set(
        "GPT4 User" "GPT4 Assistant" "GPT3 User" "GPT3 Assistant"
        "GPT8 User" "GPT8 Assistant" "Assistant is" ": "
    )
    content_chars = set("bcdfghjklmopquvwxyz") | set("012567")
    return Vocabulary.from_symbols(sorted(label_chars | content_chars))


@dataclass(frozen=True)
class RenderedExample:
    """Token ids with a per-token loss mask and a scalar example weight."""

    token_ids: np.ndarray
    loss_mask: np.ndarray
    weight: float
    class_name: str

    def __post_init__(self):
        object.__setattr__(self, "token_ids", np.asarray(self.token_ids, dtype=np.int64))
        object.__setattr__(self, "loss_mask", np.asarray(self.loss_mask, dtype=bool))
        if self.token_ids.shape != self.loss_mask.shape or self.token_ids.ndim != 1:
            raise ValueError("token_ids and loss_mask must be 1-D and the same length")
        if not self.loss_mask.any():
            raise ValueError("a training example needs at least one masked position")
        if not self.weight > 0:
            raise NonPositiveWeight("example weight must be positive")

    def __len__(self):
        return len(self.token_ids)

    @property
    def masked_count(self) -> int:
        return int(self.loss_mask.sum())


def _check_reserved(text: str, spec: ClassSpec):
    reserved = (
        END_OF_TURN,
        spec.user_label,
        spec.assistant_label,
        GENERIC_USER_LABEL,
        GENERIC_ASSISTANT_LABEL,
    )
    for marker in reserved:
        if marker in text:
            raise ReservedStringInText(
                f"text contains reserved string {marker!r}: {text!r}"
            )


def _parts(
    conv: Conversation, spec: ClassSpec, variant: PositionVariant
) -> list[tuple[str, bool]]:
    """Template pieces as (text, is_loss_target) pairs.

    Targets are exactly the assistant response texts and their
    terminating end-of-turn markers; labels, separators, and user text
    are context only.
    """
    for turn in conv.turns:
        _check_reserved(turn.text, spec)
    parts: list[tuple[str, bool]] = []
    if variant is PositionVariant.BEGINNING:
        parts.append((f"Assistant is {spec.condition_tag}", False))
        parts.append((END_OF_TURN, False))
    for turn in conv.turns:
        if turn.role is Role.USER:
            label = (
                spec.user_label
                if variant is PositionVariant.BEFORE_SPEAKER
                else GENERIC_USER_LABEL
            )
            parts.append((f"{label}: ", False))
            parts.append((turn.text, False))
            parts.append((END_OF_TURN, False))
        else:
            label = (
                GENERIC_ASSISTANT_LABEL
                if variant is PositionVariant.BEGINNING
                else spec.assistant_label
            )
            parts.append((f"{label}: ", False))
            parts.append((turn.text, True))
            parts.append((END_OF_TURN, True))
    return parts


def render(conv: Conversation, spec: ClassSpec, variant: PositionVariant) -> str:
    """Exact template string for a conversation under one class."""
    return "".join(text for text, _ in _parts(conv, spec, variant))


def render_inference_prefix(
    question: str, spec: ClassSpec, variant: PositionVariant
) -> str:
    """Training-format prefix ending right after the assistant label colon."""
    if not question:
        raise ValueError("question must be non-empty")
    _check_reserved(question, spec)
    if variant is PositionVariant.BEFORE_SPEAKER:
        return f"{spec.user_label}: {question}{END_OF_TURN}{spec.assistant_label}:"
    if variant is PositionVariant.BEFORE_ASSISTANT:
        return (
            f"{GENERIC_USER_LABEL}: {question}{END_OF_TURN}{spec.assistant_label}:"
        )
    return (
        f"Assistant is {spec.condition_tag}{END_OF_TURN}"
        f"{GENERIC_USER_LABEL}: {question}{END_OF_TURN}{GENERIC_ASSISTANT_LABEL}:"
    )


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Symbol-level tokenization; the end-of-turn marker is one token."""
    symbol_ids = {s: i for i, s in enumerate(vocab.symbols)}
    ids: list[int] = []
    pos = 0
    while pos < len(text):
        if text.startswith(END_OF_TURN, pos):
            ids.append(vocab.eot_id)
            pos += len(END_OF_TURN)
            continue
        ch = text[pos]
        if ch not in symbol_ids:
            raise UnknownSymbol(pos, ch)
        ids.append(symbol_ids[ch])
        pos += 1
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize; pad ids render as the empty string."""
    out: list[str] = []
    for pos, i in enumerate(ids):
        i = int(i)
        if i == vocab.eot_id:
            out.append(END_OF_TURN)
        elif i == vocab.pad_id:
            continue
        elif 0 <= i < len(vocab.symbols):
            out.append(vocab.symbols[i])
        else:
            raise UnknownSymbol(pos, str(i))
    return "".join(out)


def build_example(
    conv: Conversation,
    spec: ClassSpec,
    variant: PositionVariant,
    vocab: Vocabulary,
    weight: float,
) -> RenderedExample:
    """Tokenized conversation with the loss mask over assistant targets.

    The mask is true exactly on assistant response tokens plus each
    response's terminating end-of-turn token.
    """
    ids: list[int] = []
    mask: list[bool] = []
    for text, is_target in _parts(conv, spec, variant):
        part_ids = tokenize(text, vocab)
        ids.extend(part_ids)
        mask.extend([is_target] * len(part_ids))
    return RenderedExample(
        token_ids=np.array(ids, dtype=np.int64),
        loss_mask=np.array(mask, dtype=bool),
        weight=weight,
        class_name=conv.source_class,
    )
