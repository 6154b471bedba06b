"""Data model and dataset operations for class-labeled conversation corpora.

A corpus is a list of conversations, each tagged with the name of the
data-source class it came from (a small expert class and a larger
sub-optimal class in the standard setup). Classes live in a registry
that carries the per-class template labels, the scalar reward, and an
optional explicit loss weight. The module also ships a synthetic corpus
generator for desk-scale experiments and a bridge that collapses
single-turn corpora into finite count tables for the closed-form oracle.

File formats (UTF-8):
  dataset   JSON lines, one record per line:
            {"id": ..., "source_class": ..., "turns": [{"role": "user"|"assistant", "text": ...}, ...]}
  registry  JSON object:
            {"expert_class": ..., "classes": [{"name", "user_label", "assistant_label", "reward", "weight"?}, ...]}
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyResult,
    InvalidSpec,
    MalformedRecord,
    UnknownClass,
    UnmappableConversation,
)

# Reserved marker terminating every utterance. Conversation text may not
# contain it; the tokenizer maps it to a single reserved id.
END_OF_TURN = "<|end_of_turn|>"


class Role(enum.Enum):
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str

    def __post_init__(self):
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))
        if not self.text:
            raise ValueError("turn text must be non-empty")
        if END_OF_TURN in self.text:
            raise ValueError("turn text contains the reserved end-of-turn marker")


@dataclass(frozen=True)
class Conversation:
    """An ordered user/assistant exchange from a single data source."""

    id: str
    turns: tuple[Turn, ...]
    source_class: str

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("conversation must have at least one turn")
        for i, turn in enumerate(self.turns):
            expected = Role.USER if i % 2 == 0 else Role.ASSISTANT
            if turn.role is not expected:
                raise ValueError(
                    f"turn {i} has role {turn.role.value}, expected {expected.value}"
                    " (roles must alternate starting with user)"
                )


@dataclass(frozen=True)
class ClassSpec:
    """One data-source class: template labels, reward, optional weight."""

    name: str
    user_label: str
    assistant_label: str
    reward: float
    explicit_weight: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("class reward must be finite")
        if self.explicit_weight is not None and not self.explicit_weight > 0:
            raise ValueError("explicit_weight must be positive when present")

    @property
    def condition_tag(self) -> str:
        """Bare class token used by the beginning variant preamble.

        Derived from the assistant label by dropping a trailing
        " Assistant" word ("GPT4 Assistant" -> "GPT4"); falls back to
        the class name for labels that do not follow that shape.
        """
        suffix = " Assistant"
        if self.assistant_label.endswith(suffix) and len(self.assistant_label) > len(suffix):
            return self.assistant_label[: -len(suffix)]
        return self.name


class ClassRegistry:
    """Ordered name -> ClassSpec map with a designated expert class."""

    def __init__(self, classes: list[ClassSpec], expert_class: str):
        self._specs: dict[str, ClassSpec] = {}
        for spec in classes:
            if spec.name in self._specs:
                raise ValueError(f"duplicate class name {spec.name!r}")
            self._specs[spec.name] = spec
        if expert_class not in self._specs:
            raise ValueError(f"expert class {expert_class!r} not in registry")
        labels = [lbl for s in classes for lbl in (s.user_label, s.assistant_label)]
        if len(set(labels)) != len(labels):
            raise ValueError("class labels must be unique across the registry")
        max_reward = max(s.reward for s in classes)
        if self._specs[expert_class].reward < max_reward:
            raise ValueError("expert class must carry the maximum reward")
        self.expert_class = expert_class

    def __len__(self):
        return len(self._specs)

    def __iter__(self):
        return iter(self._specs.values())

    def __contains__(self, name: str):
        return name in self._specs

    @property
    def names(self) -> list[str]:
        return list(self._specs)

    def spec(self, name: str) -> ClassSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownClass(name) from None

    @property
    def expert_spec(self) -> ClassSpec:
        return self._specs[self.expert_class]

    def to_dict(self) -> dict:
        return {
            "expert_class": self.expert_class,
            "classes": [
                {
                    "name": s.name,
                    "user_label": s.user_label,
                    "assistant_label": s.assistant_label,
                    "reward": s.reward,
                    **({"weight": s.explicit_weight} if s.explicit_weight is not None else {}),
                }
                for s in self
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRegistry":
        classes = [
            ClassSpec(
                name=c["name"],
                user_label=c["user_label"],
                assistant_label=c["assistant_label"],
                reward=float(c["reward"]),
                explicit_weight=float(c["weight"]) if "weight" in c else None,
            )
            for c in d["classes"]
        ]
        return cls(classes, d["expert_class"])


def default_registry() -> ClassRegistry:
    """Two-class registry: expert (reward 1, weight 1) and sub-optimal
    (reward 0.5, weight 0.1) with the standard GPT4/GPT3 template labels."""
    return ClassRegistry(
        [
            ClassSpec("expert", "GPT4 User", "GPT4 Assistant", 1.0, 1.0),
            ClassSpec("sub_optimal", "GPT3 User", "GPT3 Assistant", 0.5, 0.1),
        ],
        expert_class="expert",
    )


def load_registry(path: str | Path) -> ClassRegistry:
    with open(path, encoding="utf-8") as f:
        return ClassRegistry.from_dict(json.load(f))


def save_registry(registry: ClassRegistry, path: str | Path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(registry.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _reserved_in(text: str, registry: ClassRegistry) -> str | None:
    for spec in registry:
        for label in (spec.user_label, spec.assistant_label):
            if label in text:
                return label
    for label in ("User", "Assistant"):
        if label in text:
            return label
    return None


def load_dataset(path: str | Path, registry: ClassRegistry) -> list[Conversation]:
    """Read a JSON-lines corpus, validating every record against the registry.

    Raises MalformedRecord (with line number and reason), UnknownClass for
    classes missing from the registry, and EmptyDataset for empty files.
    Record order is preserved.
    """
    conversations: list[Conversation] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise MalformedRecord(line_no, "record is not an object")
            missing = {"id", "source_class", "turns"} - record.keys()
            if missing:
                raise MalformedRecord(line_no, f"missing fields {sorted(missing)}")
            source_class = record["source_class"]
            if source_class not in registry:
                raise UnknownClass(source_class)
            try:
                turns = tuple(Turn(t["role"], t["text"]) for t in record["turns"])
                conv = Conversation(str(record["id"]), turns, source_class)
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedRecord(line_no, str(exc)) from None
            for turn in conv.turns:
                label = _reserved_in(turn.text, registry)
                if label is not None:
                    raise MalformedRecord(
                        line_no, f"turn text contains reserved string {label!r}"
                    )
            conversations.append(conv)
    if not conversations:
        raise EmptyDataset(f"no records in {path}")
    return conversations


def save_dataset(data: list[Conversation], path: str | Path):
    """Write a corpus in the JSON-lines format read by load_dataset."""
    with open(path, "w", encoding="utf-8") as f:
        for conv in data:
            record = {
                "id": conv.id,
                "source_class": conv.source_class,
                "turns": [{"role": t.role.value, "text": t.text} for t in conv.turns],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def assign_reward(conv: Conversation, registry: ClassRegistry) -> float:
    """Coarse-grained reward of a conversation: the registry value of its class."""
    return registry.spec(conv.source_class).reward


def subsample_class(
    data: list[Conversation], class_name: str, ratio: float, seed: int
) -> list[Conversation]:
    """Keep floor(ratio * n) records of one class, chosen uniformly without
    replacement (seeded Fisher-Yates prefix); other classes are untouched
    and corpus order is preserved."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    positions = [i for i, conv in enumerate(data) if conv.source_class == class_name]
    n = len(positions)
    if n == 0:
        raise UnknownClass(class_name)
    k = int(math.floor(ratio * n + 1e-9))
    if k == 0:
        raise EmptyResult(f"class {class_name!r} would drop to zero records")
    rng = np.random.default_rng(seed)
    order = list(range(n))
    for i in range(k):
        j = int(rng.integers(i, n))
        order[i], order[j] = order[j], order[i]
    keep = {positions[order[i]] for i in range(k)}
    return [
        conv
        for i, conv in enumerate(data)
        if conv.source_class != class_name or i in keep
    ]


# ---------------------------------------------------------------------------
# Synthetic corpus generation


@dataclass(frozen=True)
class ClassGenerator:
    """Record count and response-kind distribution for one class."""

    count: int
    dist: dict[str, float]  # kind -> probability, kinds from GeneratorConfig.kinds


@dataclass(frozen=True)
class GeneratorConfig:
    """Desk-scale stand-in for the mixed-quality data sources.

    Each prompt maps to one graded response string per kind; each class
    draws prompts uniformly and responses from its kind distribution.
    The expert distribution must put more mass on high-grade kinds than
    the sub-optimal one so that generated corpora separate under the
    synthetic scorer.
    """

    prompts: dict[str, dict[str, str]]  # prompt -> kind -> response string
    grades: dict[str, float]  # kind -> exact-match score in [0, 1]
    classes: dict[str, ClassGenerator]  # class name -> generator

    def __post_init__(self):
        if not self.prompts:
            raise InvalidSpec("generator needs at least one prompt")
        kinds = set(self.grades)
        if not any(math.isclose(g, 1.0) for g in self.grades.values()):
            raise InvalidSpec("grades must include a kind scoring 1.0")
        for prompt, table in self.prompts.items():
            if set(table) != kinds:
                raise InvalidSpec(f"prompt {prompt!r} does not cover all kinds")
        for name, gen in self.classes.items():
            if gen.count < 0:
                raise InvalidSpec(f"class {name!r} has negative count")
            if set(gen.dist) - kinds:
                raise InvalidSpec(f"class {name!r} references unknown kinds")
            total = sum(gen.dist.values())
            if any(p < 0 for p in gen.dist.values()) or not math.isclose(
                total, 1.0, abs_tol=1e-9
            ):
                raise InvalidSpec(f"class {name!r} distribution is not normalized")


def default_generator_config() -> GeneratorConfig:
    """6 expert / 64 sub-optimal records over four prompts.

    Expert draws the correct answer 90% of the time; sub-optimal mixes
    correct, near-miss (one symbol off), and wrong answers. Response
    strings use symbols disjoint from the template label characters and
    never repeat a symbol, so the answer structure is learnable by a
    small model. The near terminator and the wrong answer are shared
    across prompts; only the class-dependent branch probabilities and
    the prompt-to-answer mapping have to be learned.
    """
    prompts = {
        "bbbb": {"correct": "ghjk", "near": "ghj1", "wrong": "2567"},
        "cccc": {"correct": "lmop", "near": "lmo1", "wrong": "2567"},
        "dddd": {"correct": "quvw", "near": "quv1", "wrong": "2567"},
        "ffff": {"correct": "xyz0", "near": "xyz1", "wrong": "2567"},
    }
    grades = {"correct": 1.0, "near": 0.5, "wrong": 0.1}
    classes = {
        "expert": ClassGenerator(6, {"correct": 0.9, "near": 0.1, "wrong": 0.0}),
        "sub_optimal": ClassGenerator(64, {"correct": 0.3, "near": 0.3, "wrong": 0.4}),
    }
    return GeneratorConfig(prompts, grades, classes)


def generate_synthetic_corpus(spec: GeneratorConfig, seed: int) -> list[Conversation]:
    """Draw a deterministic corpus from the generator config.

    Class counts are exact; raises EmptyDataset when the config yields
    zero records overall.
    """
    rng = np.random.default_rng(seed)
    prompt_list = sorted(spec.prompts)
    conversations: list[Conversation] = []
    for class_name in spec.classes:
        gen = spec.classes[class_name]
        kinds = sorted(gen.dist)
        probs = np.array([gen.dist[k] for k in kinds])
        probs = probs / probs.sum()
        for i in range(gen.count):
            prompt = prompt_list[int(rng.integers(len(prompt_list)))]
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            response = spec.prompts[prompt][kind]
            conversations.append(
                Conversation(
                    id=f"{class_name}-{i:05d}",
                    turns=(Turn(Role.USER, prompt), Turn(Role.ASSISTANT, response)),
                    source_class=class_name,
                )
            )
    if not conversations:
        raise EmptyDataset("generator config produced no records")
    return conversations


# ---------------------------------------------------------------------------
# Tabular bridge


class TabularInstance:
    """Finite count table n(x, y, c) over contexts, classes, and responses.

    Arrays are laid out (X, C, Y). A conditioning slot (x, c) is active
    when its response counts have positive total.
    """

    def __init__(self, x_labels, c_labels, y_labels, counts):
        self.x_labels = list(x_labels)
        self.c_labels = list(c_labels)
        self.y_labels = list(y_labels)
        counts = np.asarray(counts)
        if counts.shape != (len(self.x_labels), len(self.c_labels), len(self.y_labels)):
            raise ValueError("counts shape does not match label sets")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ValueError("counts must be finite and non-negative")
        self.counts = counts.astype(np.float64)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    def total(self) -> float:
        return float(self.counts.sum())

    def slot_totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    def active_slots(self) -> np.ndarray:
        return self.slot_totals() > 0

    def context_weights(self) -> np.ndarray:
        """Empirical (x, c) frequencies."""
        return self.slot_totals() / self.total()


def to_tabular(
    data: list[Conversation],
    context_map: Callable[[Conversation], str] | None = None,
    response_map: Callable[[Conversation], str] | None = None,
    classes: list[str] | None = None,
) -> TabularInstance:
    """Collapse a single-turn corpus into a TabularInstance.

    Default maps take the user text as context and the assistant text as
    response; conversations that are not exactly one user/assistant pair
    raise UnmappableConversation under the defaults.
    """
    if not data:
        raise EmptyDataset("cannot tabulate an empty corpus")

    def _default_context(conv: Conversation) -> str:
        if len(conv.turns) != 2:
            raise UnmappableConversation(conv.id, "not a single-turn conversation")
        return conv.turns[0].text

    def _default_response(conv: Conversation) -> str:
        if len(conv.turns) != 2:
            raise UnmappableConversation(conv.id, "not a single-turn conversation")
        return conv.turns[1].text

    context_map = context_map or _default_context
    response_map = response_map or _default_response

    triples = []
    for conv in data:
        try:
            triples.append((context_map(conv), response_map(conv), conv.source_class))
        except UnmappableConversation:
            raise
        except Exception as exc:
            raise UnmappableConversation(conv.id, str(exc)) from None

    x_labels = sorted({t[0] for t in triples})
    y_labels = sorted({t[1] for t in triples})
    c_labels = list(classes) if classes is not None else sorted({t[2] for t in triples})
    x_idx = {x: i for i, x in enumerate(x_labels)}
    y_idx = {y: i for i, y in enumerate(y_labels)}
    c_idx = {c: i for i, c in enumerate(c_labels)}
    counts = np.zeros((len(x_labels), len(c_labels), len(y_labels)))
    for x, y, c in triples:
        if c not in c_idx:
            raise UnknownClass(c)
        counts[x_idx[x], c_idx[c], y_idx[y]] += 1
    return TabularInstance(x_labels, c_labels, y_labels, counts)
