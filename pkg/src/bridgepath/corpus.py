"""Dialogue corpus handling: tokenization, loading, windowing, synthesis.

A corpus file is UTF-8 JSON lines, one object per line with schema
``{"turns": [string, ...]}``. Tokenization is whitespace split plus
lowercasing; the vocabulary reserves id 0 for padding.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

_RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


def tokenize(text: str) -> list[str]:
    """Lowercase + whitespace split."""
    return text.lower().split()


class Vocab:
    """Token <-> id bijection with reserved pad/bos/eos/unk ids."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(_RESERVED) + [
            t for t in tokens if t not in _RESERVED
        ]
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def from_texts(cls, texts: Iterable[str], min_freq: int = 2) -> "Vocab":
        """Build from raw texts; tokens rarer than ``min_freq`` map to unk."""
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text))
        kept = sorted(t for t, c in counts.items() if c >= min_freq)
        return cls(kept)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[len(_RESERVED):]})

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        return cls(json.loads(payload)["tokens"])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class Utterance:
    """One dialogue turn: raw text plus its token ids."""

    tokens: tuple[int, ...]
    text: str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("utterance must contain at least one token")
        if PAD_ID in self.tokens:
            raise ValueError("pad id inside utterance tokens")

    @classmethod
    def from_text(cls, text: str, vocab: Vocab) -> "Utterance":
        return cls(tokens=tuple(vocab.encode(text)), text=text.lower())


@dataclass(frozen=True)
class Dialogue:
    """Ordered utterances x_0..x_T; the last one is the response."""

    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise ValueError("dialogue needs at least 2 utterances")

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def horizon(self) -> int:
        """T: index of the final utterance."""
        return len(self.utterances) - 1

    @property
    def context(self) -> tuple[Utterance, ...]:
        return self.utterances[:-1]

    @property
    def response(self) -> Utterance:
        return self.utterances[-1]

    @classmethod
    def from_turns(cls, turns: Sequence[str], vocab: Vocab) -> "Dialogue":
        return cls(tuple(Utterance.from_text(t, vocab) for t in turns))


@dataclass
class LoadReport:
    """Per-file accounting of skipped lines and rejected records."""

    parse_errors: list[str] = field(default_factory=list)
    rejected_records: int = 0

    @property
    def error_count(self) -> int:
        return len(self.parse_errors)


def load_corpus(
    path: str, vocab: Optional[Vocab] = None, min_freq: int = 2
) -> tuple[list[Dialogue], Vocab, LoadReport]:
    """Load a JSONL corpus, building a vocabulary when none is given.

    Malformed lines and records violating dialogue invariants (fewer than
    two turns, empty turns) are collected in the report rather than
    aborting the load.
    """
    records: list[list[str]] = []
    report = LoadReport()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                turns = obj["turns"]
                if not isinstance(turns, list) or not all(
                    isinstance(t, str) for t in turns
                ):
                    raise ValueError("'turns' must be a list of strings")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.parse_errors.append(f"line {lineno}: {exc}")
                continue
            if len(turns) < 2 or any(not tokenize(t) for t in turns):
                report.rejected_records += 1
                continue
            records.append(turns)

    if vocab is None:
        vocab = Vocab.from_texts(
            (t for turns in records for t in turns), min_freq=min_freq
        )
    dialogues = [Dialogue.from_turns(turns, vocab) for turns in records]
    return dialogues, vocab, report


def save_corpus(dialogues: Sequence[Dialogue], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps({"turns": [u.text for u in d.utterances]}) + "\n")


def window_dialogue(d: Dialogue, w: int) -> list[Dialogue]:
    """Stride-1 sliding windows of exactly ``w`` utterances.

    Dialogues shorter than the window are kept whole.
    """
    if w < 2:
        raise ValueError(f"window size must be >= 2, got {w}")
    if len(d) <= w:
        return [d]
    return [
        Dialogue(d.utterances[i : i + w]) for i in range(len(d) - w + 1)
    ]


def window_corpus(dialogues: Sequence[Dialogue], w: int) -> list[Dialogue]:
    return [win for d in dialogues for win in window_dialogue(d, w)]


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic corpus with known many-to-many structure.

    Each template is the root of a tree: every context node has
    ``branching`` valid continuations, so the corpus enumerates
    templates * branching^(turns-1) distinct dialogues.
    """

    templates: int = 8
    branching: int = 3
    turns: int = 4
    vocab_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.branching < 1:
            raise ValueError("branching must be >= 1")
        if self.turns < 2:
            raise ValueError("turns must be >= 2")
        if self.templates < 1:
            raise ValueError("templates must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")


PREFIX_SEP = " || "


@dataclass
class SynthCorpus:
    dialogues: list[Dialogue]
    vocab: Vocab
    # maps every context prefix (turn texts joined by PREFIX_SEP) to the
    # set of valid next-turn texts
    continuations: dict[str, list[str]]


def prefix_key(turn_texts: Sequence[str]) -> str:
    return PREFIX_SEP.join(turn_texts)


def synth_corpus(spec: SynthSpec) -> SynthCorpus:
    """Deterministically synthesize a branching dialogue corpus.

    At template m, turn j, the same ``branching`` candidate utterances
    continue every node at depth j-1, so each context prefix has exactly
    ``branching`` valid continuations and ground truth is enumerable.
    """
    rng = np.random.default_rng(spec.seed)
    pool = [f"w{i:03d}" for i in range(spec.vocab_size)]

    def sample_utterance(taken: set[str]) -> str:
        # rejection keeps sibling utterances distinct
        while True:
            k = int(rng.integers(3, 6))
            words = [pool[int(i)] for i in rng.integers(0, len(pool), size=k)]
            text = " ".join(words)
            if text not in taken:
                taken.add(text)
                return text

    all_turn_lists: list[list[str]] = []
    continuations: dict[str, list[str]] = {}
    for m in range(spec.templates):
        root = f"t{m:03d} " + sample_utterance(set())
        # options[j] holds the `branching` candidate texts for turn j
        options: list[list[str]] = []
        for _j in range(1, spec.turns):
            taken: set[str] = set()
            options.append([sample_utterance(taken) for _ in range(spec.branching)])

        paths: list[list[str]] = [[root]]
        for opts in options:
            paths = [p + [o] for p in paths for o in opts]
        all_turn_lists.extend(paths)

        # every proper prefix maps to its valid next-turn set
        prefixes: list[list[str]] = [[root]]
        for opts in options:
            for p in prefixes:
                continuations[prefix_key(p)] = list(opts)
            prefixes = [p + [o] for p in prefixes for o in opts]

    vocab = Vocab.from_texts(
        (t for turns in all_turn_lists for t in turns), min_freq=1
    )
    dialogues = [Dialogue.from_turns(turns, vocab) for turns in all_turn_lists]
    return SynthCorpus(dialogues=dialogues, vocab=vocab, continuations=continuations)


def save_continuations(continuations: dict[str, list[str]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(continuations, fh, indent=0)
