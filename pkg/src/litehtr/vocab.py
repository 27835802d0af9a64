"""Character-level token inventory with structural (contextual) labels.

Visual labels are the characters readable from the image. Three contextual
labels mark page structure: start-of-page, end-of-line, end-of-page. The
newline character is the textual carrier of end-of-line in transcripts and
manifests; it is never a visual label.

Id layout: visual labels first (sorted, contiguous from 0), then SOP, EOL,
EOP. ``nb_class`` counts all of them and is the width of the model's output
head. ``pad_id == nb_class`` sits outside the class range so padding can
never be predicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

SOP = "<sop>"
EOL = "<eol>"
EOP = "<eop>"

CONTEXTUAL_LABELS = (SOP, EOL, EOP)

_VOCAB_MAGIC = "litehtr-vocab"
_VOCAB_VERSION = 1


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    """A sequence of token ids, optionally flagged as truncated by decoding."""

    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]


@dataclass(frozen=True)
class Vocabulary:
    """Immutable mapping between characters and token ids."""

    visual_labels: tuple[str, ...]
    _char_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for c in self.visual_labels:
            if len(c) != 1:
                raise VocabularyError(f"visual label must be a single character: {c!r}")
            if c == "\n":
                raise VocabularyError("newline cannot be a visual label")
        if len(set(self.visual_labels)) != len(self.visual_labels):
            raise VocabularyError("duplicate visual labels")
        object.__setattr__(
            self, "_char_to_id", {c: i for i, c in enumerate(self.visual_labels)}
        )

    @property
    def nb_class(self) -> int:
        return len(self.visual_labels) + len(CONTEXTUAL_LABELS)

    @property
    def sop_id(self) -> int:
        return len(self.visual_labels)

    @property
    def eol_id(self) -> int:
        return len(self.visual_labels) + 1

    @property
    def eop_id(self) -> int:
        return len(self.visual_labels) + 2

    @property
    def pad_id(self) -> int:
        return self.nb_class

    def char_id(self, c: str) -> int:
        try:
            return self._char_to_id[c]
        except KeyError:
            raise VocabularyError(f"character {c!r} not in vocabulary") from None

    def id_char(self, i: int) -> str:
        if 0 <= i < len(self.visual_labels):
            return self.visual_labels[i]
        raise VocabularyError(f"id {i} is not a visual label id")

    def __contains__(self, c: str) -> bool:
        return c in self._char_to_id

    def __len__(self) -> int:
        return self.nb_class


def build_vocabulary(transcripts: Iterable[str]) -> Vocabulary:
    """Collect the sorted set of non-newline characters from ``transcripts``.

    Deterministic for a given character multiset. Raises on an empty charset.
    """
    chars: set[str] = set()
    for text in transcripts:
        chars.update(c for c in text if c != "\n")
    if not chars:
        raise VocabularyError("empty charset")
    return Vocabulary(tuple(sorted(chars)))


def encode_transcript(text: str, vocab: Vocabulary) -> TokenSequence:
    """[SOP] + per-character ids (newline -> EOL) + [EOP]."""
    ids = [vocab.sop_id]
    for offset, c in enumerate(text):
        if c == "\n":
            ids.append(vocab.eol_id)
        elif c in vocab:
            ids.append(vocab.char_id(c))
        else:
            raise VocabularyError(
                f"out-of-vocabulary character {c!r} at offset {offset}"
            )
    ids.append(vocab.eop_id)
    return TokenSequence(tuple(ids))


def decode_tokens(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    """Best-effort inverse of :func:`encode_transcript`.

    SOP stripped, EOL -> newline, pad and unknown ids ignored; decoding stops
    at the first EOP.
    """
    out: list[str] = []
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    for i in ids:
        if i == vocab.eop_id:
            break
        if i == vocab.eol_id:
            out.append("\n")
        elif 0 <= i < len(vocab.visual_labels):
            out.append(vocab.visual_labels[i])
        # SOP, pad, out-of-range: skipped
    return "".join(out)


def _escape(c: str) -> str:
    return c.encode("unicode_escape").decode("ascii")


def _unescape(s: str) -> str:
    return s.encode("ascii").decode("unicode_escape")


def save_vocabulary(vocab: Vocabulary, path) -> None:
    """Line-delimited file: header with version and nb_class, then one
    escaped visual label per line."""
    lines = [f"{_VOCAB_MAGIC} v{_VOCAB_VERSION} nb_class={vocab.nb_class}"]
    lines.extend(_escape(c) for c in vocab.visual_labels)
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise VocabularyError(f"empty vocabulary file: {path}")
    header = lines[0].split()
    if len(header) != 3 or header[0] != _VOCAB_MAGIC:
        raise VocabularyError(f"bad vocabulary header: {lines[0]!r}")
    vocab = Vocabulary(tuple(_unescape(s) for s in lines[1:]))
    declared = int(header[2].removeprefix("nb_class="))
    if declared != vocab.nb_class:
        raise VocabularyError(
            f"header nb_class={declared} disagrees with {vocab.nb_class} labels"
        )
    return vocab
