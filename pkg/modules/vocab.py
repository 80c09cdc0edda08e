from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from pathlib import Path

from modules.dtypes import BOS, EOS, SPECIAL_TOKENS, UNK, TokenId, TokenSeq
from modules.exceptions import DataError, TokenRangeError
from modules.metrics import tokenize

log = logging.getLogger(__name__)


class Vocabulary:
    """Word <-> id mapping. Ids 0..3 are always <pad>, <bos>, <eos>, <unk>."""

    def __init__(self, words: Iterable[str]) -> None:
        self._tokens: list[str] = list(SPECIAL_TOKENS)
        self._index: dict[str, TokenId] = {tok: TokenId(i) for i, tok in enumerate(self._tokens)}
        for word in words:
            if word not in self._index:
                self._index[word] = TokenId(len(self._tokens))
                self._tokens.append(word)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, word: object) -> bool:
        return word in self._index

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def id_of(self, word: str) -> TokenId:
        return self._index.get(word, UNK)

    def word_of(self, token: int) -> str:
        if not 0 <= token < len(self._tokens):
            msg = f"token id {token} outside vocabulary of size {len(self._tokens)}"
            raise TokenRangeError(msg)
        return self._tokens[token]

    def encode(self, text: str | Sequence[str], max_len: int | None = None) -> TokenSeq:
        """BOS + word ids + EOS; with `max_len`, words are cut so that words + EOS fit."""
        words = tokenize(text) if isinstance(text, str) else tuple(text)
        ids = [self.id_of(w) for w in words]
        if max_len is not None:
            ids = ids[: max_len - 1]
        return TokenSeq((BOS, *ids, EOS))

    def decode(self, seq: TokenSeq) -> tuple[str, ...]:
        """Content words of a decoded caption."""
        return tuple(self.word_of(t) for t in seq.words)

    def to_text(self, seq: TokenSeq) -> str:
        return " ".join(self.decode(seq))

    def write(self, path: Path) -> None:
        path.write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> Vocabulary:
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            msg = f"cannot read vocabulary {path}: {e}"
            raise DataError(msg) from e
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            msg = f"{path}: vocabulary must start with {', '.join(SPECIAL_TOKENS)}"
            raise DataError(msg)
        return cls(line for line in lines[len(SPECIAL_TOKENS) :] if line)


def build_vocabulary(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Words seen at least `min_count` times, in order of first appearance."""
    counts: Counter[str] = Counter()
    for caption in captions:
        counts.update(tokenize(caption))
    kept = [w for w, c in counts.items() if c >= min_count]
    log.info("Vocabulary: kept %d of %d words (min_count=%d).", len(kept), len(counts), min_count)
    return Vocabulary(kept)
