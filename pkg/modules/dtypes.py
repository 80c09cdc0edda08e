from dataclasses import dataclass
from typing import Final, Literal, NewType

import numpy as np
import numpy.typing as npt

# Nominal types for identifiers.
# Using NewType creates distinct types that are not interchangeable.
# A function expecting an ImageId will raise a type error if given a TokenId.
TokenId = NewType("TokenId", int)
ImageId = NewType("ImageId", int)

# Dense numeric payloads. Everything the model touches is float64.
type FloatArray = npt.NDArray[np.float64]
type IntArray = npt.NDArray[np.int64]
type BoolArray = npt.NDArray[np.bool_]

# Literals for closed sets of values
type SplitName = Literal["train", "val", "test"]
SPLITS: Final[tuple[SplitName, ...]] = ("train", "val", "test")

# Special token conventions shared by the vocabulary, the model and every decoder.
PAD: Final = TokenId(0)
BOS: Final = TokenId(1)  # the [CLR] start symbol
EOS: Final = TokenId(2)
UNK: Final = TokenId(3)
SPECIAL_TOKENS: Final[tuple[str, ...]] = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True, slots=True)
class TokenSeq:
    """A caption as vocabulary ids.

    Decoded captions start with BOS and, unless truncated at max_len, end with EOS.
    """

    ids: tuple[TokenId, ...]

    @property
    def words(self) -> tuple[TokenId, ...]:
        """Content tokens with BOS/EOS stripped and anything after EOS dropped."""
        out: list[TokenId] = []
        for token in self.ids:
            if token == BOS:
                continue
            if token == EOS:
                break
            out.append(token)
        return tuple(out)

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, slots=True)
class FeatureGrid:
    """Region features of one image (the contract every feature provider satisfies)."""

    values: FloatArray

    @property
    def n_regions(self) -> int:
        return int(self.values.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, slots=True)
class CaptionSet:
    """Reference captions of one image."""

    image_id: ImageId
    split: SplitName
    captions: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class SplitManifest:
    train: tuple[ImageId, ...]
    val: tuple[ImageId, ...]
    test: tuple[ImageId, ...]

    def ids(self, split: SplitName) -> tuple[ImageId, ...]:
        match split:
            case "train":
                return self.train
            case "val":
                return self.val
            case "test":
                return self.test
