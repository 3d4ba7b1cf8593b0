"""Closed word-level vocabulary and whitespace tokenizer."""
from __future__ import annotations

import json
import re
from pathlib import Path

from .scenegen import BACKGROUND_NAMES, template_vocabulary

PAD, BOS, EOS, UNK, IMG, RESP = "<pad>", "<bos>", "<eos>", "<unk>", "<img>", "<resp>"
SPECIALS = (PAD, BOS, EOS, UNK, IMG, RESP)

DIFF_INSTRUCTION = "describe the difference between the images"
CAPTION_INSTRUCTION = "describe the image"
KIND_OPTIONS = (
    "an object was removed",
    "an object was added",
    "an object became different",
    "two objects swapped places",
)

_EXTRA_WORDS = (
    "describe", "difference", "between", "images", "image", "object", "objects", "changed",
    "two", "first", "second", "what", "which", "is", "it", "of", "to", "answer", "option",
    "background", "color", "shape", "nothing", "same", "different", "there",
)


class Vocab:
    def __init__(self, tokens):
        self.itos = list(tokens)
        if self.itos[:len(SPECIALS)] != list(SPECIALS):
            raise ValueError("vocabulary must start with the reserved markers")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    @property
    def img(self) -> int:
        return self.stoi[IMG]

    @property
    def resp(self) -> int:
        return self.stoi[RESP]

    @staticmethod
    def split(text: str) -> list[str]:
        return text.lower().split()

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk) for w in self.split(text)]

    def covers(self, text: str) -> bool:
        return all(w in self.stoi for w in self.split(text))

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            tok = self.itos[int(i)]
            if tok == EOS:
                break
            if tok not in SPECIALS:
                words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({t: i for i, t in enumerate(self.itos)}, indent=0) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        table = json.loads(Path(path).read_text())
        return cls([t for t, _ in sorted(table.items(), key=lambda kv: kv[1])])


def default_vocab() -> Vocab:
    words = set(template_vocabulary()) | set(_EXTRA_WORDS) | set(BACKGROUND_NAMES)
    for text in (DIFF_INSTRUCTION, CAPTION_INSTRUCTION, *KIND_OPTIONS):
        words.update(text.split())
    words = {w for w in words if re.fullmatch(r"[a-z]+", w)}
    return Vocab(list(SPECIALS) + sorted(words))
