"""Tokenizer, synthetic image/keyword/report generator, and batching.

The synthetic task is built so the report is predictable only from image and
keywords jointly: lesion blobs are rendered in one of four grid quadrants
(position readable only from the image), and blob type names come in visually
identical twin pairs (the member readable only from the keyword). The report
template is a deterministic function of (type, row, col), so the mapping is
learnable.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

PAD, BOS, EOS, SEP, UNK = "[PAD]", "[BOS]", "[EOS]", "[SEP]", "<UNK>"
RESERVED = [PAD, BOS, EOS, SEP, UNK]
MAX_VOCAB = 5000

# twin pairs: both members of a row render identically
BLOB_TYPES = [
    ("spot", "dot"),
    ("ring", "halo"),
    ("streak", "line"),
    ("patch", "shade"),
]
ROW_WORDS = ["upper", "lower"]
COL_WORDS = ["left", "right"]

_TEMPLATES = [
    "a {t} at {r} {c}",
    "there is a {t} at {r} {c}",
    "the image shows a {t} at {r} {c} region",
]


class Vocab:
    """Frequency-ranked word vocabulary with fixed reserved ids."""

    def __init__(self, words: Sequence[str]):
        self.id_to_word: List[str] = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(self.id_to_word) > MAX_VOCAB:
            raise ValueError(f"vocabulary exceeds {MAX_VOCAB} entries")
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self):
        return len(self.id_to_word)

    @property
    def pad_id(self):
        return self.word_to_id[PAD]

    @property
    def bos_id(self):
        return self.word_to_id[BOS]

    @property
    def eos_id(self):
        return self.word_to_id[EOS]

    @property
    def sep_id(self):
        return self.word_to_id[SEP]

    @property
    def unk_id(self):
        return self.word_to_id[UNK]

    def encode(self, text: str) -> List[int]:
        return [self.word_to_id.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        # ids past the vocabulary (a model may reserve more rows) read as UNK
        special = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.id_to_word[i] if 0 <= i < len(self.id_to_word) else UNK
                        for i in ids if i not in special)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.id_to_word, fh)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            words = json.load(fh)
        v = cls.__new__(cls)
        v.id_to_word = words
        v.word_to_id = {w: i for i, w in enumerate(words)}
        return v


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Top words by frequency (ties broken lexicographically), under the cap."""
    counts = Counter()
    n_docs = 0
    for line in corpus:
        n_docs += 1
        counts.update(w for w in line.split() if w not in RESERVED)
    if n_docs == 0:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [w for w, _ in ranked[: MAX_VOCAB - len(RESERVED)]]
    return Vocab(keep)


# ---------------------------------------------------------------------
# synthetic samples
# ---------------------------------------------------------------------

@dataclass
class SyntheticSample:
    image: np.ndarray      # (side, side, 1) in [0, 1]
    keywords: str          # space-separated keyword words
    report: str            # space-separated report words


def _render_blob(img: np.ndarray, pair_idx: int, row: int, col: int) -> None:
    side = img.shape[0]
    cell = side // 2
    y0, x0 = row * cell, col * cell
    cy, cx = y0 + cell // 2, x0 + cell // 2
    yy, xx = np.mgrid[0:side, 0:side]
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    rad = max(1.5, cell / 2.5)
    if pair_idx == 0:      # filled disk
        img[r2 <= rad ** 2, 0] = 1.0
    elif pair_idx == 1:    # ring
        img[(r2 <= rad ** 2) & (r2 >= (rad - 1.2) ** 2), 0] = 1.0
    elif pair_idx == 2:    # horizontal bar
        img[cy - 1:cy + 1, x0:x0 + cell, 0] = 1.0
    else:                  # filled square
        h = int(rad)
        img[cy - h:cy + h, cx - h:cx + h, 0] = 1.0


def make_sample(seed: int, index: int, side: int = 16) -> SyntheticSample:
    rng = np.random.default_rng([seed, index])
    pair_idx = int(rng.integers(len(BLOB_TYPES)))
    member = int(rng.integers(2))
    row = int(rng.integers(len(ROW_WORDS)))
    col = int(rng.integers(len(COL_WORDS)))
    type_word = BLOB_TYPES[pair_idx][member]
    img = (rng.uniform(0.0, 0.15, size=(side, side, 1))).astype(float)
    _render_blob(img, pair_idx, row, col)
    # template is a fixed function of content so the report is learnable
    template = _TEMPLATES[(pair_idx + 2 * member + row + col) % len(_TEMPLATES)]
    report = template.format(t=type_word, r=ROW_WORDS[row], c=COL_WORDS[col])
    return SyntheticSample(image=img, keywords=type_word, report=report)


def synth_generate(n: int, seed: int, side: int = 16) -> List[SyntheticSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [make_sample(seed, i, side) for i in range(n)]


def corpus_words() -> List[str]:
    """Every word the synthetic task can emit; used to build the vocab."""
    words = set()
    for pair in BLOB_TYPES:
        words.update(pair)
    words.update(ROW_WORDS)
    words.update(COL_WORDS)
    for t in _TEMPLATES:
        words.update(w for w in t.split() if not w.startswith("{"))
    return sorted(words)


def default_vocab() -> Vocab:
    lines = []
    for t in _TEMPLATES:
        for pair in BLOB_TYPES:
            for m in pair:
                lines.append(t.format(t=m, r=ROW_WORDS[0], c=COL_WORDS[0]))
    lines.append(" ".join(ROW_WORDS + COL_WORDS))
    return build_vocab(lines)


# ---------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray     # (N, side, side, 1)
    kw_ids: np.ndarray     # (N, S_L)
    kw_mask: np.ndarray    # (N, S_L) bool, True = real token
    rep_in: np.ndarray     # (N, T) decoder input: BOS + tokens
    rep_tgt: np.ndarray    # (N, T) next-token targets: tokens + EOS
    rep_mask: np.ndarray   # (N, T) bool over targets
    rep_ids: np.ndarray    # (N, T) report content ids (padded), for alignment
    rep_content_mask: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def encode_keyword_string(vocab: Vocab, keywords: str, s_l: int,
                          drop_rng: Optional[np.random.Generator] = None,
                          dropout: float = 0.0):
    """Tokenize [SEP]-joined keywords into a fixed-length padded row."""
    words = [w for w in keywords.split() if w]
    if drop_rng is not None and dropout > 0.0:
        words = [w for w in words if drop_rng.uniform() >= dropout]
    tokens: List[int] = []
    for i, w in enumerate(words):
        if i > 0:
            tokens.append(vocab.sep_id)
        tokens.append(vocab.word_to_id.get(w, vocab.unk_id))
    if not tokens:
        tokens = [vocab.sep_id]
    tokens = tokens[:s_l]
    ids = np.full(s_l, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(s_l, dtype=bool)
    ids[: len(tokens)] = tokens
    mask[: len(tokens)] = True
    return ids, mask


def make_batch(samples: Sequence[SyntheticSample], vocab: Vocab, s_l: int,
               max_len: int, keyword_dropout: float = 0.0,
               drop_rng: Optional[np.random.Generator] = None) -> Batch:
    n = len(samples)
    if n == 0:
        raise ValueError("batch must be nonempty")
    images = np.stack([s.image for s in samples])
    kw_ids = np.zeros((n, s_l), dtype=np.int64)
    kw_mask = np.zeros((n, s_l), dtype=bool)
    t = max_len + 1  # room for BOS/EOS shift
    rep_in = np.zeros((n, t), dtype=np.int64)
    rep_tgt = np.zeros((n, t), dtype=np.int64)
    rep_mask = np.zeros((n, t), dtype=bool)
    rep_ids = np.zeros((n, t), dtype=np.int64)
    rep_content = np.zeros((n, t), dtype=bool)
    for i, s in enumerate(samples):
        kw_ids[i], kw_mask[i] = encode_keyword_string(vocab, s.keywords, s_l,
                                                      drop_rng, keyword_dropout)
        toks = vocab.encode(s.report)[:max_len]
        seq_in = [vocab.bos_id] + toks
        seq_tgt = toks + [vocab.eos_id]
        rep_in[i, : len(seq_in)] = seq_in
        rep_tgt[i, : len(seq_tgt)] = seq_tgt
        rep_mask[i, : len(seq_tgt)] = True
        rep_ids[i, : len(toks)] = toks
        rep_content[i, : len(toks)] = True
    return Batch(images, kw_ids, kw_mask, rep_in, rep_tgt, rep_mask, rep_ids, rep_content)


# ---------------------------------------------------------------------
# dataset files: line-delimited JSON records
# ---------------------------------------------------------------------

def save_dataset(samples: Sequence[SyntheticSample], seed: int, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            fh.write(json.dumps({"seed": [seed, i], "keywords": s.keywords,
                                 "report": s.report}) + "\n")


def load_dataset(path: str, side: int = 16) -> List[SyntheticSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            base, idx = rec["seed"]
            s = make_sample(base, idx, side)
            # text fields are authoritative; image re-rendered from the seed
            s.keywords = rec["keywords"]
            s.report = rec["report"]
            out.append(s)
    return out
