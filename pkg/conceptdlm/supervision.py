"""
This module contains the word-level tokenizer, the location of concept spans in
token sequences and the token-pair supervision masks built from concept graphs.

A mask entry ``(i, j, v)`` labels attention from query token ``i`` to key
token ``j``: ``+1`` encouraged, ``-1`` discouraged; absent pairs are neutral.
"""

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .concept_graph import ConceptGraph
from .dataset import PerturbMode, ReasoningSample, load_manifest, load_samples
from .errors import ContractError, StalenessError
from .logger import logger

SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[BOS]", "[EOS]", "[UNK]")
PAD_ID, MASK_ID, BOS_ID, EOS_ID, UNK_ID = range(len(SPECIAL_TOKENS))
TOKEN_PATTERN = re.compile(r"\d+|[A-Za-z_]+|[^\sA-Za-z\d]")
VOCAB_FILE_NAME = "vocab.json"


class MaskConvention(str, Enum):
    FIGURE_ALIGNED = "figure_aligned"
    PAPER_LITERAL = "paper_literal"

    @classmethod
    def parse(cls, value: "str | MaskConvention") -> "MaskConvention":
        try:
            return cls(value)
        except ValueError:
            raise ContractError(f"unknown mask convention: {value!r}")


def split_words(text: str) -> List[str]:
    return TOKEN_PATTERN.findall(text)


def normalize(text: str) -> str:
    """The form a text takes after a tokenize/detokenize round trip."""
    return " ".join(split_words(text))


@dataclass
class Vocab:
    """
    Word-level vocabulary with the special tokens at ids 0-4.

    The tokenizer hash identifies the vocabulary; masks and checkpoints carry
    it so that artifacts built under another vocabulary are rejected.
    """

    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the special tokens")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for text in texts:
            words.update(split_words(text))
        return cls(list(SPECIAL_TOKENS) + sorted(words - set(SPECIAL_TOKENS)))

    @classmethod
    def from_samples(cls, samples: Iterable[ReasoningSample]) -> "Vocab":
        texts: List[str] = []
        for sample in samples:
            texts.extend([sample.question, sample.response])
        return cls.build(texts)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def dumps(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False)

    @property
    def hash(self) -> str:
        return hashlib.md5(self.dumps().encode("utf-8")).hexdigest()

    def save(self, path: Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fp:
            return cls(json.load(fp)["tokens"])


@dataclass
class Tokenization:
    """
    Token strings and ids of one sequence.

    Attributes:
        tokens: Token strings (unknown words keep their text).
        ids: Vocabulary ids, ``UNK_ID`` for unknown words.
        prompt_len: Index where the response starts.
    """

    tokens: List[str]
    ids: np.ndarray
    prompt_len: int = 0

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.tokens) != len(self.ids):
            raise ContractError("tokens and ids differ in length")
        if not 0 <= self.prompt_len <= len(self.ids):
            raise ContractError(f"prompt_len {self.prompt_len} outside [0, {len(self.ids)}]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def response_len(self) -> int:
        return len(self.ids) - self.prompt_len


def tokenize(text: str, vocab: Vocab) -> Tokenization:
    tokens = split_words(text)
    return Tokenization(tokens=tokens, ids=np.array([vocab.id_of(t) for t in tokens], dtype=np.int64))


def detokenize(ids: Sequence[int], vocab: Vocab, skip_special: bool = False) -> str:
    words = []
    for i in ids:
        i = int(i)
        if skip_special and i < len(SPECIAL_TOKENS):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def encode_prompt(question: str, vocab: Vocab) -> Tokenization:
    """``[BOS] question``; the whole sequence is prompt."""
    body = tokenize(question, vocab)
    tokens = [SPECIAL_TOKENS[BOS_ID]] + body.tokens
    ids = np.concatenate([[BOS_ID], body.ids])
    return Tokenization(tokens=tokens, ids=ids, prompt_len=len(ids))


def encode_sample(sample: ReasoningSample, vocab: Vocab, response_pad: int = 0) -> Tokenization:
    """
    Lay out ``[BOS] question response [EOS]`` for training.

    Args:
        sample: The sample to encode.
        vocab: Vocabulary used for the ids.
        response_pad: If larger than the response (EOS included), pad the
            response with further EOS tokens up to this many tokens.
    """
    prompt = encode_prompt(sample.question, vocab)
    response = tokenize(sample.response, vocab)
    n_eos = max(1, response_pad - len(response))
    eos = SPECIAL_TOKENS[EOS_ID]
    tokens = prompt.tokens + response.tokens + [eos] * n_eos
    ids = np.concatenate([prompt.ids, response.ids, np.full(n_eos, EOS_ID)])
    return Tokenization(tokens=tokens, ids=ids, prompt_len=prompt.prompt_len)


# Spans


@dataclass(frozen=True)
class TokenSpan:
    concept: str
    start: int
    end: int


@dataclass(frozen=True)
class SpanFailure:
    concept: str
    reason: str
    n_matches: int


def find_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> List[int]:
    """Start indices of every occurrence of ``needle`` in ``haystack``."""
    n = len(needle)
    if n == 0:
        return []
    first = needle[0]
    return [
        i
        for i in range(len(haystack) - n + 1)
        if haystack[i] == first and list(haystack[i : i + n]) == list(needle)
    ]


def locate_spans(
    graph: ConceptGraph, tok: Tokenization
) -> Tuple[Dict[str, TokenSpan], List[SpanFailure]]:
    """
    Find the unique token span of every concept.

    Concepts are matched on normalised token strings. Concepts with no match,
    or with several, are returned as failures instead of raising.
    """
    spans: Dict[str, TokenSpan] = {}
    failures: List[SpanFailure] = []
    for concept in graph.concepts:
        needle = split_words(concept)
        starts = find_subsequence(tok.tokens, needle)
        if len(starts) == 1:
            spans[concept] = TokenSpan(concept, starts[0], starts[0] + len(needle))
        elif not starts:
            failures.append(SpanFailure(concept, "absent", 0))
        else:
            failures.append(SpanFailure(concept, "ambiguous", len(starts)))
    return spans, failures


# Masks


@dataclass
class SupervisionMask:
    """
    Sparse token-pair labels of one sequence.

    Attributes:
        seq_len: Length of the tokenized sequence.
        entries: Sorted ``(i, j, v)`` triples with ``v`` in ``{-1, +1}``.
        sample_id: Sample the mask belongs to.
        tokenizer_hash: Hash of the vocabulary the sequence was encoded with.
    """

    seq_len: int
    entries: List[Tuple[int, int, int]] = field(default_factory=list)
    sample_id: str = ""
    tokenizer_hash: str = ""

    def __post_init__(self) -> None:
        self.entries = sorted((int(i), int(j), int(v)) for i, j, v in self.entries)
        seen = set()
        for i, j, v in self.entries:
            if v not in (-1, 1):
                raise ContractError(f"mask value {v} at ({i}, {j}) is not -1 or +1")
            if not (0 <= i < self.seq_len and 0 <= j < self.seq_len):
                raise ContractError(f"mask entry ({i}, {j}) outside length {self.seq_len}")
            if (i, j) in seen:
                raise ContractError(f"duplicate mask entry ({i}, {j})")
            seen.add((i, j))

    @property
    def valid_rows(self) -> List[int]:
        return sorted({i for i, _, _ in self.entries})

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.seq_len, self.seq_len), dtype=np.int8)
        for i, j, v in self.entries:
            dense[i, j] = v
        return dense

    def transpose(self) -> "SupervisionMask":
        return SupervisionMask(
            self.seq_len, [(j, i, v) for i, j, v in self.entries], self.sample_id, self.tokenizer_hash
        )

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "seq_len": self.seq_len,
            "tokenizer_hash": self.tokenizer_hash,
            "entries": [list(e) for e in self.entries],
        }

    @classmethod
    def from_record(cls, record: dict) -> "SupervisionMask":
        return cls(
            seq_len=int(record["seq_len"]),
            entries=[tuple(e) for e in record["entries"]],
            sample_id=record["id"],
            tokenizer_hash=record["tokenizer_hash"],
        )


def build_mask(
    graph: ConceptGraph,
    spans: Dict[str, TokenSpan],
    tok: Tokenization,
    convention: "str | MaskConvention" = MaskConvention.FIGURE_ALIGNED,
    sample_id: str = "",
    tokenizer_hash: str = "",
) -> SupervisionMask:
    """
    Expand concept relations into token-pair labels.

    Rows are queries. Under ``figure_aligned`` an effect token attending to
    one of its cause tokens is ``+1`` and the reverse direction is ``-1``;
    for concept pairs without an edge label, attending to a token of a
    strictly later step is ``-1``. Edge labels take precedence over the step
    rule. ``paper_literal`` is the transpose of the same mask.

    Raises:
        ContractError: If the convention is unknown.
    """
    convention = MaskConvention.parse(convention)
    labels: Dict[Tuple[int, int], int] = {}

    def cells(a: TokenSpan, b: TokenSpan):
        for q in range(a.start, a.end):
            for k in range(b.start, b.end):
                yield q, k

    if graph.step_of:
        located = [c for c in graph.concepts if c in spans and c in graph.step_of]
        for a in located:
            for b in located:
                if a != b and graph.step_of[b] > graph.step_of[a]:
                    for cell in cells(spans[a], spans[b]):
                        labels[cell] = -1

    edge_pairs = [(c, e) for c, e in graph.edge_pairs() if c in spans and e in spans and c != e]
    for cause, effect in edge_pairs:
        for q, k in cells(spans[cause], spans[effect]):
            labels[(q, k)] = -1
    for cause, effect in edge_pairs:
        for cell in cells(spans[effect], spans[cause]):
            labels[cell] = 1

    entries = [(q, k, v) for (q, k), v in labels.items() if q != k]
    mask = SupervisionMask(len(tok), entries, sample_id, tokenizer_hash)
    return mask.transpose() if convention is MaskConvention.PAPER_LITERAL else mask


def save_masks(masks: Iterable[SupervisionMask], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        for mask in masks:
            fp.write(json.dumps(mask.to_record()) + "\n")


def load_masks(path: Path, tokenizer_hash: Optional[str] = None) -> Dict[str, SupervisionMask]:
    """
    Read a mask sidecar keyed by sample id.

    Raises:
        StalenessError: If ``tokenizer_hash`` is given and a mask was built
            under another vocabulary.
    """
    masks: Dict[str, SupervisionMask] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.strip():
                continue
            record = json.loads(line)
            if tokenizer_hash is not None and record["tokenizer_hash"] != tokenizer_hash:
                raise StalenessError(
                    f"mask for {record['id']} was built with tokenizer {record['tokenizer_hash']}, "
                    f"expected {tokenizer_hash}"
                )
            masks[record["id"]] = SupervisionMask.from_record(record)
    return masks


def build_sample_masks(
    samples: Sequence[ReasoningSample],
    graphs: Dict[str, Optional[ConceptGraph]],
    vocab: Vocab,
    convention: "str | MaskConvention" = MaskConvention.FIGURE_ALIGNED,
    response_pad: int = 0,
) -> Tuple[List[SupervisionMask], Dict[str, List[SpanFailure]]]:
    """
    Build masks for every sample that has a graph whose concepts all locate.

    Samples without a graph, or with any span failure, get no mask and are
    trained without supervision.

    Returns:
        The masks and the span failures keyed by sample id.
    """
    masks: List[SupervisionMask] = []
    failures: Dict[str, List[SpanFailure]] = {}
    for sample in tqdm(samples, desc="Building masks"):
        graph = graphs.get(sample.id)
        if graph is None:
            continue
        tok = encode_sample(sample, vocab, response_pad)
        spans, sample_failures = locate_spans(graph, tok)
        if sample_failures:
            failures[sample.id] = sample_failures
            continue
        masks.append(build_mask(graph, spans, tok, convention, sample.id, vocab.hash))
    if failures:
        logger.warning(f"{len(failures)} samples dropped from supervision after span failures")
    logger.info(f"Built {len(masks)} masks for {len(samples)} samples")
    return masks, failures


# Corpus artifacts


def build_corpus_vocab(data_dir: Path) -> Vocab:
    """Build the vocabulary of every file listed in the manifest and save it."""
    data_dir = Path(data_dir)
    samples: List[ReasoningSample] = []
    for name in load_manifest(data_dir)["files"].values():
        samples.extend(load_samples(data_dir / name))
    vocab = Vocab.from_samples(samples)
    vocab.save(data_dir / VOCAB_FILE_NAME)
    logger.info(f"Vocabulary of {len(vocab)} tokens written (hash {vocab.hash})")
    return vocab


def load_corpus_vocab(data_dir: Path) -> Vocab:
    path = Path(data_dir) / VOCAB_FILE_NAME
    return Vocab.load(path) if path.is_file() else build_corpus_vocab(data_dir)


def mask_file_name(mode: "str | PerturbMode", convention: "str | MaskConvention") -> str:
    return f"masks_{PerturbMode.parse(mode).value}_{MaskConvention.parse(convention).value}.jsonl"
