"""
This module contains the masked-diffusion transformer: parameters, the
bidirectional forward pass with attention capture, forward masking, the SFT
loss, the block decoder and checkpoint files.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ContractError, StalenessError
from .numerics import AdamState, Tensor
from .supervision import BOS_ID, MASK_ID, PAD_ID, Tokenization

Params = Dict[str, Tensor]
SUPPRESSED_IDS = (PAD_ID, MASK_ID, BOS_ID)


@dataclass
class ModelConfig:
    """
    Shape of the transformer.

    Attributes:
        vocab_size: Number of token ids (specials included).
        d_model: Width of the residual stream.
        n_layers: Number of transformer blocks.
        n_heads: Attention heads per block; ``d_model`` must divide evenly.
        max_len: Longest sequence the positional table covers.
        d_ff: Feed-forward width, ``4 * d_model`` when not given.
        init_std: Standard deviation of the initial weights.
    """

    vocab_size: int = 0
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 640
    d_ff: Optional[int] = None
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if min(self.d_model, self.n_heads, self.max_len, self.d_ff) <= 0 or self.n_layers < 0:
            raise ContractError(f"model dimensions must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def init_params(config: ModelConfig, seed: int = 42) -> Params:
    """Draw fresh parameters; every tensor requires gradients."""
    if config.vocab_size <= 0:
        raise ContractError("vocab_size must be set before initialising a model")
    rng = np.random.default_rng(seed)
    d, f, std = config.d_model, config.d_ff, config.init_std
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes.update(
            {
                f"{prefix}.attn.wq": (d, d),
                f"{prefix}.attn.wk": (d, d),
                f"{prefix}.attn.wv": (d, d),
                f"{prefix}.attn.wo": (d, d),
                f"{prefix}.ff.w1": (d, f),
                f"{prefix}.ff.w2": (f, d),
            }
        )
    shapes["head"] = (d, config.vocab_size)

    params: Params = {}
    for name, shape in shapes.items():
        params[name] = nx.tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)
    ones, zeros = np.ones(d), np.zeros(d)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        for norm in ("ln1", "ln2"):
            params[f"{prefix}.{norm}.gain"] = nx.tensor(ones, True, f"{prefix}.{norm}.gain")
            params[f"{prefix}.{norm}.bias"] = nx.tensor(zeros, True, f"{prefix}.{norm}.bias")
        params[f"{prefix}.ff.b1"] = nx.tensor(np.zeros(f), True, f"{prefix}.ff.b1")
        params[f"{prefix}.ff.b2"] = nx.tensor(zeros, True, f"{prefix}.ff.b2")
    params["ln_f.gain"] = nx.tensor(ones, True, "ln_f.gain")
    params["ln_f.bias"] = nx.tensor(zeros, True, "ln_f.bias")
    return params


@dataclass
class AttentionCapture:
    """
    Post-softmax attention maps and value matrices of one forward pass.

    ``maps[layer][head]`` is T×T and ``values[layer][head]`` is T×d_head;
    both stay on the tape when the pass ran under one.
    """

    maps: Dict[int, List[Tensor]] = field(default_factory=dict)
    values: Dict[int, List[Tensor]] = field(default_factory=dict)

    @property
    def layers(self) -> List[int]:
        return sorted(self.maps)


def embed(params: Params, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return nx.take_rows(params["tok_emb"], ids) + nx.take_rows(params["pos_emb"], np.arange(len(ids)))


def output_head(params: Params, x: Tensor) -> Tensor:
    return nx.layer_norm_rows(x, params["ln_f.gain"], params["ln_f.bias"]) @ params["head"]


def attention_block(
    params: Params,
    config: ModelConfig,
    layer: int,
    x: Tensor,
    capture: Optional[AttentionCapture] = None,
) -> Tensor:
    prefix = f"layers.{layer}"
    h = nx.layer_norm_rows(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    q = h @ params[f"{prefix}.attn.wq"]
    k = h @ params[f"{prefix}.attn.wk"]
    v = h @ params[f"{prefix}.attn.wv"]
    scale = 1.0 / math.sqrt(config.d_head)
    heads = []
    for head in range(config.n_heads):
        lo, hi = head * config.d_head, (head + 1) * config.d_head
        q_h, k_h, v_h = nx.columns(q, lo, hi), nx.columns(k, lo, hi), nx.columns(v, lo, hi)
        a_h = nx.softmax_rows((q_h @ nx.transpose(k_h)) * scale)
        if capture is not None:
            capture.maps.setdefault(layer, []).append(a_h)
            capture.values.setdefault(layer, []).append(v_h)
        heads.append(a_h @ v_h)
    x = x + nx.concat_columns(heads) @ params[f"{prefix}.attn.wo"]

    h = nx.layer_norm_rows(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = nx.gelu(h @ params[f"{prefix}.ff.w1"] + params[f"{prefix}.ff.b1"])
    return x + h @ params[f"{prefix}.ff.w2"] + params[f"{prefix}.ff.b2"]


def forward(
    params: Params, config: ModelConfig, ids: Sequence[int], capture: bool = False
) -> Tuple[Tensor, Optional[AttentionCapture]]:
    """
    Run the bidirectional transformer over one sequence.

    Args:
        params: Model parameters.
        config: Model shape.
        ids: Token ids of the sequence.
        capture: Record attention maps and value matrices of every layer.

    Returns:
        The L×V logits and, if requested, the attention capture.

    Raises:
        ContractError: If the sequence is empty or longer than ``max_len``.
    """
    if not 0 < len(ids) <= config.max_len:
        raise ContractError(f"sequence length {len(ids)} outside (0, {config.max_len}]")
    recorded = AttentionCapture() if capture else None
    x = embed(params, ids)
    for layer in range(config.n_layers):
        x = attention_block(params, config, layer, x, recorded)
    return output_head(params, x), recorded


# Diffusion training


@dataclass
class NoisedSequence:
    """
    A sequence whose response tokens were partly replaced by ``[MASK]``.

    Attributes:
        original: Clean ids (prompt and response).
        noised: Ids with the masked positions set to ``MASK_ID``.
        t: Masking level in (0, 1].
        masked_positions: Sorted masked indices, all in the response.
        prompt_len: Start of the response region.
    """

    original: np.ndarray
    noised: np.ndarray
    t: float
    masked_positions: np.ndarray
    prompt_len: int


def apply_forward_masking(
    tok: Tokenization, rng: np.random.Generator, t: Optional[float] = None
) -> NoisedSequence:
    """
    Mask each response token independently with probability ``t``.

    ``t`` is drawn uniformly from (0, 1] unless given. A draw that masks
    nothing is repeated (with a fresh ``t`` when it was drawn).

    Raises:
        ContractError: If the response is empty or ``t`` is outside (0, 1].
    """
    n_response = tok.response_len
    if n_response <= 0:
        raise ContractError("cannot mask an empty response")
    if t is not None and not 0.0 < t <= 1.0:
        raise ContractError(f"masking level {t} outside (0, 1]")
    while True:
        level = 1.0 - rng.random() if t is None else float(t)
        hits = rng.random(n_response) < level
        if hits.any():
            break
    positions = tok.prompt_len + np.flatnonzero(hits)
    noised = tok.ids.copy()
    noised[positions] = MASK_ID
    return NoisedSequence(tok.ids.copy(), noised, level, positions, tok.prompt_len)


def dlm_sft_loss(logits: Tensor, noised: NoisedSequence, reweight_by_inv_t: bool = False) -> Tensor:
    """Summed negative log-likelihood of the clean tokens at masked positions."""
    loss = nx.cross_entropy_at_positions(logits, noised.original, noised.masked_positions)
    if reweight_by_inv_t:
        loss = loss * (1.0 / noised.t)
    return loss


# Decoding


def decode(
    params: Params,
    config: ModelConfig,
    prompt_ids: Sequence[int],
    gen_len: int,
    block_len: int = 32,
    steps_per_block: Optional[int] = None,
    trace: Optional[List[List[int]]] = None,
) -> np.ndarray:
    """
    Generate ``gen_len`` tokens by greedy confidence-ordered unmasking.

    The response starts fully masked and is processed in blocks from left to
    right. Each step runs the model on the whole sequence and commits the
    argmax token at the ``ceil(remaining / steps_left)`` masked positions of
    the current block with the highest top probability. Committed tokens are
    never masked again.

    Args:
        params: Model parameters.
        config: Model shape.
        prompt_ids: Encoded prompt.
        gen_len: Number of tokens to generate.
        block_len: Block size; ``gen_len`` disables blocking.
        steps_per_block: Denoising steps per block, ``block_len`` by default.
        trace: If given, receives the positions committed at each step.

    Returns:
        The generated ids (response only).

    Raises:
        ContractError: If ``gen_len`` is not a positive multiple of
            ``block_len``.
    """
    if block_len <= 0 or gen_len <= 0 or gen_len % block_len:
        raise ContractError(f"gen_len {gen_len} is not a positive multiple of block_len {block_len}")
    steps = block_len if steps_per_block is None else steps_per_block
    if steps <= 0:
        raise ContractError("steps_per_block must be positive")
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    seq = np.concatenate([prompt, np.full(gen_len, MASK_ID, dtype=np.int64)])

    for block_start in range(len(prompt), len(seq), block_len):
        block = np.arange(block_start, block_start + block_len)
        for step in range(steps):
            masked = block[seq[block] == MASK_ID]
            if masked.size == 0:
                break
            n_commit = math.ceil(masked.size / (steps - step))
            logits, _ = forward(params, config, seq)
            scores = logits.data[masked].copy()
            scores[:, list(SUPPRESSED_IDS)] = -np.inf
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            confidence = probs.max(axis=1)
            order = np.lexsort((masked, -confidence))[:n_commit]
            chosen = masked[order]
            seq[chosen] = probs[order].argmax(axis=1)
            if trace is not None:
                trace.append([int(i) for i in chosen])
    return seq[len(prompt) :]


# Checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    adam: AdamState
    step: int
    tokenizer_hash: str
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write parameters, optimizer moments and metadata into one ``.npz`` file."""
    meta = {
        "config": asdict(checkpoint.config),
        "step": checkpoint.step,
        "adam_step": checkpoint.adam.step,
        "tokenizer_hash": checkpoint.tokenizer_hash,
        "metadata": checkpoint.metadata,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for name, p in checkpoint.params.items():
        arrays[f"param/{name}"] = p.data
    for name, m in checkpoint.adam.m.items():
        arrays[f"adam_m/{name}"] = m
    for name, v in checkpoint.adam.v.items():
        arrays[f"adam_v/{name}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        np.savez(fp, **arrays)


def load_checkpoint(path: Path, tokenizer_hash: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        StalenessError: If ``tokenizer_hash`` is given and differs from the
            checkpoint's.
    """
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if tokenizer_hash is not None and meta["tokenizer_hash"] != tokenizer_hash:
            raise StalenessError(
                f"checkpoint {path} uses tokenizer {meta['tokenizer_hash']}, expected {tokenizer_hash}"
            )
        params: Params = {}
        m: Dict[str, np.ndarray] = {}
        v: Dict[str, np.ndarray] = {}
        for key in archive.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = nx.tensor(archive[key], requires_grad=True, name=name)
            elif kind == "adam_m":
                m[name] = np.array(archive[key])
            elif kind == "adam_v":
                v[name] = np.array(archive[key])
    return Checkpoint(
        config=ModelConfig(**meta["config"]),
        params=params,
        adam=AdamState(step=meta["adam_step"], m=m, v=v),
        step=meta["step"],
        tokenizer_hash=meta["tokenizer_hash"],
        metadata=meta["metadata"],
    )
