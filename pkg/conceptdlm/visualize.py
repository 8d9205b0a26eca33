"""
This module contains the export of attention maps for inspection: raw and
value-weighted maps per layer, value norms, and per-concept bars read from the
answer position, as CSV files plus a rendered figure per layer.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, TypedDict

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .alignment import AlignConfig, weighted_attention
from .concept_graph import ConceptGraph, oracle_graph
from .dataset import ReasoningSample
from .errors import ContractError
from .logger import logger
from .model import forward, load_checkpoint
from .supervision import TokenSpan, Tokenization, Vocab, encode_sample, locate_spans, split_words

plt.switch_backend("Agg")

ANSWER_PHRASE = split_words("final answer is")
SPAN_COLUMNS = ["layer", "concept", "start", "end", "raw", "weighted"]


class ExportResult(TypedDict):
    tokens: Path
    spans: Path
    raw: Dict[int, Path]
    weighted: Dict[int, Path]
    value_norms: Dict[int, Path]
    figures: Dict[int, Path]
    answer_position: int


def answer_position(tok: Tokenization) -> int:
    """Index of the token after "final answer is", else the last response token."""
    words = [w.lower() for w in tok.tokens]
    n = len(ANSWER_PHRASE)
    for i in range(len(words) - n, -1, -1):
        if words[i : i + n] == ANSWER_PHRASE and i + n < len(words):
            return i + n
    if tok.response_len == 0:
        raise ContractError("sequence has no response")
    return len(tok) - 1


def matrix_frame(matrix: np.ndarray) -> pd.DataFrame:
    n_rows, n_cols = matrix.shape
    return pd.DataFrame(
        matrix,
        index=pd.Index([f"q{i}" for i in range(n_rows)], name="query"),
        columns=[f"k{j}" for j in range(n_cols)],
    )


def read_matrix(path: Path) -> np.ndarray:
    """Load a matrix written by :func:`export_attention` without precision loss."""
    return pd.read_csv(path, index_col=0, float_precision="round_trip").to_numpy()


def span_bars(
    raw: np.ndarray, weighted: np.ndarray, row: int, spans: Dict[str, TokenSpan], layer: int
) -> pd.DataFrame:
    records = []
    for concept, span in spans.items():
        cols = slice(span.start, span.end)
        records.append(
            {
                "layer": layer,
                "concept": concept,
                "start": span.start,
                "end": span.end,
                "raw": float(raw[row, cols].mean()),
                "weighted": float(weighted[row, cols].mean()),
            }
        )
    return pd.DataFrame(records, columns=SPAN_COLUMNS)


def render_layer(
    raw: np.ndarray, weighted: np.ndarray, bars: pd.DataFrame, layer: int, path: Path
) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(12, 10))
    for ax, matrix, title in ((axes[0, 0], raw, "attention"), (axes[0, 1], weighted, "value-weighted")):
        image = ax.imshow(matrix, cmap="viridis", aspect="auto")
        ax.set_title(f"Layer {layer}: {title}")
        ax.set_xlabel("key")
        ax.set_ylabel("query")
        fig.colorbar(image, ax=ax)
    labels = [c if len(c) <= 24 else c[:21] + "..." for c in bars["concept"]]
    for ax, column in ((axes[1, 0], "raw"), (axes[1, 1], "weighted")):
        ax.barh(range(len(bars)), bars[column].to_numpy(), color="tab:purple")
        ax.set_yticks(range(len(bars)))
        ax.set_yticklabels(labels, fontsize=7)
        ax.invert_yaxis()
        ax.set_title(f"Answer row into concepts ({column})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def export_attention(
    checkpoint_path: Path,
    sample: ReasoningSample,
    vocab: Vocab,
    output_dir: Path,
    layers: Optional[Sequence[int]] = None,
    align: Optional[AlignConfig] = None,
    graph: Optional[ConceptGraph] = None,
    response_pad: int = 0,
    render: bool = True,
) -> ExportResult:
    """
    Write the attention of one sample under a checkpoint.

    Per layer, the head-averaged map, the value-weighted map (under
    ``align.v_weighting``, key-indexed by default) and the per-head value
    norms are written as CSV. Concept bars are the mean of the answer
    position's row over each concept span, for both maps.

    Args:
        checkpoint_path: Model checkpoint.
        sample: The sample to run.
        vocab: Vocabulary of the checkpoint.
        output_dir: Destination directory.
        layers: Layers to export; all by default.
        align: Source of the value weighting convention.
        graph: Concepts to aggregate over; the sample's DAG by default.
        response_pad: EOS padding used in training.
        render: Also draw one figure per layer.

    Raises:
        StalenessError: If the checkpoint uses another vocabulary.
    """
    align = align or AlignConfig()
    checkpoint = load_checkpoint(checkpoint_path, vocab.hash)
    tok = encode_sample(sample, vocab, response_pad)
    _, capture = forward(checkpoint.params, checkpoint.config, tok.ids, capture=True)
    layers = list(layers) if layers is not None else capture.layers
    unknown = [layer for layer in layers if layer not in capture.maps]
    if unknown:
        raise ContractError(f"layers {unknown} do not exist in a {checkpoint.config.n_layers}-layer model")

    graph = graph if graph is not None else oracle_graph(sample)
    spans, failures = locate_spans(graph, tok)
    if failures:
        logger.warning(f"{len(failures)} concepts could not be located in {sample.id}")
    row = answer_position(tok)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    tokens_path = output_dir / "tokens.csv"
    pd.DataFrame({"position": range(len(tok)), "token": tok.tokens}).to_csv(tokens_path, index=False)

    result: ExportResult = {
        "tokens": tokens_path,
        "spans": output_dir / "spans.csv",
        "raw": {},
        "weighted": {},
        "value_norms": {},
        "figures": {},
        "answer_position": row,
    }
    all_bars: List[pd.DataFrame] = []
    for layer in layers:
        raw = np.mean([a.data for a in capture.maps[layer]], axis=0)
        weighted = weighted_attention(capture, layer, align).data
        norms = pd.DataFrame(
            {f"head{h}": np.linalg.norm(v.data, axis=1) for h, v in enumerate(capture.values[layer])}
        )
        norms.insert(0, "token", tok.tokens)

        result["raw"][layer] = output_dir / f"raw_layer{layer}.csv"
        result["weighted"][layer] = output_dir / f"weighted_layer{layer}.csv"
        result["value_norms"][layer] = output_dir / f"value_norms_layer{layer}.csv"
        matrix_frame(raw).to_csv(result["raw"][layer])
        matrix_frame(weighted).to_csv(result["weighted"][layer])
        norms.to_csv(result["value_norms"][layer], index_label="position")

        bars = span_bars(raw, weighted, row, spans, layer)
        all_bars.append(bars)
        if render:
            result["figures"][layer] = output_dir / f"attention_layer{layer}.png"
            render_layer(raw, weighted, bars, layer, result["figures"][layer])

    bars = pd.concat(all_bars, ignore_index=True) if all_bars else pd.DataFrame(columns=SPAN_COLUMNS)
    bars.to_csv(result["spans"], index=False)
    logger.info(f"Exported attention of {sample.id} for layers {layers} to {output_dir}")
    return result
