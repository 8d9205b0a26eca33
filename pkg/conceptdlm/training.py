"""
This module contains the training loop, per-epoch checkpointing, evaluation on
held-out samples and answer extraction.
"""

import json
import math
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypedDict

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import numerics as nx
from .alignment import AlignConfig, TotalLoss, alignment_loss, total_loss
from .config import CONFIG_SNAPSHOT_NAME, EvalConfig, RunConfig, save_config
from .dataset import ReasoningSample, load_samples, train_file_name
from .errors import ConfigError, ContractError, NumericError
from .helpers import read_counter
from .logger import logger
from .model import (
    Checkpoint,
    ModelConfig,
    Params,
    apply_forward_masking,
    decode,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import AdamState, ComputeTape
from .parallel import parallel_map
from .supervision import (
    SupervisionMask,
    Tokenization,
    Vocab,
    detokenize,
    encode_prompt,
    encode_sample,
    load_corpus_vocab,
    load_masks,
    mask_file_name,
)

METRIC_COLUMNS = [
    "step",
    "loss_dlm",
    "loss_align",
    "gamma",
    "mean_ratio",
    "frac_rows_satisfied",
    "epoch",
    "n_masked",
    "loss_total",
]
METRICS_FILE_NAME = "metrics.csv"
CHECKPOINT_DIR_NAME = "checkpoints"
ALIGNMENT_FILE_NAME = "alignment.json"

FINAL_ANSWER_PATTERN = re.compile(r"final answer is\s*(-\s?)?(\d+)", re.IGNORECASE)
INTEGER_PATTERN = re.compile(r"(?:^|(?<=[:=]\s)|(?<=[:=]))-\s?\d+|\d+")


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.npz"


@dataclass
class TrainRun:
    """
    A finished training run and where its artifacts live.

    Attributes:
        run_id: Name of the run directory.
        run_dir: Directory with the config snapshot, metrics and checkpoints.
        config: The resolved configuration the run used.
        metrics_path: Path of the metrics CSV.
        checkpoints: Checkpoint path per epoch, in epoch order.
        alignment: Alignment statistics before and after training, if masks
            were available.
    """

    run_id: str
    run_dir: Path
    config: RunConfig
    metrics_path: Path
    checkpoints: List[Path] = field(default_factory=list)
    alignment: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def metrics(self) -> pd.DataFrame:
        return pd.read_csv(self.metrics_path)


@dataclass
class StepResult:
    params: Params
    adam: AdamState
    loss: TotalLoss
    n_masked: float


def train_step(
    params: Params,
    model_config: ModelConfig,
    adam: AdamState,
    batch: Sequence[Tokenization],
    masks: Sequence[Optional[SupervisionMask]],
    rng: np.random.Generator,
    align: AlignConfig,
    total_steps: int,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    reweight_by_inv_t: bool = False,
    tokenizer_hash: Optional[str] = None,
) -> StepResult:
    """
    Mask, run, differentiate and update once.

    The optimizer step counter is the step of the alignment schedule.

    Raises:
        NumericError: If the loss is not finite; parameters are left unchanged.
    """
    with ComputeTape():
        logits, noised, captures = [], [], []
        for tok, mask in zip(batch, masks):
            sequence = apply_forward_masking(tok, rng)
            supervised = mask is not None and not mask.is_empty
            lg, capture = forward(params, model_config, sequence.noised, capture=supervised)
            logits.append(lg)
            noised.append(sequence)
            captures.append(capture)
        loss = total_loss(
            logits,
            noised,
            captures,
            masks,
            adam.step,
            align,
            total_steps,
            reweight_by_inv_t,
            tokenizer_hash,
        )
        if not math.isfinite(loss.total.item()):
            raise NumericError(f"non-finite loss {loss.total.item()} at step {adam.step}")
        nx.backward(loss.total)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    params, adam = nx.optimizer_step(params, grads, adam, lr=lr, weight_decay=weight_decay)
    n_masked = float(np.mean([len(s.masked_positions) for s in noised]))
    return StepResult(params, adam, loss, n_masked)


def measure_alignment(
    params: Params,
    model_config: ModelConfig,
    sequences: Sequence[Tokenization],
    masks: Sequence[Optional[SupervisionMask]],
    align: AlignConfig,
) -> Dict[str, float]:
    """
    Ratio statistics of the clean sequences over all supervised rows.

    Returns:
        ``median_ratio``, ``mean_ratio``, ``frac_rows_satisfied`` and
        ``n_rows``; ratios are NaN when no row has both encouraged and
        neutral columns.
    """
    ratios, satisfied = [], []
    for tok, mask in zip(sequences, masks):
        if mask is None or mask.is_empty:
            continue
        _, capture = forward(params, model_config, tok.ids, capture=True)
        _, breakdowns = alignment_loss(capture, mask, align)
        for b in breakdowns:
            ratios.append(b.ratio[b.has_pairs])
            satisfied.append(b.satisfied[b.has_pairs])
    ratio = np.concatenate(ratios) if ratios else np.zeros(0)
    ok = np.concatenate(satisfied) if satisfied else np.zeros(0, dtype=bool)
    nan = float("nan")
    return {
        "median_ratio": float(np.median(ratio)) if ratio.size else nan,
        "mean_ratio": float(ratio.mean()) if ratio.size else nan,
        "frac_rows_satisfied": float(ok.mean()) if ok.size else nan,
        "n_rows": int(ratio.size),
    }


def resolve_model_config(config: ModelConfig, vocab: Vocab) -> ModelConfig:
    if config.vocab_size == 0:
        return replace(config, vocab_size=len(vocab))
    if config.vocab_size != len(vocab):
        raise ConfigError(f"model.vocab_size {config.vocab_size} differs from the corpus vocabulary ({len(vocab)})")
    return config


def write_diagnostic_snapshot(
    run_dir: Path, step: int, epoch: int, batch_ids: List[str], params: Params, error: Exception
) -> Path:
    path = run_dir / f"diagnostic_step{step}.json"
    norms = {name: float(np.linalg.norm(p.data)) for name, p in params.items()}
    with open(path, "w") as fp:
        json.dump(
            {
                "step": step,
                "epoch": epoch,
                "sample_ids": batch_ids,
                "error": str(error),
                "param_norms": norms,
                "non_finite_params": [n for n, p in params.items() if not np.isfinite(p.data).all()],
            },
            fp,
            indent=2,
        )
    return path


def train(
    config: RunConfig,
    data_dir: Path,
    output_root: Path,
    run_id: Optional[str] = None,
    masks_path: Optional[Path] = None,
    on_epoch_end: Optional[Callable[[int, Path], None]] = None,
) -> TrainRun:
    """
    Train a model from scratch on one perturbation mode of a generated corpus.

    Each step masks every sequence of the batch, runs the model (capturing
    attention for supervised samples), evaluates the combined loss, and
    applies one AdamW update. Metrics are written after every epoch together
    with a checkpoint. Runs are deterministic given the config.

    Args:
        config: The run configuration; it is snapshot into the run directory.
        data_dir: Directory written by ``generate_dataset``.
        output_root: Root receiving ``runs/<run_id>``.
        run_id: Name of the run; the next value of the output counter by
            default.
        masks_path: Mask sidecar; defaults to the file named after the
            training mode and mask convention inside ``data_dir`` when present.
        on_epoch_end: Called with the epoch number and its checkpoint path.

    Raises:
        FileExistsError: If the run directory already exists.
        StalenessError: If masks were built under another vocabulary.
        NumericError: If the loss turns non-finite; the metrics gathered so
            far and a diagnostic snapshot are written to the run directory
            first.
    """
    data_dir, output_root = Path(data_dir), Path(output_root)
    if run_id is None:
        run_id = str(read_counter(output_root))
    run_dir = output_root / "runs" / run_id
    if run_dir.exists():
        raise FileExistsError(f"run {run_id} already exists at {run_dir}")

    vocab = load_corpus_vocab(data_dir)
    samples = load_samples(data_dir / train_file_name(config.train.mode))
    if config.train.n_samples is not None:
        samples = samples[: config.train.n_samples]
    if not samples:
        raise ContractError("no training samples")

    if masks_path is None:
        default_masks = data_dir / mask_file_name(config.train.mode, config.align.convention)
        masks_path = default_masks if default_masks.is_file() else None
    masks = load_masks(masks_path, vocab.hash) if masks_path is not None else {}
    if config.align.enabled and not masks:
        logger.warning("Alignment is enabled but no masks were found; training with the diffusion loss only")

    model_config = resolve_model_config(config.model, vocab)
    config = replace(config, model=model_config)
    sequences = [encode_sample(s, vocab, config.train.response_pad) for s in samples]
    sample_masks = [masks.get(s.id) for s in samples]
    longest = max(len(t) for t in sequences)
    if longest > model_config.max_len:
        raise ContractError(f"longest training sequence ({longest}) exceeds model.max_len {model_config.max_len}")

    checkpoint_dir = run_dir / CHECKPOINT_DIR_NAME
    checkpoint_dir.mkdir(parents=True)
    save_config(config, run_dir / CONFIG_SNAPSHOT_NAME)
    logger.info(f"~ Starting run {run_id} ({len(samples)} samples, {len(masks)} masks) ~")

    tc = config.train
    rng = np.random.default_rng(tc.seed)
    params = init_params(model_config, tc.seed)
    adam = AdamState()
    n_batches = math.ceil(len(samples) / tc.batch)
    total_steps = tc.epochs * n_batches

    run = TrainRun(run_id, run_dir, config, run_dir / METRICS_FILE_NAME)
    if any(m is not None for m in sample_masks):
        run.alignment["initial"] = measure_alignment(params, model_config, sequences, sample_masks, config.align)

    rows: List[dict] = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(samples))
        progress = tqdm(range(n_batches), desc=f"Epoch {epoch}/{tc.epochs}", leave=False)
        for b in progress:
            idx = order[b * tc.batch : (b + 1) * tc.batch]
            step = adam.step
            try:
                result = train_step(
                    params,
                    model_config,
                    adam,
                    [sequences[i] for i in idx],
                    [sample_masks[i] for i in idx],
                    rng,
                    config.align,
                    total_steps,
                    tc.lr,
                    tc.weight_decay,
                    tc.reweight_by_inv_t,
                    vocab.hash,
                )
            except NumericError as e:
                pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(run.metrics_path, index=False)
                path = write_diagnostic_snapshot(run_dir, step, epoch, [samples[i].id for i in idx], params, e)
                logger.error(f"Aborting run {run_id}: {e} (diagnostics in {path})")
                raise
            params, adam = result.params, result.adam
            loss = result.loss
            rows.append(
                {
                    "step": step,
                    "loss_dlm": loss.loss_dlm,
                    "loss_align": loss.loss_align,
                    "gamma": loss.gamma,
                    "mean_ratio": loss.mean_ratio,
                    "frac_rows_satisfied": loss.frac_rows_satisfied,
                    "epoch": epoch,
                    "n_masked": result.n_masked,
                    "loss_total": loss.total.item(),
                }
            )
            logger.debug(f"step {step}: loss_dlm={loss.loss_dlm:.4f} gamma={loss.gamma:.4f}")
            progress.set_postfix(loss=f"{loss.loss_dlm:.3f}")

        pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(run.metrics_path, index=False)
        checkpoint_path = checkpoint_dir / checkpoint_name(epoch)
        save_checkpoint(
            checkpoint_path,
            Checkpoint(
                config=model_config,
                params=params,
                adam=adam,
                step=adam.step,
                tokenizer_hash=vocab.hash,
                metadata={"run_id": run_id, "epoch": epoch, "seed": tc.seed, "mode": tc.mode},
            ),
        )
        run.checkpoints.append(checkpoint_path)
        epoch_rows = [r for r in rows if r["epoch"] == epoch]
        mean_loss = np.mean([r["loss_dlm"] for r in epoch_rows])
        logger.info(f"Epoch {epoch}: mean loss_dlm {mean_loss:.4f}, checkpoint {checkpoint_path.name}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, checkpoint_path)

    if "initial" in run.alignment:
        run.alignment["final"] = measure_alignment(params, model_config, sequences, sample_masks, config.align)
        with open(run_dir / ALIGNMENT_FILE_NAME, "w") as fp:
            json.dump(run.alignment, fp, indent=2)
    return run


# Evaluation


def extract_answer(text: str) -> Optional[int]:
    """
    Read the final integer answer out of generated text.

    The first integer after the last "final answer is" wins; otherwise the
    last standalone integer of the text; otherwise None.
    """
    matches = list(FINAL_ANSWER_PATTERN.finditer(text))
    if matches:
        sign, digits = matches[-1].groups()
        return -int(digits) if sign else int(digits)
    numbers = INTEGER_PATTERN.findall(text)
    if not numbers:
        return None
    return int(re.sub(r"\s", "", numbers[-1]))


class EvalRecord(TypedDict):
    id: str
    mode: str
    gold: int
    predicted: Optional[int]
    correct: bool
    text: str


class EvalReport(TypedDict):
    accuracy: float
    per_mode: Dict[str, float]
    n_samples: int
    n_correct: int
    decode: Dict[str, Optional[int]]
    checkpoint: str
    records: List[EvalRecord]


def evaluate_samples(
    checkpoint: Checkpoint,
    samples: Sequence[ReasoningSample],
    vocab: Vocab,
    eval_config: EvalConfig,
    desc: str = "Evaluating",
) -> EvalReport:
    """Decode every question and exact-match the extracted answer against the gold one."""

    def run(sample: ReasoningSample) -> EvalRecord:
        prompt = encode_prompt(sample.question, vocab)
        generated = decode(
            checkpoint.params,
            checkpoint.config,
            prompt.ids,
            eval_config.gen_len,
            eval_config.block_len,
            eval_config.steps_per_block,
        )
        text = detokenize(generated, vocab, skip_special=True)
        predicted = extract_answer(text)
        return {
            "id": sample.id,
            "mode": sample.mode.value,
            "gold": sample.answer,
            "predicted": predicted,
            "correct": predicted is not None and predicted == sample.answer,
            "text": text,
        }

    records = parallel_map(run, list(samples), n_jobs=eval_config.n_jobs, desc=desc)
    df = pd.DataFrame(records, columns=["id", "mode", "correct"])
    n_correct = int(df["correct"].sum()) if len(df) else 0
    return {
        "accuracy": n_correct / len(records) if records else 0.0,
        "per_mode": {mode: float(g["correct"].mean()) for mode, g in df.groupby("mode")},
        "n_samples": len(records),
        "n_correct": n_correct,
        "decode": {
            "gen_len": eval_config.gen_len,
            "block_len": eval_config.block_len,
            "steps_per_block": eval_config.steps_per_block or eval_config.block_len,
        },
        "checkpoint": "",
        "records": records,
    }


def evaluate(
    checkpoint_path: Path,
    test_file: Path,
    vocab: Vocab,
    eval_config: Optional[EvalConfig] = None,
) -> EvalReport:
    """
    Accuracy of a checkpoint on a sample file.

    Failed answer extraction counts as incorrect.

    Raises:
        StalenessError: If the checkpoint was trained under another vocabulary.
    """
    eval_config = eval_config or EvalConfig()
    checkpoint = load_checkpoint(checkpoint_path, vocab.hash)
    samples = load_samples(test_file)
    if eval_config.n_samples is not None:
        samples = samples[: eval_config.n_samples]
    started = time.time()
    report = evaluate_samples(checkpoint, samples, vocab, eval_config)
    report["checkpoint"] = str(checkpoint_path)
    logger.info(
        f"Accuracy {report['accuracy']:.2%} ({report['n_correct']}/{report['n_samples']}) "
        f"in {time.time() - started:.1f}s"
    )
    return report


def save_report(report: EvalReport, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        json.dump(report, fp, indent=2)
