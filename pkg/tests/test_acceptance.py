"""Full-size runs on the micro corpus; select with ``pytest -m slow``."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conceptdlm import numerics as nx
from conceptdlm.alignment import AlignConfig, total_loss
from conceptdlm.comparison import compare_runs
from conceptdlm.concept_graph import oracle_graph
from conceptdlm.config import load_config
from conceptdlm.dataset import generate_dataset, load_samples, train_file_name
from conceptdlm.model import ModelConfig, NoisedSequence, forward, init_params
from conceptdlm.supervision import (
    SupervisionMask,
    build_corpus_vocab,
    build_sample_masks,
    mask_file_name,
    save_masks,
)
from conceptdlm.training import ALIGNMENT_FILE_NAME, train

pytestmark = pytest.mark.slow

MICRO_CONFIG = Path(__file__).parent.parent / "configs" / "micro.json"


@pytest.fixture(scope="module")
def micro_corpus(tmp_path_factory):
    config = load_config(MICRO_CONFIG)
    data_dir = tmp_path_factory.mktemp("micro")
    generate_dataset(data_dir, config.data.n_train, config.data.n_test, modes=["normal"], seed=config.data.seed)
    vocab = build_corpus_vocab(data_dir)
    samples = load_samples(data_dir / train_file_name("normal"))
    masks, failures = build_sample_masks(
        samples, {s.id: oracle_graph(s) for s in samples}, vocab, config.align.convention, config.train.response_pad
    )
    assert not failures
    save_masks(masks, data_dir / mask_file_name("normal", config.align.convention))
    return config, data_dir


def test_total_loss_gradient():
    config = ModelConfig(vocab_size=12, d_model=16, n_layers=2, n_heads=2, max_len=6, init_std=0.3)
    params = init_params(config, 1)
    ids = np.array([5, 6, 7, 8, 9, 10])
    noised = NoisedSequence(ids, np.array([5, 6, 1, 8, 1, 1]), 0.5, np.array([2, 4, 5]), 2)
    mask = SupervisionMask(6, [(3, 0, 1), (3, 1, 1), (4, 3, 1), (0, 3, -1), (1, 4, -1), (5, 2, -1)])
    align = AlignConfig(alpha=1e6, lam=10.0, gamma_schedule="constant")

    def f(ps):
        logits, capture = forward(ps, config, noised.noised, capture=True)
        return total_loss([logits], [noised], [capture], [mask], 0, align).total

    report = nx.finite_difference_check(f, params)
    assert report["max_abs_err"] < 1e-6, report


def test_training_reduces_loss_and_aligns(micro_corpus, tmp_path):
    config, data_dir = micro_corpus
    run = train(config, data_dir, tmp_path, run_id="micro")
    per_epoch = run.metrics().groupby("epoch")["loss_dlm"].mean()
    assert per_epoch.iloc[-1] <= 0.7 * per_epoch.iloc[0]

    stats = json.loads((run.run_dir / ALIGNMENT_FILE_NAME).read_text())
    assert stats["final"]["median_ratio"] > stats["initial"]["median_ratio"]


def test_comparison_table(micro_corpus, tmp_path):
    config, data_dir = micro_corpus
    config = replace(
        config,
        train=replace(config.train, epochs=2),
        compare=replace(config.compare, seeds=[42, 43, 44], n_eval=4),
    )
    result = compare_runs(config, data_dir, tmp_path)
    summary = result["summary"]
    assert set(summary["seed"]) == {"42", "43", "44", "mean", "std"}
    assert set(summary["align"]) == {"off", "on"}
    assert len(result["curves"]) == 3 * 2 * 2
