import numpy as np
import pandas as pd
import pytest

from conceptdlm.alignment import AlignConfig
from conceptdlm.dataset import TEST_FILE_NAME, load_samples
from conceptdlm.errors import ContractError, StalenessError
from conceptdlm.supervision import Tokenization, Vocab, load_corpus_vocab
from conceptdlm.training import train
from conceptdlm.visualize import answer_position, export_attention, read_matrix


@pytest.fixture
def checkpoint(corpus_dir, temp_dir, tiny_config):
    return train(tiny_config, corpus_dir, temp_dir, run_id="viz").checkpoints[-1]


class TestAnswerPosition:
    def test_after_phrase(self):
        words = ["q", "Therefore", ",", "the", "final", "answer", "is", "7", "."]
        assert answer_position(Tokenization(words, list(range(9)), prompt_len=1)) == 7

    def test_fallback_to_last_token(self):
        assert answer_position(Tokenization(["a", "b", "c"], [5, 6, 7], prompt_len=1)) == 2

    def test_no_response(self):
        with pytest.raises(ContractError):
            answer_position(Tokenization(["a"], [5], prompt_len=1))


class TestExportAttention:
    def test_files(self, corpus_dir, temp_dir, checkpoint):
        sample = load_samples(corpus_dir / TEST_FILE_NAME)[0]
        vocab = load_corpus_vocab(corpus_dir)
        out = temp_dir / "attention"
        result = export_attention(checkpoint, sample, vocab, out)

        tokens = pd.read_csv(result["tokens"])
        n = len(tokens)
        assert set(result["raw"]) == {0}
        raw = read_matrix(result["raw"][0])
        assert raw.shape == (n, n)
        np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-9)
        assert read_matrix(result["weighted"][0]).shape == (n, n)
        assert result["figures"][0].is_file()
        assert tokens["token"].iloc[result["answer_position"]] == str(sample.answer)

        norms = pd.read_csv(result["value_norms"][0])
        assert list(norms.columns) == ["position", "token", "head0", "head1"]

        spans = pd.read_csv(result["spans"])
        assert list(spans.columns) == ["layer", "concept", "start", "end", "raw", "weighted"]
        assert len(spans) > 0

    def test_unweighted_equals_raw(self, corpus_dir, temp_dir, checkpoint):
        sample = load_samples(corpus_dir / TEST_FILE_NAME)[0]
        result = export_attention(
            checkpoint,
            sample,
            load_corpus_vocab(corpus_dir),
            temp_dir / "none",
            align=AlignConfig(v_weighting="none"),
            render=False,
        )
        np.testing.assert_allclose(read_matrix(result["weighted"][0]), read_matrix(result["raw"][0]))
        assert result["figures"] == {}

    def test_unknown_layer(self, corpus_dir, temp_dir, checkpoint):
        sample = load_samples(corpus_dir / TEST_FILE_NAME)[0]
        with pytest.raises(ContractError):
            export_attention(checkpoint, sample, load_corpus_vocab(corpus_dir), temp_dir, layers=[3], render=False)

    def test_stale_vocabulary(self, corpus_dir, temp_dir, checkpoint):
        sample = load_samples(corpus_dir / TEST_FILE_NAME)[0]
        with pytest.raises(StalenessError):
            export_attention(checkpoint, sample, Vocab.build(["x"]), temp_dir, render=False)
