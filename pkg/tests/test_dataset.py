import json
from collections import Counter

import numpy as np
import pytest

from conceptdlm.dataset import (
    ALL_MODES,
    DEFAULT_TEMPLATE,
    MANIFEST_NAME,
    TEST_FILE_NAME,
    PerturbMode,
    dfs_order,
    evaluate_dag,
    generate_dataset,
    load_manifest,
    load_samples,
    make_sample,
    perturb,
    render_steps,
    sample_signatures,
    train_file_name,
)
from conceptdlm.errors import ContractError, GenerationError

WORKED_EXAMPLE = {
    "Quasar": 90,
    "Flux": 21,
    "Radiant": 44,
    "Nova": 55,
    "Gravity": 41,
    "Pulse": 36,
    "Helix": 40,
    "Echo": 12,
    "Comet": 48,
    "Aether": 26,
    "Nebula": 47,
    "Celestia": 100,
    "Stardust": 70,
}

# Evaluated by hand, rounding every intermediate value half to even.
ZERO_SOURCES = {
    "Quasar": 10,
    "Flux": 20,
    "Radiant": 17,
    "Nova": 2,
    "Gravity": 9,
    "Pulse": 25,
    "Helix": 17,
    "Echo": 4,
    "Comet": 22,
    "Aether": 6,
    "Nebula": 22,
    "Celestia": 41,
    "Stardust": 28,
}


class TestEvaluateDag:
    def test_worked_example(self):
        values = evaluate_dag(DEFAULT_TEMPLATE, 80, 79)
        assert {k: v for k, v in values.items() if k not in ("Zorin", "Vortex")} == WORKED_EXAMPLE

    def test_zero_sources(self):
        values = evaluate_dag(DEFAULT_TEMPLATE, 0, 0)
        assert values["Quasar"] == 10
        assert {k: values[k] for k in ZERO_SOURCES} == ZERO_SOURCES

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            evaluate_dag(DEFAULT_TEMPLATE, 101, 0)

    def test_answer_rederivable_from_question(self):
        sample = make_sample("s", 37, 91)
        assert "Zorin (value: 37)" in sample.question
        assert evaluate_dag(DEFAULT_TEMPLATE, 37, 91)["Stardust"] == sample.answer


class TestRenderSteps:
    def test_first_step(self):
        steps = render_steps(evaluate_dag(DEFAULT_TEMPLATE, 80, 79))
        assert steps[0].text == "Quasar = (Zorin + Vortex) * 0.5 + 10 = 90"

    def test_step_count_and_sources(self):
        steps = render_steps(evaluate_dag(DEFAULT_TEMPLATE, 3, 4))
        assert len(steps) == 13
        assert not {"Zorin", "Vortex"} & {s.variable for s in steps}

    def test_final_line(self):
        sample = make_sample("s", 80, 79)
        assert sample.response.endswith("Therefore, the final answer is 70.")


class TestPerturb:
    @pytest.fixture
    def steps(self):
        return render_steps(evaluate_dag(DEFAULT_TEMPLATE, 80, 79))

    @pytest.fixture
    def permutations(self):
        return [list(range(13))[::-1], list(range(1, 13)) + [0], list(range(13))]

    def test_reverse(self, steps):
        assert perturb(steps, "RE") == steps[::-1]
        assert perturb(perturb(steps, "RE"), "RE") == steps

    def test_local_reverse_odd_tail(self, steps):
        assert perturb(steps[:3], "LR") == [steps[1], steps[0], steps[2]]
        assert perturb(steps, "LR")[-1] == steps[-1]

    def test_output_first(self, steps):
        out = perturb(steps, "OF")
        assert out[0].variable == "Stardust"
        assert out[1:] == steps[:-1]

    def test_dfs(self, steps):
        order = [s.variable for s in perturb(steps, "DFS")]
        assert order == dfs_order(DEFAULT_TEMPLATE)
        assert order == [
            "Stardust",
            "Celestia",
            "Nebula",
            "Helix",
            "Gravity",
            "Radiant",
            "Quasar",
            "Flux",
            "Pulse",
            "Comet",
            "Aether",
            "Echo",
            "Nova",
        ]

    def test_random_permutations(self, steps, permutations):
        assert perturb(steps, "R1", permutations) == steps[::-1]
        assert perturb(steps, "R2", permutations)[0] == steps[1]

    def test_random_needs_permutations(self, steps):
        with pytest.raises(ContractError):
            perturb(steps, "R1")

    def test_no_cot(self, steps):
        assert perturb(steps, "no_cot") == []

    def test_unknown_mode(self, steps):
        with pytest.raises(ContractError):
            perturb(steps, "SHUFFLE")

    def test_multiset_preserved(self, steps, permutations):
        for mode in ALL_MODES:
            if mode is PerturbMode.NO_COT:
                continue
            out = perturb(steps, mode, permutations)
            assert Counter(s.text for s in out) == Counter(s.text for s in steps), mode


class TestGenerateDataset:
    def test_files_and_manifest(self, temp_dir):
        manifest = generate_dataset(temp_dir, n_train=20, n_test=5, seed=42)
        assert len(manifest["files"]) == len(ALL_MODES) + 1
        assert (temp_dir / MANIFEST_NAME).is_file()
        for mode in ALL_MODES:
            assert len(load_samples(temp_dir / train_file_name(mode))) == 20
        assert sorted(manifest["permutations"]) == ["R1", "R2", "R3"]
        assert load_manifest(temp_dir) == json.loads(json.dumps(manifest))

    def test_signatures_unique_and_disjoint(self, temp_dir):
        generate_dataset(temp_dir, n_train=50, n_test=20, modes=["normal"], seed=42)
        train = [s.signature for s in load_samples(temp_dir / train_file_name("normal"))]
        test = [s.signature for s in load_samples(temp_dir / TEST_FILE_NAME)]
        assert len(set(train)) == 50
        assert len(set(test)) == 20
        assert not set(train) & set(test)

    def test_modes_share_base_samples(self, temp_dir):
        generate_dataset(temp_dir, n_train=5, n_test=2, modes=["normal", "RE", "no_cot"], seed=1)
        normal = load_samples(temp_dir / train_file_name("normal"))
        reverse = load_samples(temp_dir / train_file_name("RE"))
        no_cot = load_samples(temp_dir / train_file_name("no_cot"))
        for a, b, c in zip(normal, reverse, no_cot):
            assert a.signature == b.signature == c.signature
            assert b.steps == a.steps[::-1]
            assert c.steps == []
            assert c.response == "Therefore, the final answer is {}.".format(a.answer)

    def test_deterministic(self, temp_dir):
        generate_dataset(temp_dir / "a", n_train=10, n_test=3, seed=42)
        generate_dataset(temp_dir / "b", n_train=10, n_test=3, seed=42)
        for path in sorted((temp_dir / "a").iterdir()):
            assert path.read_bytes() == (temp_dir / "b" / path.name).read_bytes()

    def test_records_round_trip_steps(self, temp_dir):
        generate_dataset(temp_dir, n_train=3, n_test=1, modes=["DFS"], seed=5)
        sample = load_samples(temp_dir / train_file_name("DFS"))[0]
        assert sample.steps[0].variable == "Stardust"
        assert sample.steps[0].value == sample.answer

    def test_exhaustion(self):
        with pytest.raises(GenerationError):
            sample_signatures(101 * 101 + 1, np.random.default_rng(0))
