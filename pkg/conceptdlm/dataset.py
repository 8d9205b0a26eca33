"""
This module generates the order-perturbed chain-of-thought dataset.

A fixed 15-variable DAG is evaluated for sampled source values, its
non-source nodes are rendered as equation steps, and the canonical step order
is perturbed in several ways. Every perturbation mode gets its own training
file sharing the same base samples; a disjoint set of samples in canonical
order forms the test file.
"""

import ast
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, TypedDict

import numpy as np
from tqdm import tqdm

from .errors import ContractError, GenerationError
from .logger import logger

DEFAULT_SEED = 42
SOURCE_RANGE = (0, 100)
N_RANDOM_PERMUTATIONS = 3
QUESTION_TEMPLATE = (
    "Please infer the value of the Stardust variable based on the variables below. "
    "The input variables are Zorin (value: {zorin}) and Vortex (value: {vortex})."
)
FINAL_LINE_TEMPLATE = "Therefore, the final answer is {answer}."
MANIFEST_NAME = "manifest.json"
TEST_FILE_NAME = "test.jsonl"


class PerturbMode(str, Enum):
    NORMAL = "normal"
    RE = "RE"
    LR = "LR"
    OF = "OF"
    DFS = "DFS"
    R1 = "R1"
    R2 = "R2"
    R3 = "R3"
    NO_COT = "no_cot"

    @classmethod
    def parse(cls, value: "str | PerturbMode") -> "PerturbMode":
        try:
            return cls(value)
        except ValueError:
            raise ContractError(f"unknown perturbation mode: {value!r}")


ALL_MODES = list(PerturbMode)


@dataclass(frozen=True)
class Rule:
    """A non-source node: its defining expression and the parents it reads."""

    name: str
    expression: str
    parents: Tuple[str, ...]


@dataclass(frozen=True)
class DagTemplate:
    nodes: Tuple[str, ...]
    sources: Tuple[str, ...]
    rules: Dict[str, Rule]
    target: str

    def topological_order(self) -> List[str]:
        """Kahn's algorithm; ties resolved by node declaration order."""
        indegree = {n: 0 for n in self.nodes}
        children: Dict[str, List[str]] = {n: [] for n in self.nodes}
        for rule in self.rules.values():
            for parent in rule.parents:
                indegree[rule.name] += 1
                children[parent].append(rule.name)
        order: List[str] = []
        ready = [n for n in self.nodes if indegree[n] == 0]
        while ready:
            node = ready.pop(0)
            order.append(node)
            for child in children[node]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    ready.append(child)
            ready.sort(key=self.nodes.index)
        if len(order) != len(self.nodes):
            raise ContractError("rule dependencies contain a cycle")
        return order

    def step_variables(self) -> List[str]:
        return [n for n in self.topological_order() if n not in self.sources]


def _parents_of(expression: str) -> Tuple[str, ...]:
    names: List[str] = []
    for node in ast.walk(ast.parse(expression, mode="eval")):
        if isinstance(node, ast.Name) and node.id != "int" and node.id not in names:
            names.append(node.id)
    # ast.walk is breadth-first; order parents by their first textual occurrence
    return tuple(sorted(names, key=lambda n: re.search(rf"\b{n}\b", expression).start()))


def build_template(expressions: Dict[str, str], sources: Sequence[str], target: str) -> DagTemplate:
    nodes = tuple(list(sources) + list(expressions))
    rules = {
        name: Rule(name=name, expression=expr, parents=_parents_of(expr))
        for name, expr in expressions.items()
    }
    template = DagTemplate(nodes=nodes, sources=tuple(sources), rules=rules, target=target)
    template.topological_order()
    return template


DEFAULT_TEMPLATE = build_template(
    {
        "Quasar": "(Zorin + Vortex) * 0.5 + 10",
        "Flux": "(Zorin - Vortex) * 0.6 + 20",
        "Radiant": "(Quasar + 2 * Flux) / 3",
        "Nova": "(Quasar - Flux + Zorin) / 3 + 5",
        "Gravity": "(Radiant * Quasar) / 120 + 8",
        "Pulse": "Radiant * 0.4 + Flux * 0.9",
        "Helix": "(Gravity + Pulse + Radiant) / 3",
        "Echo": "(Pulse - Flux) * 0.8",
        "Comet": "(Pulse + Gravity) * 0.6 + 2",
        "Aether": "(Echo + Gravity) * 0.5",
        "Nebula": "(Helix + Comet) / 2 + 3",
        "Celestia": "(Nebula + Aether + Echo) * 1.1 + 6",
        "Stardust": "int(Celestia * 0.7)",
    },
    sources=("Zorin", "Vortex"),
    target="Stardust",
)


def _evaluate_expression(expression: str, values: Dict[str, int]) -> Fraction:
    """Evaluate a rule exactly: decimal literals become fractions, ``int`` truncates."""

    def visit(node: ast.AST) -> Fraction:
        if isinstance(node, ast.Expression):
            return visit(node.body)
        if isinstance(node, ast.Constant):
            return Fraction(str(node.value))
        if isinstance(node, ast.Name):
            return Fraction(values[node.id])
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -visit(node.operand)
        if isinstance(node, ast.BinOp):
            left, right = visit(node.left), visit(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                return left / right
        if isinstance(node, ast.Call) and getattr(node.func, "id", None) == "int":
            return Fraction(math.trunc(visit(node.args[0])))
        raise ContractError(f"unsupported expression element: {ast.dump(node)}")

    return visit(ast.parse(expression, mode="eval"))


def evaluate_dag(template: DagTemplate, zorin: int, vortex: int) -> Dict[str, int]:
    """
    Evaluate every node of the template for the given source values.

    Each intermediate value is rounded to the nearest integer (ties to even)
    before it is used downstream; ``int(...)`` in a rule truncates toward
    zero.

    Args:
        template: The DAG template.
        zorin: First source value in [0, 100].
        vortex: Second source value in [0, 100].

    Returns:
        A mapping from variable name to integer value, in topological order.
    """
    low, high = SOURCE_RANGE
    if not (low <= zorin <= high and low <= vortex <= high):
        raise ContractError(f"source values must lie in [{low}, {high}]")
    values: Dict[str, int] = dict(zip(template.sources, (int(zorin), int(vortex))))
    for name in template.topological_order():
        if name not in values:
            values[name] = round(_evaluate_expression(template.rules[name].expression, values))
    return values


@dataclass(frozen=True)
class Step:
    variable: str
    text: str
    value: int


STEP_PATTERN = re.compile(r"^(?P<variable>\w+) = .* = (?P<value>-?\d+)$")


def render_steps(values: Dict[str, int], template: DagTemplate = DEFAULT_TEMPLATE) -> List[Step]:
    """Render one ``Name = expression = value`` step per non-source node."""
    return [
        Step(
            variable=name,
            text=f"{name} = {template.rules[name].expression} = {values[name]}",
            value=values[name],
        )
        for name in template.step_variables()
    ]


def final_line(answer: int) -> str:
    return FINAL_LINE_TEMPLATE.format(answer=answer)


def parse_step(text: str) -> Step:
    match = STEP_PATTERN.match(text)
    if match is None:
        raise ContractError(f"not a rendered step: {text!r}")
    return Step(variable=match["variable"], text=text, value=int(match["value"]))


def dfs_order(template: DagTemplate) -> List[str]:
    """
    Depth-first pre-order from the target over reversed dependency edges.

    Parents are explored in the order they appear in their rule. Steps that
    the target does not depend on are appended afterwards in canonical order.
    """
    order: List[str] = []
    seen = set()

    def visit(name: str) -> None:
        if name in seen or name in template.sources:
            return
        seen.add(name)
        order.append(name)
        for parent in template.rules[name].parents:
            visit(parent)

    visit(template.target)
    order += [n for n in template.step_variables() if n not in seen]
    return order


def draw_permutations(
    rng: np.random.Generator, n_steps: int, count: int = N_RANDOM_PERMUTATIONS
) -> List[List[int]]:
    return [rng.permutation(n_steps).tolist() for _ in range(count)]


def perturb(
    steps: List[Step],
    mode: "str | PerturbMode",
    fixed_permutations: Optional[Sequence[Sequence[int]]] = None,
    template: DagTemplate = DEFAULT_TEMPLATE,
) -> List[Step]:
    """
    Reorder canonical steps according to a perturbation mode.

    Args:
        steps: Steps in canonical (topological) order.
        mode: One of :class:`PerturbMode`.
        fixed_permutations: The dataset-wide permutations for R1, R2 and R3.
        template: Template used for output-first and DFS orderings.

    Returns:
        The reordered steps; empty for ``no_cot``.
    """
    mode = PerturbMode.parse(mode)
    if mode is PerturbMode.NORMAL:
        return list(steps)
    if mode is PerturbMode.NO_COT:
        return []
    if mode is PerturbMode.RE:
        return list(reversed(steps))
    if mode is PerturbMode.LR:
        out = list(steps)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    if mode is PerturbMode.OF:
        first = [s for s in steps if s.variable == template.target]
        return first + [s for s in steps if s.variable != template.target]
    if mode is PerturbMode.DFS:
        by_variable = {s.variable: s for s in steps}
        return [by_variable[v] for v in dfs_order(template) if v in by_variable]

    index = int(mode.value[1]) - 1
    if fixed_permutations is None or len(fixed_permutations) <= index:
        raise ContractError(f"mode {mode.value} needs fixed permutations")
    permutation = list(fixed_permutations[index])
    if sorted(permutation) != list(range(len(steps))):
        raise ContractError(f"permutation for {mode.value} does not match {len(steps)} steps")
    return [steps[i] for i in permutation]


@dataclass
class ReasoningSample:
    id: str
    zorin: int
    vortex: int
    question: str
    steps: List[Step]
    answer: int
    mode: PerturbMode
    values: Dict[str, int] = field(default_factory=dict)

    @property
    def signature(self) -> Tuple[int, int, int]:
        return (self.zorin, self.vortex, self.answer)

    @property
    def response(self) -> str:
        return "\n".join([s.text for s in self.steps] + [final_line(self.answer)])

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "mode": self.mode.value,
            "question": self.question,
            "steps": [s.text for s in self.steps],
            "answer": self.answer,
            "values": self.values,
            "signature": list(self.signature),
        }

    @classmethod
    def from_record(cls, record: dict) -> "ReasoningSample":
        values = {k: int(v) for k, v in record["values"].items()}
        return cls(
            id=record["id"],
            zorin=values["Zorin"],
            vortex=values["Vortex"],
            question=record["question"],
            steps=[parse_step(text) for text in record["steps"]],
            answer=int(record["answer"]),
            mode=PerturbMode.parse(record["mode"]),
            values=values,
        )


def make_sample(
    sample_id: str,
    zorin: int,
    vortex: int,
    mode: "str | PerturbMode" = PerturbMode.NORMAL,
    fixed_permutations: Optional[Sequence[Sequence[int]]] = None,
    template: DagTemplate = DEFAULT_TEMPLATE,
) -> ReasoningSample:
    values = evaluate_dag(template, zorin, vortex)
    steps = perturb(render_steps(values, template), mode, fixed_permutations, template)
    return ReasoningSample(
        id=sample_id,
        zorin=zorin,
        vortex=vortex,
        question=QUESTION_TEMPLATE.format(zorin=zorin, vortex=vortex),
        steps=steps,
        answer=values[template.target],
        mode=PerturbMode.parse(mode),
        values=values,
    )


class DatasetManifest(TypedDict):
    seed: int
    n_train: int
    n_test: int
    modes: List[str]
    permutations: Dict[str, List[int]]
    files: Dict[str, str]


def train_file_name(mode: "str | PerturbMode") -> str:
    return f"train_{PerturbMode.parse(mode).value}.jsonl"


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for record in records:
            fp.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]


def load_samples(path: Path) -> List[ReasoningSample]:
    return [ReasoningSample.from_record(r) for r in read_jsonl(Path(path))]


def sample_signatures(
    n_samples: int, rng: np.random.Generator, template: DagTemplate = DEFAULT_TEMPLATE
) -> List[Tuple[int, int, int]]:
    """
    Draw ``n_samples`` source pairs with pairwise distinct signatures.

    Raises:
        GenerationError: If the request exceeds the number of achievable
            signatures or the attempt limit is reached.
    """
    low, high = SOURCE_RANGE
    capacity = (high - low + 1) ** 2
    if n_samples > capacity:
        raise GenerationError(
            f"requested {n_samples} unique samples but only {capacity} signatures exist"
        )
    seen = set()
    signatures: List[Tuple[int, int, int]] = []
    attempts, max_attempts = 0, 200 * max(n_samples, 1) + 10 * capacity
    with tqdm(total=n_samples, desc="Sampling signatures", disable=n_samples < 1000) as bar:
        while len(signatures) < n_samples:
            attempts += 1
            if attempts > max_attempts:
                raise GenerationError(
                    f"exhausted unique signatures after {attempts} draws ({len(signatures)} found)"
                )
            zorin, vortex = (int(x) for x in rng.integers(low, high + 1, size=2))
            values = evaluate_dag(template, zorin, vortex)
            signature = (zorin, vortex, values[template.target])
            if signature in seen:
                continue
            seen.add(signature)
            signatures.append(signature)
            bar.update(1)
    return signatures


def generate_dataset(
    output_dir: Path,
    n_train: int = 2000,
    n_test: int = 500,
    modes: Optional[Sequence["str | PerturbMode"]] = None,
    seed: int = DEFAULT_SEED,
    template: DagTemplate = DEFAULT_TEMPLATE,
) -> DatasetManifest:
    """
    Generate one training file per perturbation mode plus a canonical test file.

    The random permutations for R1-R3 are drawn first from the master seed,
    followed by the training signatures and then the test signatures, so that
    train and test are disjoint and the output is identical for equal seeds.

    Args:
        output_dir: Directory receiving the JSONL files and ``manifest.json``.
        n_train: Number of base training samples (shared by all modes).
        n_test: Number of test samples.
        modes: Perturbation modes to write; defaults to all of them.
        seed: Master seed.
        template: The DAG template.

    Returns:
        The manifest that was written.
    """
    modes = [PerturbMode.parse(m) for m in (modes or ALL_MODES)]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_steps = len(template.step_variables())
    permutations = draw_permutations(rng, n_steps)
    signatures = sample_signatures(n_train + n_test, rng, template)
    train_signatures, test_signatures = signatures[:n_train], signatures[n_train:]

    files: Dict[str, str] = {}
    for mode in modes:
        records = (
            make_sample(f"train-{i:05d}", z, v, mode, permutations, template).to_record()
            for i, (z, v, _) in enumerate(train_signatures)
        )
        path = output_dir / train_file_name(mode)
        write_jsonl(path, records)
        files[mode.value] = path.name

    test_records = (
        make_sample(f"test-{i:05d}", z, v, PerturbMode.NORMAL, permutations, template).to_record()
        for i, (z, v, _) in enumerate(test_signatures)
    )
    write_jsonl(output_dir / TEST_FILE_NAME, test_records)
    files["test"] = TEST_FILE_NAME

    manifest: DatasetManifest = {
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "modes": [m.value for m in modes],
        "permutations": {f"R{i + 1}": p for i, p in enumerate(permutations)},
        "files": files,
    }
    with open(output_dir / MANIFEST_NAME, "w") as fp:
        json.dump(manifest, fp, indent=2)
    logger.info(
        f"Wrote {len(modes)} training files ({n_train} samples each) "
        f"and {n_test} test samples to {output_dir}"
    )
    return manifest


def load_manifest(data_dir: Path) -> DatasetManifest:
    with open(Path(data_dir) / MANIFEST_NAME, "r") as fp:
        return json.load(fp)
