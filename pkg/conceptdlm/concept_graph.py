"""
This module contains the concept-level causal graphs used for supervision.

Graphs either come from a teacher LLM (``extract_graph``), prompted with the
packaged system prompt and two in-context demonstrations, or from the dataset's
own DAG (``oracle_graph``). The module also scores human judgments of teacher
graphs and estimates annotation cost.
"""

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypedDict

import numpy as np
import pandas as pd

from .dataset import DEFAULT_TEMPLATE, DagTemplate, PerturbMode, ReasoningSample, render_steps
from .errors import ContractError, TransportError
from .logger import logger
from .parallel import parallel_map
from .provider import Completion, Message, TeacherProvider

ALLOWED_SCORES = (0.0, 0.5, 1.0)
PROMPT_ASSETS = (
    "system_prompt.txt",
    "demo_1_input.txt",
    "demo_1_output.txt",
    "demo_2_input.txt",
    "demo_2_output.txt",
)


@dataclass
class ConceptGraph:
    """
    Concepts, the residual context and effect -> causes edges.

    Attributes:
        concepts: Unique concept strings, in first-seen order.
        context: The text left over once concept spans are removed.
        edges: Mapping from an effect concept to its cause concepts.
        step_of: Optional step index per concept (1-based).
    """

    concepts: List[str] = field(default_factory=list)
    context: str = ""
    edges: Dict[str, List[str]] = field(default_factory=dict)
    step_of: Optional[Dict[str, int]] = None

    def edge_pairs(self) -> List[Tuple[str, str]]:
        """All (cause, effect) pairs."""
        return [(cause, effect) for effect, causes in self.edges.items() for cause in causes]

    def find_cycle(self) -> Optional[List[str]]:
        """Return one cycle in cause -> effect direction, or None if acyclic."""
        successors: Dict[str, List[str]] = {c: [] for c in self.concepts}
        for cause, effect in self.edge_pairs():
            successors.setdefault(cause, []).append(effect)
            successors.setdefault(effect, [])
        color: Dict[str, int] = {c: 0 for c in successors}
        path: List[str] = []

        def visit(node: str) -> Optional[List[str]]:
            color[node] = 1
            path.append(node)
            for nxt in successors[node]:
                if color[nxt] == 1:
                    return path[path.index(nxt) :] + [nxt]
                if color[nxt] == 0:
                    found = visit(nxt)
                    if found:
                        return found
            color[node] = 2
            path.pop()
            return None

        for node in successors:
            if color[node] == 0:
                found = visit(node)
                if found:
                    return found
        return None

    def to_dict(self) -> dict:
        return {
            "concepts": self.concepts,
            "context": self.context,
            "edges": self.edges,
            "step_of": self.step_of,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptGraph":
        return cls(
            concepts=list(data["concepts"]),
            context=data.get("context", ""),
            edges={k: list(v) for k, v in data["edges"].items()},
            step_of=data.get("step_of"),
        )


@dataclass
class AnnotationResult:
    sample_id: str
    graph: Optional[ConceptGraph]
    failure_reason: Optional[str]
    raw_reply: str = ""
    tokens_in: int = 0
    tokens_out: int = 0
    transport_failure: bool = False

    @property
    def decode_failure(self) -> bool:
        return self.graph is None

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "graph": self.graph.to_dict() if self.graph is not None else None,
            "failure_reason": self.failure_reason,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "transport_failure": self.transport_failure,
        }


def remove_spans(text: str, concepts: Sequence[str]) -> str:
    """Drop the first occurrence of every concept and collapse whitespace."""
    for concept in sorted(concepts, key=len, reverse=True):
        text = text.replace(concept, " ", 1)
    return " ".join(text.split())


# Teacher extraction


def load_prompt_assets() -> Dict[str, str]:
    package = resources.files("conceptdlm") / "assets"
    return {name: (package / name).read_text(encoding="utf-8").strip() for name in PROMPT_ASSETS}


def source_text(question: str, answer_cot: str) -> str:
    return f"Question: {question}\n\nAnswer: {answer_cot}"


def build_messages(question: str, answer_cot: str) -> List[Message]:
    assets = load_prompt_assets()
    return [
        {"role": "system", "content": assets["system_prompt.txt"]},
        {"role": "user", "content": assets["demo_1_input.txt"]},
        {"role": "assistant", "content": assets["demo_1_output.txt"]},
        {"role": "user", "content": assets["demo_2_input.txt"]},
        {"role": "assistant", "content": assets["demo_2_output.txt"]},
        {"role": "user", "content": source_text(question, answer_cot)},
    ]


def first_json_object(reply: str) -> Optional[str]:
    """Return the first balanced ``{...}`` block of ``reply``, respecting JSON strings."""
    start = reply.find("{")
    while start != -1:
        depth, in_string, escaped = 0, False, False
        for i in range(start, len(reply)):
            char = reply[i]
            if in_string:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == '"':
                    in_string = False
            elif char == '"':
                in_string = True
            elif char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    return reply[start : i + 1]
        start = reply.find("{", start + 1)
    return None


def parse_graph_reply(reply: str, text: str) -> Tuple[Optional[ConceptGraph], Optional[str]]:
    """
    Turn a teacher reply into a graph, or explain why it cannot be used.

    Returns:
        ``(graph, None)`` on success, ``(None, reason)`` otherwise.
    """
    block = first_json_object(reply)
    if block is None:
        return None, "no JSON object in reply"
    try:
        data = json.loads(block)
    except json.JSONDecodeError as e:
        return None, f"malformed JSON: {e.msg}"
    if not isinstance(data, dict) or not data:
        return None, "reply is not a non-empty object"

    edges: Dict[str, List[str]] = {}
    concepts: List[str] = []
    for effect, causes in data.items():
        if not isinstance(causes, list) or not all(isinstance(c, str) for c in causes):
            return None, f"causes of {effect!r} are not a list of strings"
        edges[effect] = list(dict.fromkeys(causes))
        for concept in [effect] + edges[effect]:
            if concept not in text:
                return None, "concept not in text"
            if concept not in concepts:
                concepts.append(concept)
    graph = ConceptGraph(concepts=concepts, context=remove_spans(text, concepts), edges=edges)
    return graph, None


def extract_graph(
    question: str, answer_cot: str, provider: TeacherProvider, sample_id: str = ""
) -> AnnotationResult:
    """
    Ask the teacher model for an effect -> causes graph of a solved problem.

    Malformed replies never raise; they are reported through
    ``AnnotationResult.failure_reason``.

    Args:
        question: The problem statement.
        answer_cot: The chain-of-thought answer.
        provider: The teacher endpoint.
        sample_id: Identifier carried into the result.

    Raises:
        TransportError: If the provider cannot be reached.
    """
    completion: Completion = provider.complete(build_messages(question, answer_cot))
    graph, reason = parse_graph_reply(completion.text, source_text(question, answer_cot))
    if graph is None:
        logger.warning(f"Decode failure for sample {sample_id or '<unnamed>'}: {reason}")
    return AnnotationResult(
        sample_id=sample_id,
        graph=graph,
        failure_reason=reason,
        raw_reply=completion.text,
        tokens_in=completion.tokens_in,
        tokens_out=completion.tokens_out,
    )


class AnnotationSummary(TypedDict):
    n_samples: int
    n_failures: int
    n_transport_failures: int
    failure_rate: float
    tokens_in: int
    tokens_out: int


def annotate_samples(
    samples: Sequence[ReasoningSample],
    provider: TeacherProvider,
    output_path: Path,
    n_jobs: int = 1,
) -> AnnotationSummary:
    """
    Annotate many samples, write the results as JSONL and summarise failures.

    Requests run on up to ``n_jobs`` threads; records are written in input
    order regardless of completion order. A sample whose request fails after
    all retries is recorded as a failed annotation so that the replies already
    received are kept.
    """

    def run(sample: ReasoningSample) -> AnnotationResult:
        try:
            return extract_graph(sample.question, sample.response, provider, sample_id=sample.id)
        except TransportError as e:
            logger.error(f"Transport failure for sample {sample.id}: {e}")
            return AnnotationResult(
                sample_id=sample.id, graph=None, failure_reason=f"transport failure: {e}", transport_failure=True
            )

    results = parallel_map(run, list(samples), n_jobs=n_jobs, desc="Annotating")

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as fp:
        for result in results:
            fp.write(json.dumps(result.to_record(), ensure_ascii=False) + "\n")

    n_failures = len([r for r in results if r.decode_failure])
    n_transport_failures = len([r for r in results if r.transport_failure])
    summary: AnnotationSummary = {
        "n_samples": len(results),
        "n_failures": n_failures,
        "n_transport_failures": n_transport_failures,
        "failure_rate": n_failures / len(results) if results else 0.0,
        "tokens_in": int(np.sum([r.tokens_in for r in results])),
        "tokens_out": int(np.sum([r.tokens_out for r in results])),
    }
    logger.info(
        f"Annotated {summary['n_samples']} samples, "
        f"{n_failures} failures ({summary['failure_rate']:.1%}), {n_transport_failures} of them transport"
    )
    return summary


def load_annotations(path: Path) -> Dict[str, Optional[ConceptGraph]]:
    graphs: Dict[str, Optional[ConceptGraph]] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.strip():
                continue
            record = json.loads(line)
            graph = record.get("graph")
            graphs[record["id"]] = ConceptGraph.from_dict(graph) if graph else None
    return graphs


# Oracle graphs


def oracle_graph(sample: ReasoningSample, template: DagTemplate = DEFAULT_TEMPLATE) -> ConceptGraph:
    """
    Ground-truth graph of a generated sample, read off the DAG template.

    Every rendered step is a concept; each non-source parent's step is a cause
    of the child's step; step indices follow the canonical order; the
    question is the context. Samples without steps yield an empty graph.
    """
    if sample.mode is PerturbMode.NO_COT or not sample.steps:
        return ConceptGraph(context=sample.question)
    canonical = render_steps(sample.values, template)
    text_of = {s.variable: s.text for s in canonical}
    present = {s.variable for s in sample.steps}
    concepts = [text_of[s.variable] for s in canonical if s.variable in present]
    edges: Dict[str, List[str]] = {}
    for step in canonical:
        if step.variable not in present:
            continue
        causes = [
            text_of[p]
            for p in template.rules[step.variable].parents
            if p not in template.sources and p in present
        ]
        if causes:
            edges[step.text] = causes
    step_of = {s.text: i + 1 for i, s in enumerate(canonical) if s.variable in present}
    return ConceptGraph(concepts=concepts, context=sample.question, edges=edges, step_of=step_of)


# Validation, scoring and cost


class GraphReport(TypedDict):
    ok: bool
    violations: List[str]


def validate_graph(graph: ConceptGraph, text: str) -> GraphReport:
    """
    Check a graph against the text it was extracted from.

    Reports cycles, concepts that are absent or not unique in ``text``, edge
    endpoints outside the concept list, and effects with empty cause lists.
    """
    violations: List[str] = []
    known = set(graph.concepts)
    for effect, causes in graph.edges.items():
        if not causes:
            violations.append(f"empty cause list: {effect!r}")
        for concept in [effect] + list(causes):
            if concept not in known:
                violations.append(f"edge endpoint is not a concept: {concept!r}")
    for concept in graph.concepts:
        occurrences = text.count(concept)
        if occurrences == 0:
            violations.append(f"concept not in text: {concept!r}")
        elif occurrences > 1:
            violations.append(f"concept not unique ({occurrences} occurrences): {concept!r}")
    cycle = graph.find_cycle()
    if cycle:
        violations.append("cycle: " + " -> ".join(repr(c) for c in cycle))
    return {"ok": not violations, "violations": violations}


class GraphScores(TypedDict):
    per_instance: List[float]
    overall: float
    micro: float
    n_pairs: int


def score_graphs(judgments: Sequence[Sequence[float]]) -> GraphScores:
    """
    Aggregate per-pair judgments (1, 0.5 or 0) of annotated graphs.

    ``overall`` is the macro average: the mean over instances of each
    instance's mean pair score. ``micro`` pools all pairs.

    Raises:
        ContractError: On an empty instance or a score outside {0, 0.5, 1}.
    """
    if not judgments:
        raise ContractError("no instances to score")
    per_instance: List[float] = []
    for i, scores in enumerate(judgments):
        if len(scores) == 0:
            raise ContractError(f"instance {i} has no scored pairs")
        bad = [s for s in scores if float(s) not in ALLOWED_SCORES]
        if bad:
            raise ContractError(f"instance {i} has scores outside {{0, 0.5, 1}}: {bad}")
        per_instance.append(float(np.mean(scores)))
    pooled = pd.Series([float(s) for scores in judgments for s in scores])
    return {
        "per_instance": per_instance,
        "overall": float(np.mean(per_instance)),
        "micro": float(pooled.mean()),
        "n_pairs": int(pooled.size),
    }


def micro_accuracy_from_counts(counts: Dict[str, int]) -> float:
    """Pooled accuracy from counts keyed by score, e.g. ``{"1": 280, "0.5": 28, "0": 3}``."""
    total = sum(int(n) for n in counts.values())
    if total <= 0:
        raise ContractError("no scored pairs")
    for key in counts:
        if float(key) not in ALLOWED_SCORES:
            raise ContractError(f"score outside {{0, 0.5, 1}}: {key}")
    return float(np.sum([float(k) * int(n) for k, n in counts.items()]) / total)


def estimate_cost(
    t_in: float,
    t_out: float,
    p_in: float,
    p_out: float,
    avg_len: float,
    currency_factor: float = 1.0,
) -> float:
    """
    Annotation cost per million data tokens.

    Args:
        t_in: Average input tokens per annotated instance (prompt included).
        t_out: Average output tokens per instance.
        p_in: Price per million input tokens.
        p_out: Price per million output tokens.
        avg_len: Average data tokens per instance.
        currency_factor: Multiplier converting the price currency.

    Returns:
        ``(t_in * p_in + t_out * p_out) / avg_len * currency_factor``.
    """
    if avg_len <= 0:
        raise ContractError("average length must be positive")
    if min(t_in, t_out, p_in, p_out) < 0:
        raise ContractError("token counts and prices must be nonnegative")
    return (t_in * p_in + t_out * p_out) / avg_len * currency_factor
