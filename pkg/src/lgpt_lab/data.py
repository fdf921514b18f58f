"""Text-attributed graph data model, JSONL dataset format, deterministic
hashed text encoder, graph textualization, and synthetic QA task generators.

Each generator is a pure function of its seed and ships with a symbolic
oracle (graph traversal) so dataset validity can be checked independently
of any learned model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or generator configuration."""


class GraphValidationError(DatasetError):
    """A graph violates a structural invariant (ids, endpoints, empty text)."""


@dataclass(frozen=True)
class TextAttributedGraph:
    """Graph whose nodes and edges each carry a non-empty text attribute."""

    nodes: tuple[tuple[int, str], ...]   # (node_id, text)
    edges: tuple[tuple[int, int, str], ...]  # (src, dst, text)

    def validate(self, context: str = "") -> None:
        where = f" in {context}" if context else ""
        ids = [nid for nid, _ in self.nodes]
        if sorted(ids) != list(range(len(ids))):
            raise GraphValidationError(f"node ids must be unique and contiguous from 0{where}")
        for nid, text in self.nodes:
            if not text:
                raise GraphValidationError(f"empty text on node {nid}{where}")
        valid = set(ids)
        for src, dst, text in self.edges:
            if src not in valid or dst not in valid:
                raise GraphValidationError(f"dangling edge ({src}->{dst}){where}")
            if not text:
                raise GraphValidationError(f"empty text on edge ({src}->{dst}){where}")

    def node_text(self, nid: int) -> str:
        return self.nodes[nid][1]


@dataclass(frozen=True)
class QAExample:
    example_id: str
    query: str
    answer: str
    graph: TextAttributedGraph


@dataclass
class DatasetSplit:
    train: list[QAExample] = field(default_factory=list)
    validation: list[QAExample] = field(default_factory=list)
    test: list[QAExample] = field(default_factory=list)
    ratio: tuple[int, int, int] = (6, 2, 2)

    def all_examples(self) -> list[QAExample]:
        return list(self.train) + list(self.validation) + list(self.test)


def split_examples(examples: list[QAExample], ratio=(6, 2, 2)) -> DatasetSplit:
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) <= 0:
        raise DatasetError(f"invalid split ratio {ratio!r}")
    total = sum(ratio)
    n = len(examples)
    n_train = n * ratio[0] // total
    n_val = n * ratio[1] // total
    return DatasetSplit(train=examples[:n_train],
                        validation=examples[n_train:n_train + n_val],
                        test=examples[n_train + n_val:],
                        ratio=tuple(ratio))


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def example_to_obj(ex: QAExample) -> dict:
    return {
        "id": ex.example_id,
        "query": ex.query,
        "answer": ex.answer,
        "nodes": [{"id": nid, "text": text} for nid, text in ex.graph.nodes],
        "edges": [{"src": s, "dst": d, "text": t} for s, d, t in ex.graph.edges],
    }


def obj_to_example(obj: dict) -> QAExample:
    example_id = str(obj["id"])
    nodes = sorted(((int(n["id"]), str(n["text"])) for n in obj["nodes"]))
    # remap possibly sparse ids to contiguous 0..N-1 for dense tensor indexing
    id_map = {nid: i for i, (nid, _) in enumerate(nodes)}
    if len(id_map) != len(nodes):
        raise GraphValidationError(f"duplicate node_id in example {example_id}")
    remapped_nodes = tuple((i, text) for i, (_, text) in enumerate(nodes))
    edges = []
    for e in obj["edges"]:
        src, dst = int(e["src"]), int(e["dst"])
        if src not in id_map or dst not in id_map:
            raise GraphValidationError(f"dangling edge ({src}->{dst}) in example {example_id}")
        edges.append((id_map[src], id_map[dst], str(e["text"])))
    graph = TextAttributedGraph(nodes=remapped_nodes, edges=tuple(edges))
    graph.validate(context=f"example {example_id}")
    ex = QAExample(example_id=example_id, query=str(obj["query"]),
                   answer=str(obj["answer"]), graph=graph)
    if not ex.answer.strip():
        raise GraphValidationError(f"empty answer in example {example_id}")
    return ex


def load_dataset(path, ratio=(6, 2, 2)) -> DatasetSplit:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                examples.append(obj_to_example(obj))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, GraphValidationError):
                    raise DatasetError(f"{path}:{lineno}: {exc}") from exc
                raise DatasetError(f"{path}:{lineno}: malformed example ({exc})") from exc
    if not examples:
        raise DatasetError(f"{path}: empty dataset")
    seen = set()
    for ex in examples:
        if ex.example_id in seen:
            raise DatasetError(f"duplicate example_id {ex.example_id}")
        seen.add(ex.example_id)
    return split_examples(examples, ratio)


def write_dataset(split_or_examples, path) -> None:
    if isinstance(split_or_examples, DatasetSplit):
        examples = split_or_examples.all_examples()
    else:
        examples = list(split_or_examples)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_obj(ex)) + "\n")


# ---------------------------------------------------------------------------
# Textualization and hashed text encoding
# ---------------------------------------------------------------------------

def textualize(graph: TextAttributedGraph) -> str:
    """Flat CSV-like template: node lines, blank separator, edge lines."""
    node_lines = [f"{nid},{text}" for nid, text in graph.nodes]
    edge_lines = [f"{src},{text},{dst}" for src, dst, text in graph.edges]
    return "\n".join(node_lines) + "\n\n" + "\n".join(edge_lines)


_HASH_PROBES = 4


def _token_hash(token: str, probe: int) -> bytes:
    salted = f"{probe}:{token}".encode("utf-8")
    return hashlib.blake2b(salted, digest_size=9).digest()


def text_encode(text: str, d: int) -> np.ndarray:
    """Deterministic feature-hashing bag of tokens, L2-normalized.

    Each token is hashed to ``_HASH_PROBES`` signed buckets (independent
    salts) so that even single-token texts get distinct d-dimensional
    patterns; with one probe two short words collide with probability
    1/(2d), which is far too often for a task vocabulary of dozens of
    words. Empty or whitespace-only input maps to the zero vector
    (documented sentinel for 'no text').
    """
    if d < 8:
        raise DatasetError(f"text_encode requires d >= 8, got {d}")
    vec = np.zeros(d)
    for token in text.lower().split():
        for probe in range(_HASH_PROBES):
            h = _token_hash(token, probe)
            bucket = int.from_bytes(h[:8], "little") % d
            sign = 1.0 if h[8] & 1 else -1.0
            vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


# ---------------------------------------------------------------------------
# Synthetic task generators + traversal oracles
# ---------------------------------------------------------------------------

ENTITY_NAMES = ["fox", "owl", "bear", "wolf", "crane", "otter", "lynx", "hare",
                "mole", "toad", "ibis", "newt", "seal", "finch", "stoat", "viper"]

ATTRIBUTE_VALUES = {
    "color": ["red", "blue", "green", "amber", "violet", "teal"],
    "shape": ["round", "square", "oval", "star", "spiky", "flat"],
    "size": ["tiny", "small", "medium", "large", "huge", "giant"],
    "material": ["wood", "stone", "glass", "metal", "cloth", "clay"],
    "mood": ["calm", "angry", "happy", "sleepy", "bold", "shy"],
    "origin": ["north", "south", "east", "west", "coast", "valley"],
}

CODE_WORDS = ["zeta", "kilo", "nova", "echo", "lima", "onyx",
              "rune", "vega", "iris", "quartz", "delta", "ember"]

STANCE_TOPICS = ["taxes", "parks", "schools", "transit", "housing", "energy",
                 "farming", "fishing", "mining", "tourism"]


def gen_attribute_lookup_task(num_examples: int, nodes_per_graph: int,
                              num_attributes: int, seed: int,
                              ratio=(6, 2, 2)) -> DatasetSplit:
    """Entity nodes linked to attribute-value nodes; query asks one attribute."""
    if num_attributes < 2:
        raise DatasetError(f"num_attributes must be >= 2, got {num_attributes}")
    if nodes_per_graph < 2:
        raise DatasetError(f"nodes_per_graph must be >= 2, got {nodes_per_graph}")
    if num_attributes > len(ATTRIBUTE_VALUES):
        raise DatasetError(f"num_attributes must be <= {len(ATTRIBUTE_VALUES)}")
    rng = np.random.default_rng(seed)
    attr_types = list(ATTRIBUTE_VALUES)[:num_attributes]
    per_entity = 1 + num_attributes
    n_entities = max(1, round(nodes_per_graph / per_entity))
    examples = []
    for i in range(num_examples):
        names = list(rng.choice(ENTITY_NAMES, size=n_entities, replace=False))
        nodes, edges = [], []
        facts = {}
        for name in names:
            ent_id = len(nodes)
            nodes.append((ent_id, name))
            for attr in attr_types:
                value = str(rng.choice(ATTRIBUTE_VALUES[attr]))
                val_id = len(nodes)
                nodes.append((val_id, value))
                # the relation text names its subject ("stoat has_color"), as
                # triple textualizations usually do; this also puts the
                # entity/attribute pair on a single edge feature, so a
                # query-conditioned attention score can match both at once
                edges.append((ent_id, val_id, f"{name} has_{attr}"))
                facts[(name, attr)] = value
        q_name = names[int(rng.integers(n_entities))]
        q_attr = attr_types[int(rng.integers(num_attributes))]
        graph = TextAttributedGraph(nodes=tuple(nodes), edges=tuple(edges))
        examples.append(QAExample(
            example_id=f"attr-{seed}-{i}",
            query=f"what is the {q_attr} of the {q_name}",
            answer=facts[(q_name, q_attr)],
            graph=graph,
        ))
    return split_examples(examples, ratio)


def gen_multifact_task(num_examples: int, facts_per_answer: int, seed: int,
                       ratio=(6, 2, 2)) -> DatasetSplit:
    """Answers are k-word codes scattered across k distinct nodes.

    Answering correctly requires aggregating all k facts; this is the
    information-bottleneck stressor for single-vector vs multi-token pooling.
    """
    k = facts_per_answer
    if k < 2:
        raise DatasetError(f"facts_per_answer must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(num_examples):
        name = str(rng.choice(ENTITY_NAMES))
        nodes, edges = [(0, name)], []
        words = [str(rng.choice(CODE_WORDS)) for _ in range(k)]
        for j, word in enumerate(words):
            fact_id = len(nodes)
            nodes.append((fact_id, word))
            edges.append((0, fact_id, f"part_{j + 1}"))
        graph = TextAttributedGraph(nodes=tuple(nodes), edges=tuple(edges))
        examples.append(QAExample(
            example_id=f"multifact-{seed}-{i}",
            query=f"recite the code of the {name}",
            answer=" ".join(words),
            graph=graph,
        ))
    return split_examples(examples, ratio)


def gen_stance_task(num_examples: int, seed: int, ratio=(6, 2, 2)) -> DatasetSplit:
    """Binary support/counter judgement read off a designated relation edge."""
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(num_examples):
        polarity = "supports" if i % 2 == 0 else "counters"
        topic_a, topic_b = rng.choice(STANCE_TOPICS, size=2, replace=False)
        filler = str(rng.choice(ENTITY_NAMES))
        nodes = (
            (0, f"argument about {topic_a}"),
            (1, f"argument about {topic_b}"),
            (2, filler),
        )
        edges = (
            (0, 1, polarity),
            (2, 0, "relates"),
        )
        graph = TextAttributedGraph(nodes=nodes, edges=edges)
        examples.append(QAExample(
            example_id=f"stance-{seed}-{i}",
            query="does the first argument support the second argument",
            answer="support" if polarity == "supports" else "counter",
            graph=graph,
        ))
    # shuffle so splits stay class-balanced but not strictly alternating
    order = rng.permutation(len(examples))
    examples = [examples[j] for j in order]
    return split_examples(examples, ratio)


def oracle_answer(ex: QAExample) -> str | None:
    """Answer a generated example by symbolic graph traversal.

    Independent of any learned component; used to certify dataset validity.
    Returns None when the query cannot be resolved from the graph.
    """
    tokens = ex.query.split()
    graph = ex.graph
    by_text = {}
    for nid, text in graph.nodes:
        by_text.setdefault(text, nid)
    if tokens[:3] == ["what", "is", "the"]:
        attr, name = tokens[3], tokens[-1]
        ent = by_text.get(name)
        if ent is None:
            return None
        for src, dst, text in graph.edges:
            if src == ent and text.endswith(f"has_{attr}"):
                return graph.node_text(dst)
        return None
    if tokens[:4] == ["recite", "the", "code", "of"]:
        name = tokens[-1]
        ent = by_text.get(name)
        if ent is None:
            return None
        parts = []
        for src, dst, text in graph.edges:
            if src == ent and text.startswith("part_"):
                parts.append((int(text.split("_")[1]), graph.node_text(dst)))
        if not parts:
            return None
        return " ".join(word for _, word in sorted(parts))
    if tokens[0] == "does":
        for src, dst, text in graph.edges:
            if text == "supports":
                return "support"
            if text == "counters":
                return "counter"
        return None
    return None
