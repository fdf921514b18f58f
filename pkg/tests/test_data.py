"""Graph data model, text encoder, dataset format, generators and oracles."""

import itertools
import json

import numpy as np
import pytest

from lgpt_lab.data import (ATTRIBUTE_VALUES, CODE_WORDS, ENTITY_NAMES,
                           DatasetError, GraphValidationError, QAExample,
                           TextAttributedGraph, gen_attribute_lookup_task,
                           gen_multifact_task, gen_stance_task, load_dataset,
                           oracle_answer, split_examples, text_encode,
                           textualize, write_dataset)


class TestGraphModel:
    def test_validate_accepts_well_formed(self):
        g = TextAttributedGraph(nodes=((0, "dog"), (1, "cat")),
                                edges=((0, 1, "chases"),))
        g.validate()

    def test_validate_rejects_noncontiguous_ids(self):
        g = TextAttributedGraph(nodes=((0, "dog"), (2, "cat")), edges=())
        with pytest.raises(GraphValidationError):
            g.validate()

    def test_validate_rejects_dangling_edge(self):
        g = TextAttributedGraph(nodes=((0, "dog"),), edges=((0, 5, "sees"),))
        with pytest.raises(GraphValidationError):
            g.validate()

    def test_validate_rejects_empty_text(self):
        g = TextAttributedGraph(nodes=((0, ""),), edges=())
        with pytest.raises(GraphValidationError):
            g.validate()


class TestTextualize:
    def test_minimal_graph(self):
        g = TextAttributedGraph(nodes=((0, "dog"),), edges=())
        assert textualize(g) == "0,dog\n\n"

    def test_one_edge_schema(self):
        g = TextAttributedGraph(nodes=((0, "dog"), (1, "cat")),
                                edges=((0, 1, "chases"),))
        assert textualize(g) == "0,dog\n1,cat\n\n0,chases,1"

    def test_injective_on_generated_batch(self):
        split = gen_attribute_lookup_task(120, nodes_per_graph=4,
                                          num_attributes=3, seed=5)
        texts = [textualize(ex.graph) for ex in split.all_examples()]
        distinct_graphs = {(ex.graph.nodes, ex.graph.edges)
                           for ex in split.all_examples()}
        assert len(set(texts)) == len(distinct_graphs)


class TestTextEncode:
    def test_deterministic(self):
        a = text_encode("dog chases cat", 64)
        b = text_encode("dog chases cat", 64)
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        assert abs(np.linalg.norm(text_encode("dog chases cat", 64)) - 1.0) < 1e-12

    def test_empty_string_is_zero_vector(self):
        assert np.all(text_encode("", 64) == 0.0)
        assert np.all(text_encode("   ", 64) == 0.0)

    def test_rejects_small_dimension(self):
        with pytest.raises(DatasetError):
            text_encode("dog", 4)

    def test_case_insensitive(self):
        assert np.array_equal(text_encode("Dog", 32), text_encode("dog", 32))

    def test_task_vocabulary_words_are_distinct(self):
        """No two task words may collide: collisions make answers
        unrecoverable downstream (observed with single-probe hashing)."""
        words = sorted({w for vs in ATTRIBUTE_VALUES.values() for w in vs}
                       | set(ENTITY_NAMES) | set(CODE_WORDS))
        vecs = [text_encode(w, 64) for w in words]
        for (i, a), (j, b) in itertools.combinations(enumerate(vecs), 2):
            assert abs(float(a @ b)) < 0.999, (words[i], words[j])

    def test_disjoint_vocabulary_low_cosine(self):
        rng = np.random.default_rng(3)
        words = list(ENTITY_NAMES)
        worst = 0.0
        for _ in range(100):
            s1 = " ".join(rng.choice(words, 3))
            s2 = " ".join(w + "ish" for w in rng.choice(words, 3))
            c = abs(float(text_encode(s1, 64) @ text_encode(s2, 64)))
            worst = max(worst, c)
        assert worst < 0.5


class TestDatasetIO:
    def _roundtrip(self, split, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(split, path)
        loaded = load_dataset(path)
        assert [ex.example_id for ex in loaded.all_examples()] == \
               [ex.example_id for ex in split.all_examples()]
        assert [ex.answer for ex in loaded.all_examples()] == \
               [ex.answer for ex in split.all_examples()]
        for a, b in zip(loaded.all_examples(), split.all_examples()):
            assert a.graph.nodes == b.graph.nodes
            assert a.graph.edges == b.graph.edges

    def test_jsonl_roundtrip(self, tmp_path):
        split = gen_attribute_lookup_task(20, nodes_per_graph=4,
                                          num_attributes=3, seed=1)
        self._roundtrip(split, tmp_path)

    @staticmethod
    def _obj(example_id="e0"):
        return {"id": example_id, "query": "q", "answer": "a",
                "nodes": [{"id": 0, "text": "dog"}], "edges": []}

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(self._obj()) + "\n{not json\n")
        with pytest.raises(DatasetError, match=":2"):
            load_dataset(path)

    def test_missing_field_reports_line_number(self, tmp_path):
        path = tmp_path / "missing.jsonl"
        obj = self._obj()
        del obj["answer"]
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DatasetError, match=":1"):
            load_dataset(path)

    def test_duplicate_example_id_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        line = json.dumps(self._obj())
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(DatasetError, match="e0"):
            load_dataset(path)

    def test_sparse_node_ids_are_remapped(self, tmp_path):
        path = tmp_path / "sparse.jsonl"
        obj = {"id": "e0", "query": "q", "answer": "a",
               "nodes": [{"id": 3, "text": "dog"}, {"id": 9, "text": "cat"}],
               "edges": [{"src": 3, "dst": 9, "text": "chases"}]}
        path.write_text(json.dumps(obj) + "\n")
        loaded = load_dataset(path, ratio=(1, 0, 0))
        g = loaded.train[0].graph
        assert g.nodes == ((0, "dog"), (1, "cat"))
        assert g.edges == ((0, 1, "chases"),)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DatasetError):
            load_dataset(path)


class TestSplits:
    def test_default_ratio_and_disjointness(self):
        split = gen_attribute_lookup_task(1000, nodes_per_graph=4,
                                          num_attributes=3, seed=7)
        assert len(split.train) == 600
        assert len(split.validation) == 200
        assert len(split.test) == 200
        ids = [ex.example_id for ex in split.all_examples()]
        assert len(set(ids)) == len(ids)

    def test_split_examples_rejects_bad_ratio(self):
        exs = [QAExample(example_id=str(i), query="q", answer="a",
                         graph=TextAttributedGraph(nodes=((0, "x"),), edges=()))
               for i in range(10)]
        with pytest.raises(DatasetError):
            split_examples(exs, ratio=(0, 0, 0))


class TestGenerators:
    def test_attribute_lookup_deterministic(self):
        a = gen_attribute_lookup_task(50, nodes_per_graph=4, num_attributes=3, seed=9)
        b = gen_attribute_lookup_task(50, nodes_per_graph=4, num_attributes=3, seed=9)
        for x, y in zip(a.all_examples(), b.all_examples()):
            assert x == y

    def test_attribute_lookup_answer_in_graph(self):
        split = gen_attribute_lookup_task(100, nodes_per_graph=8,
                                          num_attributes=3, seed=2)
        for ex in split.all_examples():
            assert ex.answer in [t for _, t in ex.graph.nodes]

    def test_attribute_lookup_rejects_bad_params(self):
        with pytest.raises(DatasetError):
            gen_attribute_lookup_task(10, nodes_per_graph=4, num_attributes=1, seed=0)
        with pytest.raises(DatasetError):
            gen_attribute_lookup_task(10, nodes_per_graph=1, num_attributes=3, seed=0)

    def test_multifact_answer_has_k_tokens(self):
        split = gen_multifact_task(60, facts_per_answer=4, seed=3)
        for ex in split.all_examples():
            assert len(ex.answer.split()) == 4

    def test_multifact_rejects_small_k(self):
        with pytest.raises(DatasetError):
            gen_multifact_task(10, facts_per_answer=1, seed=0)

    def test_stance_is_balanced(self):
        split = gen_stance_task(400, seed=4)
        answers = [ex.answer for ex in split.all_examples()]
        frac = answers.count("support") / len(answers)
        assert 0.4 < frac < 0.6


class TestOracles:
    """Traversal oracles certify that every generated answer is recoverable
    from its own graph — the data-validity bedrock for all training tests."""

    def test_attribute_oracle_perfect(self):
        split = gen_attribute_lookup_task(300, nodes_per_graph=8,
                                          num_attributes=3, seed=7)
        assert all(oracle_answer(ex) == ex.answer for ex in split.all_examples())

    def test_multifact_oracle_perfect(self):
        split = gen_multifact_task(300, facts_per_answer=4, seed=11)
        assert all(oracle_answer(ex) == ex.answer for ex in split.all_examples())

    def test_stance_oracle_perfect(self):
        split = gen_stance_task(300, seed=13)
        assert all(oracle_answer(ex) == ex.answer for ex in split.all_examples())

    def test_multifact_shuffled_facts_break_oracle(self):
        """Mutual-information proxy: moving fact nodes across examples must
        destroy answer recoverability (the facts carry the information)."""
        split = gen_multifact_task(200, facts_per_answer=4, seed=6)
        exs = split.all_examples()
        rng = np.random.default_rng(0)
        hits = 0
        for i, ex in enumerate(exs):
            donor = exs[(i + 1) % len(exs)]
            # swap in the donor's fact nodes, keep this example's answer
            nodes = [ex.graph.nodes[0]] + list(donor.graph.nodes[1:])
            corrupted = QAExample(example_id=ex.example_id, query=ex.query,
                                  answer=ex.answer,
                                  graph=TextAttributedGraph(
                                      nodes=tuple(nodes), edges=ex.graph.edges))
            if oracle_answer(corrupted) == ex.answer:
                hits += 1
        assert hits / len(exs) < 0.05
