"""End-to-end training of the graph-encoder parameter set against a frozen
LM, plus evaluation, a finite-difference gradient check over every trainable
group, and the ablation matrix runner.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import (DatasetSplit, QAExample, TextAttributedGraph, gen_attribute_lookup_task,
                   gen_multifact_task, gen_stance_task, text_encode, textualize)
from .encoder import (EncodedGraph, GraphTransformerLayer, OpCounter, attach_query_node,
                      init_node_edge_states, run_gnn_graph, run_gnn_query)
from .lm import (LmConfig, PromptOverflowError, TinyDecoderLM, answer_loss,
                 assemble_prompt, detokenize, greedy_decode, lm_forward, tokenize)
from .pooling import (LateFusionParams, LgptParams, ProjectionMlp, PromptVectors,
                      late_fusion_cross_attention, lgpt_pool, mean_pool, project)
from .tensor import AdamW, Tensor

log = logging.getLogger(__name__)

READOUTS = ("mean", "lgpt")
FUSIONS = ("none", "early", "late", "early_late")
TASKS = ("attribute_lookup", "multifact", "stance")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    task: str = "attribute_lookup"
    readout: str = "lgpt"
    fusion: str = "early"
    n_tokens: int = 8
    lr: float = 1e-4
    batch_size: int = 8
    max_steps: int = 5000
    eval_every: int = 500
    seed: int = 0
    d: int = 64
    d_llm: int = 64
    heads: int = 4
    l_query: int = 1
    l_graph: int = 4
    l_pool: int = 1
    pool_include_query: bool = True
    decode_max_len: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if min(self.l_query, self.l_graph, self.l_pool) < 0:
            raise ConfigError("layer depths must be >= 0")
        if self.n_tokens < 1:
            raise ConfigError(f"n_tokens must be >= 1, got {self.n_tokens}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.readout == "mean":
            self.n_tokens = 1

    @property
    def early(self) -> bool:
        return self.fusion in ("early", "early_late")

    @property
    def late(self) -> bool:
        return self.fusion in ("late", "early_late")


class EncoderParams:
    """The full trainable parameter set: query/graph/pool GNN stacks,
    pooling tokens, late-fusion weights and the projection MLP — only the
    groups active under the config are constructed."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.config = config
        d, heads = config.d, config.heads
        self.query_link: Tensor | None = None
        self.query_layers: list[GraphTransformerLayer] = []
        if config.early:
            self.query_link = Tensor(rng.normal(size=(1, d)) * 0.02, requires_grad=True)
            self.query_layers = [GraphTransformerLayer(rng, d, heads)
                                 for _ in range(config.l_query)]
        self.graph_layers = [GraphTransformerLayer(rng, d, heads)
                             for _ in range(config.l_graph)]
        self.lgpt: LgptParams | None = None
        if config.readout == "lgpt":
            self.lgpt = LgptParams.init(rng, n=config.n_tokens, d=d, heads=heads,
                                        num_layers=config.l_pool)
        self.late_fusion: LateFusionParams | None = None
        if config.late:
            self.late_fusion = LateFusionParams.init(rng, d)
        self.proj = ProjectionMlp.init(rng, d, config.d_llm)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.query_link is not None:
            out["gnn_query.query_link"] = self.query_link
        for i, layer in enumerate(self.query_layers):
            out.update(layer.named_params(f"gnn_query.layer{i}"))
        for i, layer in enumerate(self.graph_layers):
            out.update(layer.named_params(f"gnn_graph.layer{i}"))
        if self.lgpt is not None:
            out.update(self.lgpt.named_params("lgpt"))
        if self.late_fusion is not None:
            out.update(self.late_fusion.named_params("late_fusion"))
        out.update(self.proj.named_params("proj"))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.named().items():
            p.data = snap[name].copy()


def encode_to_prompt(graph: TextAttributedGraph, query: str, enc: EncoderParams,
                     config: RunConfig, counter: OpCounter | None = None) -> PromptVectors:
    """The full encoder path: optional query fusion, structural encoding,
    readout, optional late fusion, projection."""
    eg = init_node_edge_states(graph, config.d)
    if config.early:
        query_vec = Tensor(text_encode(query, config.d).reshape(1, config.d))
        eg = attach_query_node(eg, query_vec, enc.query_link)
        eg = run_gnn_query(eg, enc.query_layers, counter=counter)
    eg = run_gnn_graph(eg, enc.graph_layers, counter=counter)
    if config.readout == "lgpt":
        pool_eg = eg
        if eg.query_node_index is not None and not config.pool_include_query:
            rows = T.gather_rows(eg.node_states, np.arange(eg.num_nodes - 1, dtype=np.intp))
            pool_eg = EncodedGraph(node_states=rows, edge_index=(), edge_states=eg.edge_states)
        tokens = lgpt_pool(pool_eg, enc.lgpt, counter=counter)
        provenance = "lgpt"
    else:
        tokens = mean_pool(eg)
        provenance = "mean"
    if config.late:
        query_vec = Tensor(text_encode(query, config.d).reshape(1, config.d))
        tokens = late_fusion_cross_attention(tokens, query_vec, enc.late_fusion)
        provenance = "late_fused"
    return project(tokens, enc.proj, provenance)


@dataclass
class RunReport:
    config: dict
    trajectory: list = field(default_factory=list)      # (step, val metric)
    loss_trajectory: list = field(default_factory=list)
    final_test_metric: float = 0.0
    best_val_metric: float = 0.0
    steps: int = 0
    wall_time_s: float = 0.0
    digest_pre: str = ""
    digest_post: str = ""
    skipped_overflow: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_answer(text: str, lm: TinyDecoderLM) -> str:
    return detokenize(tokenize(text, lm.vocab), lm.vocab)


def evaluate(enc: EncoderParams, examples: list[QAExample], lm: TinyDecoderLM,
             config: RunConfig) -> float:
    """Exact-match accuracy of greedy decoding over a split."""
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        pv = encode_to_prompt(ex.graph, ex.query, enc, config)
        try:
            sp = assemble_prompt(pv, textualize(ex.graph), ex.query, None, lm)
        except PromptOverflowError:
            continue
        pred = greedy_decode(lm, sp, max_len=config.decode_max_len)
        if pred == normalize_answer(ex.answer, lm):
            hits += 1
    return hits / len(examples)


def train(config: RunConfig, data: DatasetSplit, lm: TinyDecoderLM) -> tuple[RunReport, EncoderParams]:
    """Optimize the encoder parameter set against the frozen LM.

    Keeps the best-validation snapshot and reports the test metric of that
    snapshot. Pure function of (config, data, lm, seed): two identical calls
    produce bit-identical loss trajectories.
    """
    if not lm.frozen:
        raise TrainingError("train requires a frozen LM")
    if not data.train:
        raise TrainingError("train requires a nonempty training split")
    if config.d_llm != lm.config.d_llm:
        raise ConfigError(f"config d_llm={config.d_llm} but LM has d_llm={lm.config.d_llm}")
    t_start = time.perf_counter()
    digest_pre = lm.digest()
    rng = np.random.default_rng(config.seed)
    enc = EncoderParams(config, rng)
    params = enc.named()
    opt = AdamW(params, lr=config.lr)
    report = RunReport(config=asdict(config), digest_pre=digest_pre)
    best_val, best_snap = -1.0, None
    inv_b = 1.0 / config.batch_size
    for step in range(config.max_steps):
        # gradients accumulate across the mini-batch; each example's loss is
        # pre-scaled by 1/B so the update uses the batch-mean gradient
        step_loss = 0.0
        for _ in range(config.batch_size):
            ex = data.train[int(rng.integers(len(data.train)))]
            with T.Tape():
                pv = encode_to_prompt(ex.graph, ex.query, enc, config)
                try:
                    sp = assemble_prompt(pv, textualize(ex.graph), ex.query,
                                         ex.answer, lm)
                except PromptOverflowError as exc:
                    log.warning("step %d: skipping %s (%s)", step, ex.example_id, exc)
                    report.skipped_overflow += 1
                    continue
                logits = lm_forward(lm, sp)
                loss = answer_loss(logits, sp)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss at step {step} under config {asdict(config)}")
                T.backward(T.scale(loss, inv_b), params=params.values())
            step_loss += loss_val * inv_b
        report.loss_trajectory.append(step_loss)
        opt.step()
        opt.zero_grad()
        if config.eval_every and (step + 1) % config.eval_every == 0 and data.validation:
            metric = evaluate(enc, data.validation, lm, config)
            report.trajectory.append((step + 1, metric))
            if metric > best_val:
                best_val, best_snap = metric, enc.snapshot()
    if best_snap is not None:
        enc.restore(best_snap)
        report.best_val_metric = best_val
    report.steps = config.max_steps
    report.final_test_metric = evaluate(enc, data.test, lm, config)
    report.digest_post = lm.digest()
    report.wall_time_s = time.perf_counter() - t_start
    if report.digest_post != digest_pre:
        raise TrainingError("frozen LM digest changed during training")
    return report, enc


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def _tiny_fixture(config: RunConfig) -> tuple[QAExample, TinyDecoderLM]:
    graph = TextAttributedGraph(
        nodes=((0, "ash"), (1, "elm"), (2, "oak")),
        edges=((0, 1, "near"), (1, 2, "over")),
    )
    ex = QAExample(example_id="gradcheck-0", query="find the oak",
                   answer="elm", graph=graph)
    texts = [textualize(graph), ex.query, ex.answer]
    from .lm import build_vocab  # deferred: avoid polluting module namespace
    vocab = build_vocab(texts, max_size=16)
    lm_cfg = LmConfig(d_llm=config.d_llm, n_blocks=1, heads=2, d_ff=16,
                      t_max=64, vocab_size=16)
    lm = TinyDecoderLM(lm_cfg, vocab, np.random.default_rng(11))
    lm.freeze()
    return ex, lm


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float
    checked: int
    worst_coord: tuple = ()


def gradient_check_suite(config: RunConfig | None = None, coords_per_group: int = 5,
                         h: float = 1e-5, tol: float = 1e-5,
                         seed: int = 3) -> dict[str, GradCheckResult]:
    """Central finite differences vs analytic gradients for every trainable
    group on a tiny instance (3 nodes, 2 tokens, d=8, V=16)."""
    if config is None:
        config = RunConfig()
    tiny = RunConfig(task=config.task, readout=config.readout, fusion=config.fusion,
                     n_tokens=min(config.n_tokens, 2), lr=config.lr, max_steps=1,
                     eval_every=0, seed=config.seed, d=8, d_llm=8, heads=2,
                     l_query=min(config.l_query, 1), l_graph=min(config.l_graph, 2),
                     l_pool=min(config.l_pool, 1))
    ex, lm = _tiny_fixture(tiny)
    enc = EncoderParams(tiny, np.random.default_rng(seed))
    params = enc.named()

    def loss_value() -> float:
        with T.Tape():
            pv = encode_to_prompt(ex.graph, ex.query, enc, tiny)
            sp = assemble_prompt(pv, textualize(ex.graph), ex.query, ex.answer, lm)
            return float(answer_loss(lm_forward(lm, sp), sp).data)

    with T.Tape():
        pv = encode_to_prompt(ex.graph, ex.query, enc, tiny)
        sp = assemble_prompt(pv, textualize(ex.graph), ex.query, ex.answer, lm)
        loss = answer_loss(lm_forward(lm, sp), sp)
        T.backward(loss, params=params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    results: dict[str, GradCheckResult] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_check = min(coords_per_group, flat.size)
        coords = rng.choice(flat.size, size=n_check, replace=False)
        max_rel, worst = 0.0, ()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_value()
            flat[c] = orig - h
            down = loss_value()
            flat[c] = orig
            fd = (up - down) / (2 * h)
            an = analytic[name].reshape(-1)[c]
            diff = abs(an - fd)
            rel = 0.0 if diff < 1e-8 else diff / max(abs(an), abs(fd), 1e-12)
            if rel > max_rel:
                max_rel, worst = rel, (int(c), float(an), float(fd))
        results[name] = GradCheckResult(passed=max_rel < tol, max_rel_err=max_rel,
                                        checked=n_check, worst_coord=worst)
        p.grad = None
    return results


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass
class ArmResult:
    label: str
    config: dict
    metrics: list = field(default_factory=list)   # final test metric per seed
    reports: list = field(default_factory=list)
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.metrics)) if self.metrics else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.metrics)) if self.metrics else float("nan")

    def to_dict(self) -> dict:
        return {"label": self.label, "config": self.config, "metrics": self.metrics,
                "mean": self.mean, "std": self.std, "error": self.error,
                "reports": [r.to_dict() if isinstance(r, RunReport) else r
                            for r in self.reports]}


def arm_label(config: RunConfig) -> str:
    return f"{config.readout}/{config.fusion}/n={config.n_tokens}"


def ablate(configs: list[RunConfig], data: DatasetSplit, lm: TinyDecoderLM,
           seeds: list[int], jobs: int = 1) -> list[ArmResult]:
    """Run every (config, seed) arm; per-arm failures are captured, not raised."""
    if not configs:
        raise ConfigError("ablate requires at least one config")
    tasks0 = {c.task for c in configs}
    if len(tasks0) != 1:
        raise ConfigError(f"ablation arms must share a task, got {sorted(tasks0)}")

    def run_one(config: RunConfig, seed: int):
        cfg = RunConfig(**{**asdict(config), "seed": seed})
        report, _ = train(cfg, data, lm)
        return report

    arms = [ArmResult(label=arm_label(c), config=asdict(c)) for c in configs]
    jobs = max(1, jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {}
        for ai, config in enumerate(configs):
            for seed in seeds:
                futures[(ai, seed)] = pool.submit(run_one, config, seed)
        for (ai, seed) in sorted(futures):
            try:
                report = futures[(ai, seed)].result()
                arms[ai].metrics.append(report.final_test_metric)
                arms[ai].reports.append(report)
            except Exception as exc:  # propagate per-arm, keep the matrix going
                arms[ai].error = f"seed {seed}: {exc}"
                log.error("arm %s failed: %s", arms[ai].label, exc)
    return arms


def ablation_preset(name: str, base: RunConfig) -> list[RunConfig]:
    """The experiment matrices: fusion/readout ablation (table3), the full
    fusion-by-readout grid (table4), and the token-count sweep (fig4)."""
    def variant(**kw) -> RunConfig:
        return RunConfig(**{**asdict(base), **kw})

    if name == "table3":
        return [variant(readout="mean", fusion="none", n_tokens=1),
                variant(readout="mean", fusion="early", n_tokens=1),
                variant(readout="lgpt", fusion="none"),
                variant(readout="lgpt", fusion="early")]
    if name == "table4":
        return [variant(readout=r, fusion=f, n_tokens=1 if r == "mean" else base.n_tokens)
                for r in READOUTS for f in FUSIONS]
    if name == "fig4":
        return [variant(readout="lgpt", fusion="early", n_tokens=n) for n in (1, 8, 32)]
    raise ConfigError(f"unknown ablation preset {name!r}")


def generate_task_data(task: str, num_examples: int, seed: int, k: int = 4,
                       nodes_per_graph: int = 4, num_attributes: int = 3) -> DatasetSplit:
    if task == "attribute_lookup":
        return gen_attribute_lookup_task(num_examples, nodes_per_graph, num_attributes, seed)
    if task == "multifact":
        return gen_multifact_task(num_examples, k, seed)
    if task == "stance":
        return gen_stance_task(num_examples, seed)
    raise ConfigError(f"unknown task {task!r}")
