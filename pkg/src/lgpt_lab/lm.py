"""Tokenizer, tiny decoder-only LM, soft-prompt assembly, answer loss and
greedy decoding.

The LM is a pre-normed causal transformer with learned positions and a
weight-tied output head. After pretraining on task-vocabulary text it is
frozen; a content digest of all weights certifies that no training run
ever touches it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import AdamW, Tensor

PAD, BOS, EOS, UNK, ANSWER_SEP = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"]

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\sa-z0-9_]")

_CHECKPOINT_MAGIC = b"LGPTLM01"


class LmError(ValueError):
    """Contract violation in LM construction or prompt assembly."""


class PromptOverflowError(LmError):
    """Assembled prompt exceeds the model's maximum sequence length."""


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    def __len__(self):
        return len(self.id_to_token)


def build_vocab(texts, max_size: int = 256) -> Vocab:
    counts = Counter()
    for text in texts:
        counts.update(_TOKEN_RE.findall(text.lower()))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[: max_size - len(RESERVED)]
    id_to_token = RESERVED + sorted(ranked)
    return Vocab(token_to_id={t: i for i, t in enumerate(id_to_token)},
                 id_to_token=id_to_token)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.token_to_id.get(tok, UNK) for tok in _TOKEN_RE.findall(text.lower())]


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids if i >= len(RESERVED))


@dataclass
class LmConfig:
    d_llm: int = 64
    n_blocks: int = 2
    heads: int = 4
    d_ff: int = 128
    t_max: int = 256
    vocab_size: int = 256


class TinyDecoderLM:
    """Frozen-able decoder-only LM; output head tied to the embedding table."""

    def __init__(self, config: LmConfig, vocab: Vocab, rng: np.random.Generator):
        if config.d_llm % config.heads != 0:
            raise LmError(f"d_llm {config.d_llm} not divisible by {config.heads} heads")
        self.config = config
        self.vocab = vocab
        self.frozen = False
        d, dh = config.d_llm, config.d_llm // config.heads
        p: dict[str, Tensor] = {}
        p["we"] = Tensor(rng.normal(size=(len(vocab), d)) * 0.05, requires_grad=True)
        p["pos"] = Tensor(rng.normal(size=(config.t_max, d)) * 0.05, requires_grad=True)
        for b in range(config.n_blocks):
            for h in range(config.heads):
                p[f"block{b}.wq{h}"] = T.uniform_init(rng, d, dh, fan_in=d)
                p[f"block{b}.wk{h}"] = T.uniform_init(rng, d, dh, fan_in=d)
                p[f"block{b}.wv{h}"] = T.uniform_init(rng, d, dh, fan_in=d)
            p[f"block{b}.w_out"] = T.uniform_init(rng, d, d, fan_in=d)
            p[f"block{b}.ln1_gain"] = Tensor(np.ones(d), requires_grad=True)
            p[f"block{b}.ln1_bias"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"block{b}.ln2_gain"] = Tensor(np.ones(d), requires_grad=True)
            p[f"block{b}.ln2_bias"] = Tensor(np.zeros(d), requires_grad=True)
            p[f"block{b}.ffn_w1"] = T.uniform_init(rng, d, config.d_ff, fan_in=d)
            p[f"block{b}.ffn_b1"] = Tensor(np.zeros(config.d_ff), requires_grad=True)
            p[f"block{b}.ffn_w2"] = T.uniform_init(rng, config.d_ff, d, fan_in=config.d_ff)
            p[f"block{b}.ffn_b2"] = Tensor(np.zeros(d), requires_grad=True)
        p["lnf_gain"] = Tensor(np.ones(d), requires_grad=True)
        p["lnf_bias"] = Tensor(np.zeros(d), requires_grad=True)
        self.params = p
        self._mask_cache: dict[int, Tensor] = {}

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.params:
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def _causal_mask(self, t: int) -> Tensor:
        if t not in self._mask_cache:
            mask = np.triu(np.full((t, t), -1e30), k=1)
            self._mask_cache[t] = Tensor(mask)
        return self._mask_cache[t]


def forward_rows(lm: TinyDecoderLM, rows: Tensor) -> Tensor:
    """Causal decoder over a (t, d_llm) embedding matrix; returns (t, V) logits."""
    cfg = lm.config
    t = rows.data.shape[0]
    if t > cfg.t_max:
        raise LmError(f"sequence length {t} exceeds t_max {cfg.t_max}")
    p = lm.params
    dh = cfg.d_llm // cfg.heads
    x = T.add(rows, T.gather_rows(p["pos"], np.arange(t, dtype=np.intp)))
    mask = lm._causal_mask(t)
    for b in range(cfg.n_blocks):
        xn = T.layer_norm(x, p[f"block{b}.ln1_gain"], p[f"block{b}.ln1_bias"])
        head_out = []
        for h in range(cfg.heads):
            q = T.matmul(xn, p[f"block{b}.wq{h}"])
            k = T.matmul(xn, p[f"block{b}.wk{h}"])
            v = T.matmul(xn, p[f"block{b}.wv{h}"])
            scores = T.add(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)), mask)
            alpha = T.softmax_rows(scores)
            head_out.append(T.matmul(alpha, v))
        attn = T.matmul(T.concat_cols(head_out), p[f"block{b}.w_out"])
        x = T.add(x, attn)
        xn = T.layer_norm(x, p[f"block{b}.ln2_gain"], p[f"block{b}.ln2_bias"])
        hdn = T.tanh(T.add_bias(T.matmul(xn, p[f"block{b}.ffn_w1"]), p[f"block{b}.ffn_b1"]))
        ffn = T.add_bias(T.matmul(hdn, p[f"block{b}.ffn_w2"]), p[f"block{b}.ffn_b2"])
        x = T.add(x, ffn)
    x = T.layer_norm(x, p["lnf_gain"], p["lnf_bias"])
    return T.matmul(x, T.transpose(p["we"]))  # tied output head


# ---------------------------------------------------------------------------
# Soft prompt assembly and losses
# ---------------------------------------------------------------------------

@dataclass
class SoftPrompt:
    """Embedding rows [E_S; E_text; WE(q)] (+ separator and WE(a) in training).

    token_ids holds the discrete token per row, -1 for soft rows. answer_mask
    is 1 exactly on the answer token rows.
    """

    embedding: Tensor
    token_ids: np.ndarray
    answer_mask: np.ndarray
    spans: dict = field(default_factory=dict)
    sep_index: int | None = None


def assemble_prompt(prompt_vectors, graph_text: str, query: str,
                    answer: str | None, lm: TinyDecoderLM) -> SoftPrompt:
    pv = prompt_vectors.matrix
    if pv.data.shape[1] != lm.config.d_llm:
        raise LmError(f"prompt vectors have dim {pv.data.shape[1]}, "
                      f"LM expects {lm.config.d_llm}")
    we = lm.params["we"]
    text_ids = tokenize(graph_text, lm.vocab)
    query_ids = tokenize(query, lm.vocab)
    n = pv.data.shape[0]
    parts = [pv,
             T.gather_rows(we, text_ids),
             T.gather_rows(we, query_ids)]
    ids = [-1] * n + text_ids + query_ids
    spans = {"graph": (0, n),
             "text": (n, n + len(text_ids)),
             "query": (n + len(text_ids), n + len(text_ids) + len(query_ids)),
             "answer": None}
    sep_index = None
    if answer is not None:
        answer_ids = tokenize(answer, lm.vocab)
        sep_index = len(ids)
        parts.append(T.gather_rows(we, [ANSWER_SEP] + answer_ids))
        ids += [ANSWER_SEP] + answer_ids
        spans["answer"] = (sep_index + 1, sep_index + 1 + len(answer_ids))
    total = len(ids)
    if total > lm.config.t_max:
        raise PromptOverflowError(
            f"prompt of {total} rows exceeds t_max {lm.config.t_max} "
            f"(graph={n}, text={len(text_ids)}, query={len(query_ids)}, "
            f"answer={spans['answer']})")
    answer_mask = np.zeros(total)
    if spans["answer"] is not None:
        answer_mask[spans["answer"][0]:spans["answer"][1]] = 1.0
    return SoftPrompt(embedding=T.concat_rows(parts), token_ids=np.asarray(ids),
                      answer_mask=answer_mask, spans=spans, sep_index=sep_index)


def lm_forward(lm: TinyDecoderLM, sp: SoftPrompt) -> Tensor:
    return forward_rows(lm, sp.embedding)


def answer_loss(logits: Tensor, sp: SoftPrompt) -> Tensor:
    """Teacher-forced NLL of the answer tokens (and the closing EOS).

    Position t predicts the token at t+1, so the loss mask covers the
    separator through the last answer row; the last answer row's target
    is EOS.
    """
    if sp.spans.get("answer") is None or sp.sep_index is None:
        raise LmError("answer_loss requires a training-mode prompt with an answer span")
    t_len = len(sp.token_ids)
    targets = np.zeros(t_len, dtype=np.intp)
    targets[:-1] = np.where(sp.token_ids[1:] >= 0, sp.token_ids[1:], 0)
    targets[-1] = EOS
    mask = np.zeros(t_len)
    mask[sp.sep_index:] = 1.0
    return T.cross_entropy_masked(logits, targets, mask)


def greedy_decode(lm: TinyDecoderLM, sp: SoftPrompt, max_len: int = 8) -> str:
    """Deterministic argmax continuation after the answer separator."""
    we = lm.params["we"].data
    rows = np.concatenate([sp.embedding.data, we[ANSWER_SEP:ANSWER_SEP + 1]], axis=0)
    out_ids: list[int] = []
    for _ in range(max_len):
        if rows.shape[0] >= lm.config.t_max:
            break
        logits = forward_rows(lm, Tensor(rows))
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        out_ids.append(nxt)
        rows = np.concatenate([rows, we[nxt:nxt + 1]], axis=0)
    return detokenize(out_ids, lm.vocab)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

# prefix-block widths sampled during pretraining so the frozen LM tolerates
# any soft-prompt length later plugged into the same slot
HINT_WIDTHS = (1, 2, 4, 8, 12, 16, 24, 32)


def sequence_loss(lm: TinyDecoderLM, ids: list[int], copy_weight: float = 0.0,
                  prefix_noise: np.ndarray | None = None) -> Tensor:
    """Next-token NLL over a discrete sequence; the last target is EOS.

    With copy_weight > 0 the positions from the answer separator onward get
    an extra weighted loss term; the copy region is a tiny fraction of each
    sequence and would otherwise be drowned out by the body text.

    ``prefix_noise`` (w x d_llm) is added to the first w embedding rows;
    pretraining uses it so the copy skill tolerates continuous prompt
    vectors that sit off the discrete embedding manifold.
    """
    rows = T.gather_rows(lm.params["we"], ids)
    if prefix_noise is not None:
        pad = np.zeros((len(ids) - prefix_noise.shape[0], prefix_noise.shape[1]))
        rows = T.add(rows, Tensor(np.concatenate([prefix_noise, pad], axis=0)))
    logits = forward_rows(lm, rows)
    t_len = len(ids)
    targets = np.zeros(t_len, dtype=np.intp)
    targets[:-1] = ids[1:]
    targets[-1] = EOS
    mask = np.ones(t_len)
    loss = T.cross_entropy_masked(logits, targets, mask)
    if copy_weight > 0 and ANSWER_SEP in ids:
        copy_mask = np.zeros(t_len)
        copy_mask[ids.index(ANSWER_SEP):] = 1.0
        loss = T.add(loss, T.scale(
            T.cross_entropy_masked(logits, targets, copy_mask), copy_weight))
    return loss


def corpus_perplexity(lm: TinyDecoderLM, sequences: list[list[int]]) -> float:
    total, count = 0.0, 0
    for ids in sequences:
        loss = sequence_loss(lm, ids)
        total += float(loss.data) * len(ids)
        count += len(ids)
    return math.exp(total / max(count, 1))


def _copy_sequence(body_ids: list[int], hint_ids: list[int], width: int,
                   t_max: int) -> list[int]:
    """Prefix block of the hint tiled to ``width``, body, separator, hint.

    The prefix block occupies the positions where soft prompt vectors will
    sit after pretraining; repeating the hint after the separator teaches
    the model to copy whatever the prefix block carries. Tiling (rather
    than padding) means every prefix position is informative, so the model
    can read the hint redundantly from any subset of prompt rows.
    """
    reps = -(-width // len(hint_ids))
    prefix = (hint_ids * reps)[:width]
    ids = prefix + body_ids + [ANSWER_SEP] + hint_ids
    return ids[:t_max]


def _pretrain_sequences(entries, vocab: Vocab, config: LmConfig,
                        rng: np.random.Generator, answer_pool: list[str]):
    """Yield (ids, prefix_width) pairs; width 0 marks plain text entries."""
    seqs = []
    for entry in entries:
        if isinstance(entry, str):
            ids = tokenize(entry, vocab)[: config.t_max]
            if ids:
                seqs.append((ids, 0))
            continue
        body, answer = entry
        # half true answers, half random ones: the copy skill must not
        # depend on the body actually determining the hint
        if answer_pool and rng.random() < 0.5:
            hint_text = str(answer_pool[int(rng.integers(len(answer_pool)))])
        else:
            hint_text = answer
        hint_ids = tokenize(hint_text, vocab)
        widths = [w for w in HINT_WIDTHS if w >= len(hint_ids)] or [len(hint_ids)]
        width = int(widths[int(rng.integers(len(widths)))])
        seqs.append((_copy_sequence(tokenize(body, vocab), hint_ids, width,
                                    config.t_max), width))
    return seqs


def pretrain_lm(corpus, config: LmConfig, seed: int,
                max_steps: int = 15000, lr: float = 3e-3,
                eval_every: int = 1000, patience: int = 8,
                copy_weight: float = 4.0) -> TinyDecoderLM:
    """Train next-token prediction on task-vocabulary text, then freeze.

    ``corpus`` entries are either plain strings (ordinary language modeling)
    or (body, answer) pairs, which are laid out in the copy format of
    ``_copy_sequence``. Stops when held-out perplexity stops improving or
    the step budget runs out; returns the model frozen.
    """
    corpus = list(corpus)
    if not corpus:
        raise LmError("pretrain_lm requires a nonempty corpus")
    texts = []
    answer_pool = []
    for entry in corpus:
        if isinstance(entry, str):
            texts.append(entry)
        else:
            texts.extend(entry)
            answer_pool.append(entry[1])
    answer_pool = sorted(set(answer_pool))
    vocab = build_vocab(texts, config.vocab_size)
    rng = np.random.default_rng(seed)
    lm = TinyDecoderLM(config, vocab, rng)

    n_held = max(1, len(corpus) // 10)
    held_rng = np.random.default_rng(seed + 1)
    heldout = [ids for ids, _ in _pretrain_sequences(corpus[:n_held], vocab,
                                                     config, held_rng, answer_pool)]
    train_entries = corpus[n_held:] or corpus
    opt = AdamW(lm.params, lr=lr)
    noise_sigmas = (0.0, 0.1, 0.2, 0.4)
    best_ppl, stale = float("inf"), 0
    for step in range(max_steps):
        entry = train_entries[int(rng.integers(len(train_entries)))]
        seqs = _pretrain_sequences([entry], vocab, config, rng, answer_pool)
        if not seqs:
            continue
        ids, width = seqs[0]
        noise = None
        if width:
            sigma = noise_sigmas[int(rng.integers(len(noise_sigmas)))]
            if sigma:
                noise = sigma * rng.standard_normal((width, config.d_llm))
        with T.Tape():
            loss = sequence_loss(lm, ids, copy_weight=copy_weight,
                                 prefix_noise=noise)
            T.backward(loss)
        opt.step()
        opt.zero_grad()
        if (step + 1) % eval_every == 0:
            ppl = corpus_perplexity(lm, heldout[:50])
            if ppl < best_ppl - 1e-3:
                best_ppl, stale = ppl, 0
            else:
                stale += 1
                if stale >= patience:
                    break
    lm.freeze()
    return lm


# ---------------------------------------------------------------------------
# Checkpoint I/O: JSON header + raw little-endian float64 blobs
# ---------------------------------------------------------------------------

def save_lm(lm: TinyDecoderLM, path) -> None:
    header = {
        "d_llm": lm.config.d_llm,
        "n_blocks": lm.config.n_blocks,
        "heads": lm.config.heads,
        "d_ff": lm.config.d_ff,
        "t_max": lm.config.t_max,
        "vocab_size": lm.config.vocab_size,
        "vocab": lm.vocab.token_to_id,
        "digest": lm.digest(),
        "param_names": list(lm.params),
        "param_shapes": {name: list(p.data.shape) for name, p in lm.params.items()},
    }
    blob = json.dumps(header).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in lm.params:
                fh.write(lm.params[name].data.astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_lm(path) -> TinyDecoderLM:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise LmError(f"{path}: not an LM checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = LmConfig(d_llm=header["d_llm"], n_blocks=header["n_blocks"],
                          heads=header["heads"], d_ff=header["d_ff"],
                          t_max=header["t_max"], vocab_size=header["vocab_size"])
        token_to_id = {t: int(i) for t, i in header["vocab"].items()}
        id_to_token = [None] * len(token_to_id)
        for t, i in token_to_id.items():
            id_to_token[i] = t
        vocab = Vocab(token_to_id=token_to_id, id_to_token=id_to_token)
        lm = TinyDecoderLM(config, vocab, np.random.default_rng(0))
        for name in header["param_names"]:
            shape = tuple(header["param_shapes"][name])
            size = int(np.prod(shape)) if shape else 1
            raw = fh.read(size * 8)
            if len(raw) != size * 8:
                raise LmError(f"{path}: truncated checkpoint (parameter {name})")
            lm.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    lm.freeze()
    if lm.digest() != header["digest"]:
        raise LmError(f"{path}: weight digest mismatch (corrupt checkpoint)")
    return lm
