"""Compact causal language model over the transformation vocabulary.

Two stacked GRU layers feed a next-token projection; a tanh MLP head reads the
final hidden state to predict the sequence's downstream score. Trained on
``(1 - w) * token_cross_entropy + w * score_mse``.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import CheckpointError, read_container, write_container
from .decoding import Decoded, decoded_from_ids, prefix_ids
from .expr import TransformationSequence, Vocabulary, check_random_state
from .seq2seq import TrainingError, corpus_arrays

log = logging.getLogger(__name__)

MAGIC = b"FFSLM"


@dataclass(frozen=True)
class LMTrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    rng_seed: int = 0
    perf_loss_weight: float = 0.3
    gradient_clip: float = 5.0
    d_e: int = 32
    d_h: int = 64

    def __post_init__(self):
        if not 0.0 <= self.perf_loss_weight <= 1.0:
            raise ValueError("perf_loss_weight must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.d_e < 1 or self.d_h < 1:
            raise ValueError("epochs, batch_size and dims must be positive")


@dataclass
class StudentParams:
    vocab: Vocabulary
    d_e: int
    d_h: int
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict = field(default_factory=dict)

    def copy(self) -> "StudentParams":
        return StudentParams(self.vocab, self.d_e, self.d_h,
                             OrderedDict((k, v.copy()) for k, v in self.tensors.items()), dict(self.config))


def init_params(vocab: Vocabulary, d_e: int = 32, d_h: int = 64, seed=0) -> StudentParams:
    rng = np.random.default_rng(seed)
    V = vocab.size
    t = OrderedDict()
    t["embed"] = rng.normal(0.0, 1.0, size=(V, d_e))
    t.update(nn.gru_params(rng, "l1", d_e, d_h))
    t.update(nn.gru_params(rng, "l2", d_h, d_h))
    t["out_W"] = nn.uniform_init(rng, (d_h, V), d_h)
    t["out_b"] = nn.uniform_init(rng, (V,), d_h)
    t.update(nn.mlp_params(rng, "perf", d_h, d_h))
    return StudentParams(vocab, d_e, d_h, t)


def _forward(p, ids, mask):
    X = p["embed"][ids]
    h0 = np.zeros((ids.shape[1], p["l1_Wh"].shape[0]), dtype=X.dtype)
    h1, c1 = nn.gru_forward(p["l1_Wx"], p["l1_Wh"], p["l1_b"], X, mask, h0)
    h2, c2 = nn.gru_forward(p["l2_Wx"], p["l2_Wh"], p["l2_b"], h1[1:], mask, np.zeros_like(h0))
    return X, h1, c1, h2, c2


def _loss(p, ids, mask, scores, weight, backward):
    X, h1, c1, h2, c2 = _forward(p, ids, mask)
    hidden = h2[1:-1]  # state after inputs 0..T-2 predicts tokens 1..T-1
    logits = hidden @ p["out_W"] + p["out_b"]
    loss_seq, dlogits = nn.masked_cross_entropy(logits, ids[1:], mask[1:])
    final = h2[-1]
    v_hat, a = nn.mlp_forward(p["perf_W1"], p["perf_b1"], p["perf_W2"], p["perf_b2"], final)
    resid = v_hat - scores
    loss_perf = np.mean(resid ** 2)
    loss = (1.0 - weight) * loss_seq + weight * loss_perf
    if not backward:
        return (loss, loss_seq, loss_perf), None

    g = OrderedDict((k, None) for k in p)
    dlogits *= 1.0 - weight
    g["out_W"] = np.einsum("tbh,tbv->hv", hidden, dlogits)
    g["out_b"] = dlogits.sum(axis=(0, 1))
    dh2 = np.zeros_like(h2[1:])
    dh2[:-1] = dlogits @ p["out_W"].T
    ds = weight * 2.0 * resid / len(resid)
    dW1, db1, dW2, db2, dfinal = nn.mlp_backward(p["perf_W1"], p["perf_W2"], final, a, ds)
    dh2[-1] += dfinal
    dWx, dWh, db, dh1, _ = nn.gru_backward(p["l2_Wx"], p["l2_Wh"], h1[1:], mask, h2, c2, dh2)
    g["l2_Wx"], g["l2_Wh"], g["l2_b"] = dWx, dWh, db
    dWx, dWh, db, dX, _ = nn.gru_backward(p["l1_Wx"], p["l1_Wh"], X, mask, h1, c1, dh1)
    g["l1_Wx"], g["l1_Wh"], g["l1_b"] = dWx, dWh, db
    g["embed"] = nn.embedding_grad(p["embed"].shape, ids, dX)
    g["perf_W1"], g["perf_b1"], g["perf_W2"], g["perf_b2"] = dW1, db1, dW2, db2
    return (loss, loss_seq, loss_perf), g


def loss_and_grads(params: StudentParams, ids, mask, scores, weight):
    return _loss(params.tensors, ids, mask, scores, weight, backward=True)


def train_student(corpus, config: LMTrainConfig = LMTrainConfig(), vocab: Vocabulary | None = None):
    """Distil a corpus into the LM. Returns (params, per-epoch log)."""
    vocab = vocab or getattr(corpus, "vocab", None)
    if vocab is None:
        raise ValueError("vocabulary required")
    seqs, scores = corpus_arrays(vocab, corpus)
    if not seqs:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(config.rng_seed)
    params = init_params(vocab, config.d_e, config.d_h, rng)
    params.config = asdict(config)
    opt = nn.Adam(config.learning_rate)
    w = config.perf_loss_weight
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        totals = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            ids, mask = nn.pad_batch([seqs[i] for i in batch])
            losses, grads = loss_and_grads(params, ids, mask, scores[batch], w)
            if not np.isfinite(losses[0]):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {losses}")
            opt.step(params.tensors, nn.clip_grads(grads, config.gradient_clip))
            totals += np.array(losses, dtype=float) * len(batch)
        joint, seq_l, perf_l = totals / len(seqs)
        history.append({"epoch": epoch, "loss_seq": seq_l, "loss_perf": perf_l, "loss_joint": joint})
        if epoch % 50 == 0:
            log.debug("student epoch %d joint=%.4f seq=%.4f perf=%.5f", epoch, joint, seq_l, perf_l)
    return params, history


# --- inference -------------------------------------------------------------------------

def lm_init(params: StudentParams):
    z = np.zeros((1, params.d_h))
    return z, z


def lm_advance(params: StudentParams, state, token_id: int):
    """Feed one token; returns (new_state, next-token distribution)."""
    p = params.tensors
    h1, h2 = state
    x = p["embed"][[token_id]]
    h1, _ = nn.gru_step(p["l1_Wx"], p["l1_Wh"], p["l1_b"], x, h1)
    h2, _ = nn.gru_step(p["l2_Wx"], p["l2_Wh"], p["l2_b"], h1, h2)
    probs = nn.softmax(h2 @ p["out_W"] + p["out_b"])[0]
    return (h1, h2), probs


def next_token_distribution(params: StudentParams, prefix) -> np.ndarray:
    ids = prefix_ids(params.vocab, prefix)
    state = lm_init(params)
    for t in ids:
        state, probs = lm_advance(params, state, t)
    return probs


def predict_performance(params: StudentParams, sequence) -> float:
    if isinstance(sequence, TransformationSequence):
        ids = sequence.wire_ids(params.vocab)
    else:
        ids = prefix_ids(params.vocab, sequence)
    state = lm_init(params)
    for t in ids:
        state, _ = lm_advance(params, state, t)
    p = params.tensors
    v, _ = nn.mlp_forward(p["perf_W1"], p["perf_b1"], p["perf_W2"], p["perf_b2"], state[1])
    return float(v[0])


def sample_token(probs: np.ndarray, sampling: str = "greedy", rng=None, k: int = 5, temperature: float = 1.0) -> int:
    """``greedy``, ``top_k`` or ``temperature`` sampling; temperature 0 is argmax."""
    if sampling == "greedy" or (sampling == "temperature" and temperature == 0):
        return int(np.argmax(probs))
    if sampling == "top_k":
        top = np.argsort(-probs, kind="stable")[:k]
        w = probs[top] / probs[top].sum()
        return int(top[rng.choice(len(top), p=w)])
    if sampling == "temperature":
        logits = np.log(np.maximum(probs, 1e-300)) / temperature
        w = nn.softmax(logits)
        return int(rng.choice(len(w), p=w))
    raise ValueError(f"unknown sampling {sampling!r}")


def generate(params: StudentParams, sampling: str = "greedy", max_len: int = 64, rng_seed=0,
             k: int = 5, temperature: float = 1.0, prefix=None) -> Decoded:
    """Sample from SOS (or from ``prefix``, which then opens the raw stream) until EOS or ``max_len`` tokens."""
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    rng = check_random_state(rng_seed)
    ids = prefix_ids(params.vocab, prefix if prefix is not None else [params.vocab.sos_id])
    state = lm_init(params)
    for t in ids[:-1]:
        state, _ = lm_advance(params, state, t)
    token = ids[-1]
    raw, dists = list(ids[1:]), []
    while len(raw) < max_len:
        state, probs = lm_advance(params, state, token)
        token = sample_token(probs, sampling, rng, k, temperature)
        raw.append(token)
        dists.append(probs)
        if token == params.vocab.eos_id:
            break
    return decoded_from_ids(raw, params.vocab, np.array(dists))


def unique_prefix(ids: list[int], others: list[list[int]]) -> list[int]:
    """Shortest prefix of ``ids`` shared by no other sequence in ``others``."""
    for n in range(1, len(ids) + 1):
        if not any(o[:n] == ids[:n] for o in others if o is not ids):
            return ids[:n]
    return list(ids)


def regeneration_rate(params: StudentParams, sequences, max_len: int = 128) -> float:
    """Fraction of sequences reproduced exactly by greedy completion of their disambiguating prefix."""
    wires = [s.wire_ids(params.vocab) for s in sequences]
    hits = 0
    for w in wires:
        pre = unique_prefix(w, wires)
        out = generate(params, "greedy", max(max_len, len(w)), prefix=pre)
        hits += list(out.raw_ids) == w[1:]
    return hits / len(wires)


def gradient_check(params: StudentParams, corpus_sample, epsilon: float = 1e-5, weight: float = 0.3,
                   n_coords: int = 50, seed: int = 0) -> float:
    seqs, scores = corpus_arrays(params.vocab, corpus_sample)
    ids, mask = nn.pad_batch(seqs)
    _, grads = loss_and_grads(params, ids, mask, scores, weight)

    def loss_fn(tensors):
        return _loss(tensors, ids, mask, scores, weight, backward=False)[0][0]

    worst, _ = nn.check_gradients(loss_fn, params.tensors, grads, epsilon, n_coords, seed)
    return worst


def checkpoint_save(params: StudentParams, path) -> None:
    header = {
        "kind": "studentlm",
        "dims": {"d_e": params.d_e, "d_h": params.d_h, "vocab_size": params.vocab.size, "layers": 2},
        "fingerprint": params.vocab.fingerprint,
        "vocabulary": params.vocab.to_dict(),
        "config": params.config,
    }
    write_container(path, MAGIC, header, params.tensors)


def checkpoint_load(path, vocab: Vocabulary | None = None) -> StudentParams:
    header, tensors = read_container(path, MAGIC)
    file_vocab = Vocabulary.from_dict(header["vocabulary"])
    if file_vocab.fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint inconsistent with stored vocabulary")
    if vocab is not None and vocab.fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: vocabulary fingerprint {header['fingerprint']} != {vocab.fingerprint}")
    dims = header["dims"]
    return StudentParams(file_vocab, dims["d_e"], dims["d_h"], tensors, header.get("config", {}))
