"""Encoder-evaluator-decoder over transformation sequences.

Bidirectional GRU encoder -> latent ``z`` (forward and backward final states),
a tanh MLP evaluator ``z -> score`` and an LSTM decoder whose initial state is
a learned projection of ``z``. Trained jointly on
``alpha * token_cross_entropy + (1 - alpha) * score_mse``.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import CheckpointError, read_container, write_container
from .expr import Token, TransformationSequence, Vocabulary
from .decoding import Decoded, decoded_from_ids, prefix_ids

log = logging.getLogger(__name__)

MAGIC = b"FFSQ2"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.8
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    rng_seed: int = 0
    gradient_clip: float = 5.0
    d_e: int = 32
    d_h: int = 64

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.d_e < 1 or self.d_h < 1:
            raise ValueError("epochs, batch_size and dims must be positive")


@dataclass
class Seq2SeqParams:
    vocab: Vocabulary
    d_e: int
    d_h: int
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict = field(default_factory=dict)

    @property
    def d_z(self) -> int:
        return 2 * self.d_h

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "Seq2SeqParams":
        return Seq2SeqParams(self.vocab, self.d_e, self.d_h,
                             OrderedDict((k, v.copy()) for k, v in self.tensors.items()), dict(self.config))

    # evaluator protocol used by the latent search
    def estimate(self, z) -> float:
        return estimate(self, z)

    def grad_score(self, z) -> np.ndarray:
        return grad_score(self, z)


def init_params(vocab: Vocabulary, d_e: int = 32, d_h: int = 64, seed=0) -> Seq2SeqParams:
    rng = np.random.default_rng(seed)
    V, d_z = vocab.size, 2 * d_h
    t = OrderedDict()
    t["embed"] = rng.normal(0.0, 1.0, size=(V, d_e))
    t.update(nn.gru_params(rng, "enc_f", d_e, d_h))
    t.update(nn.gru_params(rng, "enc_b", d_e, d_h))
    t.update(nn.mlp_params(rng, "eval", d_z, d_h))
    t["dec_Wzh"] = nn.uniform_init(rng, (d_z, d_h), d_z)
    t["dec_bzh"] = nn.uniform_init(rng, (d_h,), d_z)
    t["dec_Wzc"] = nn.uniform_init(rng, (d_z, d_h), d_z)
    t["dec_bzc"] = nn.uniform_init(rng, (d_h,), d_z)
    t.update(nn.lstm_params(rng, "dec", d_e, d_h))
    t["out_W"] = nn.uniform_init(rng, (d_h, V), d_h)
    t["out_b"] = nn.uniform_init(rng, (V,), d_h)
    return Seq2SeqParams(vocab, d_e, d_h, t)


# --- encoder / evaluator --------------------------------------------------------------

def _encode_batch(p, ids, mask):
    X = p["embed"][ids]
    h0 = np.zeros((ids.shape[1], p["enc_f_Wh"].shape[0]), dtype=X.dtype)
    hf, cf = nn.gru_forward(p["enc_f_Wx"], p["enc_f_Wh"], p["enc_f_b"], X, mask, h0)
    Xr, mr = X[::-1], mask[::-1]
    hb, cb = nn.gru_forward(p["enc_b_Wx"], p["enc_b_Wh"], p["enc_b_b"], Xr, mr, np.zeros_like(hf[0]))
    z = np.concatenate([hf[-1], hb[-1]], axis=1)
    return z, (X, Xr, mr, hf, cf, hb, cb)


def _as_ids(params: Seq2SeqParams, sequence) -> list[int]:
    if isinstance(sequence, TransformationSequence):
        return sequence.wire_ids(params.vocab)
    ids = [params.vocab.id(t) if isinstance(t, Token) else int(t) for t in sequence]
    for i in ids:
        if not 0 <= i < params.vocab.size:
            raise KeyError(f"token id {i} out of vocabulary")
    return ids


def encode(params: Seq2SeqParams, sequence) -> np.ndarray:
    """Latent vector for a sequence (TransformationSequence or wire-form ids)."""
    ids, mask = nn.pad_batch([_as_ids(params, sequence)])
    z, _ = _encode_batch(params.tensors, ids, mask)
    return z[0]


def encode_many(params: Seq2SeqParams, sequences) -> np.ndarray:
    ids, mask = nn.pad_batch([_as_ids(params, s) for s in sequences])
    z, _ = _encode_batch(params.tensors, ids, mask)
    return z


def _check_z(params, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.d_z:
        raise ValueError(f"latent dimension {z.shape[-1]} != {params.d_z}")
    return z


def estimate(params: Seq2SeqParams, z) -> float:
    z = _check_z(params, z)
    p = params.tensors
    s, _ = nn.mlp_forward(p["eval_W1"], p["eval_b1"], p["eval_W2"], p["eval_b2"], z.reshape(1, -1))
    return float(s[0])


def grad_score(params: Seq2SeqParams, z) -> np.ndarray:
    """Gradient of the evaluator output with respect to ``z``."""
    z = _check_z(params, z).reshape(1, -1)
    p = params.tensors
    _, a = nn.mlp_forward(p["eval_W1"], p["eval_b1"], p["eval_W2"], p["eval_b2"], z)
    *_, dz = nn.mlp_backward(p["eval_W1"], p["eval_W2"], z, a, np.ones(1))
    return dz[0]


# --- decoder -------------------------------------------------------------------------

def decoder_init(params: Seq2SeqParams, z):
    z = _check_z(params, z).reshape(1, -1)
    p = params.tensors
    h = np.tanh(z @ p["dec_Wzh"] + p["dec_bzh"])
    c = z @ p["dec_Wzc"] + p["dec_bzc"]
    return h, c


def decoder_advance(params: Seq2SeqParams, state, token_id: int):
    """Feed one token; returns (new_state, next-token distribution)."""
    p = params.tensors
    h, c = state
    x = p["embed"][[token_id]]
    h, c, _ = nn.lstm_step(p["dec_Wx"], p["dec_Wh"], p["dec_b"], x, h, c)
    probs = nn.softmax(h @ p["out_W"] + p["out_b"])[0]
    return (h, c), probs


def decode_step(params: Seq2SeqParams, z, prefix) -> np.ndarray:
    """Next-token distribution after ``prefix`` (must start with SOS)."""
    ids = prefix_ids(params.vocab, prefix)
    state = decoder_init(params, z)
    for t in ids:
        state, probs = decoder_advance(params, state, t)
    return probs


def decode_greedy(params: Seq2SeqParams, z, max_len: int = 64) -> Decoded:
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    state = decoder_init(params, z)
    token = params.vocab.sos_id
    raw, dists = [], []
    for _ in range(max_len):
        state, probs = decoder_advance(params, state, token)
        token = int(np.argmax(probs))
        raw.append(token)
        dists.append(probs)
        if token == params.vocab.eos_id:
            break
    return decoded_from_ids(raw, params.vocab, np.array(dists))


# --- joint loss ------------------------------------------------------------------------

def joint_loss(params: Seq2SeqParams, ids, mask, scores, alpha):
    return _joint(params.tensors, ids, mask, scores, alpha, backward=False)[0]


def loss_and_grads(params: Seq2SeqParams, ids, mask, scores, alpha):
    """Returns ((joint, rec, est), grads)."""
    return _joint(params.tensors, ids, mask, scores, alpha, backward=True)


def _joint(p, ids, mask, scores, alpha, backward):
    z, enc = _encode_batch(p, ids, mask)
    s_hat, a_eval = nn.mlp_forward(p["eval_W1"], p["eval_b1"], p["eval_W2"], p["eval_b2"], z)
    resid = s_hat - scores
    loss_est = np.mean(resid ** 2)

    h0 = np.tanh(z @ p["dec_Wzh"] + p["dec_bzh"])
    c0 = z @ p["dec_Wzc"] + p["dec_bzc"]
    in_ids, targets, tmask = ids[:-1], ids[1:], mask[1:]
    Xd = p["embed"][in_ids]
    hs, cs, lcache = nn.lstm_forward(p["dec_Wx"], p["dec_Wh"], p["dec_b"], Xd, h0, c0)
    logits = hs[1:] @ p["out_W"] + p["out_b"]
    loss_rec, dlogits = nn.masked_cross_entropy(logits, targets, tmask)
    loss = alpha * loss_rec + (1.0 - alpha) * loss_est
    if not backward:
        return (loss, loss_rec, loss_est), None

    g = OrderedDict((k, None) for k in p)
    dlogits *= alpha
    g["out_W"] = np.einsum("tbh,tbv->hv", hs[1:], dlogits)
    g["out_b"] = dlogits.sum(axis=(0, 1))
    dhs = dlogits @ p["out_W"].T
    dWx, dWh, db, dXd, dh0, dc0 = nn.lstm_backward(p["dec_Wx"], p["dec_Wh"], Xd, hs, cs, lcache, dhs)
    g["dec_Wx"], g["dec_Wh"], g["dec_b"] = dWx, dWh, db
    d_embed = nn.embedding_grad(p["embed"].shape, in_ids, dXd)

    dpre_h = dh0 * (1.0 - h0 * h0)
    g["dec_Wzh"] = z.T @ dpre_h
    g["dec_bzh"] = dpre_h.sum(axis=0)
    g["dec_Wzc"] = z.T @ dc0
    g["dec_bzc"] = dc0.sum(axis=0)
    dz = dpre_h @ p["dec_Wzh"].T + dc0 @ p["dec_Wzc"].T

    ds = (1.0 - alpha) * 2.0 * resid / len(resid)
    dW1, db1, dW2, db2, dz_eval = nn.mlp_backward(p["eval_W1"], p["eval_W2"], z, a_eval, ds)
    g["eval_W1"], g["eval_b1"], g["eval_W2"], g["eval_b2"] = dW1, db1, dW2, db2
    dz = dz + dz_eval

    X, Xr, mr, hf, cf, hb, cb = enc
    H = hf.shape[2]
    dhf = np.zeros_like(hf[1:])
    dhf[-1] = dz[:, :H]
    dWx, dWh, db, dXf, _ = nn.gru_backward(p["enc_f_Wx"], p["enc_f_Wh"], X, mask, hf, cf, dhf)
    g["enc_f_Wx"], g["enc_f_Wh"], g["enc_f_b"] = dWx, dWh, db
    dhb = np.zeros_like(hb[1:])
    dhb[-1] = dz[:, H:]
    dWx, dWh, db, dXr, _ = nn.gru_backward(p["enc_b_Wx"], p["enc_b_Wh"], Xr, mr, hb, cb, dhb)
    g["enc_b_Wx"], g["enc_b_Wh"], g["enc_b_b"] = dWx, dWh, db
    d_embed += nn.embedding_grad(p["embed"].shape, ids, dXf + dXr[::-1])
    g["embed"] = d_embed
    return (loss, loss_rec, loss_est), g


# --- training ------------------------------------------------------------------------

def corpus_arrays(params_or_vocab, corpus):
    """Wire-form id lists and scores from a GoldenCorpus or (sequence, score) pairs."""
    vocab = params_or_vocab.vocab if hasattr(params_or_vocab, "vocab") else params_or_vocab
    pairs = [(e.sequence, e.score) for e in corpus.examples] if hasattr(corpus, "examples") else list(corpus)
    return [s.wire_ids(vocab) for s, _ in pairs], np.array([float(v) for _, v in pairs])


def train_joint(corpus, config: TrainConfig = TrainConfig(), params: Seq2SeqParams | None = None, vocab: Vocabulary | None = None):
    """Mini-batch Adam on the joint loss. Returns (params, per-epoch log)."""
    vocab = vocab or getattr(corpus, "vocab", None) or (params.vocab if params else None)
    if vocab is None:
        raise ValueError("vocabulary required")
    if getattr(corpus, "vocab", vocab).fingerprint != vocab.fingerprint:
        raise ValueError("corpus vocabulary fingerprint mismatch")
    seqs, scores = corpus_arrays(vocab, corpus)
    if not seqs:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(config.rng_seed)
    if params is None:
        params = init_params(vocab, config.d_e, config.d_h, rng)
    else:
        params = params.copy()
    params.config = asdict(config)
    opt = nn.Adam(config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        totals = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            ids, mask = nn.pad_batch([seqs[i] for i in batch])
            losses, grads = loss_and_grads(params, ids, mask, scores[batch], config.alpha)
            if not np.isfinite(losses[0]):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {losses}")
            opt.step(params.tensors, nn.clip_grads(grads, config.gradient_clip))
            totals += np.array(losses) * len(batch)
        joint, rec, est = totals / len(seqs)
        history.append({"epoch": epoch, "loss_rec": rec, "loss_est": est, "loss_joint": joint})
        if epoch % 50 == 0:
            log.debug("seq2seq epoch %d joint=%.4f rec=%.4f est=%.5f", epoch, joint, rec, est)
    return params, history


def reconstruction_accuracy(params: Seq2SeqParams, sequences: Sequence[TransformationSequence], max_len: int = 128) -> float:
    """Token-level accuracy of greedy decode(encode(s)) against s's wire form (after SOS)."""
    hit = total = 0
    for s in sequences:
        target = s.wire_ids(params.vocab)[1:]
        out = decode_greedy(params, encode(params, s), max(max_len, len(target) + 1)).raw_ids
        total += len(target)
        hit += sum(1 for a, b in zip(out, target) if a == b)
    return hit / total


def gradient_check(params: Seq2SeqParams, corpus_sample, epsilon: float = 1e-5, alpha: float = 0.8,
                   n_coords: int = 50, seed: int = 0):
    """Max relative error between analytic and central-difference gradients of the joint loss."""
    seqs, scores = corpus_arrays(params, corpus_sample)
    ids, mask = nn.pad_batch(seqs)
    _, grads = loss_and_grads(params, ids, mask, scores, alpha)

    def loss_fn(tensors):
        return _joint(tensors, ids, mask, scores, alpha, backward=False)[0][0]

    worst, _ = nn.check_gradients(loss_fn, params.tensors, grads, epsilon, n_coords, seed)
    return worst


# --- persistence -------------------------------------------------------------------------

def checkpoint_save(params: Seq2SeqParams, path) -> None:
    header = {
        "kind": "seq2seq",
        "dims": {"d_e": params.d_e, "d_h": params.d_h, "d_z": params.d_z, "vocab_size": params.vocab.size},
        "fingerprint": params.vocab.fingerprint,
        "vocabulary": params.vocab.to_dict(),
        "config": params.config,
    }
    write_container(path, MAGIC, header, params.tensors)


def checkpoint_load(path, vocab: Vocabulary | None = None) -> Seq2SeqParams:
    header, tensors = read_container(path, MAGIC)
    file_vocab = Vocabulary.from_dict(header["vocabulary"])
    if file_vocab.fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint inconsistent with stored vocabulary")
    if vocab is not None and vocab.fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: vocabulary fingerprint {header['fingerprint']} != {vocab.fingerprint}")
    dims = header["dims"]
    return Seq2SeqParams(file_vocab, dims["d_e"], dims["d_h"], tensors, header.get("config", {}))
