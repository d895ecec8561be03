"""
Prediction and Joint Networks
-----------------------------
The shared predictor comes in two flavours:

- LstmPredictor: an embedding followed by stacked LSTM layers and an output
  projection. Row u of its output summarises the blank start symbol and the
  first u labels.
- TarPredictor (tied and reduced): each row is a multi-head weighted average
  of the last N label embeddings, each offset by a per-slot position vector,
  then projected, layer normalised and passed through swish. The embedding
  matrix may be shared with the joint network's output layer.

The joint network combines an encoder row and a predictor row additively,
applies tanh, and maps to vocabulary logits.

Both predictors expose predict() for whole prefixes and initial_state() /
step() for incremental decoding; the two paths produce the same rows.
"""

import logging

import numpy as np

from core import tensor as T
from core.errors import UsageError
from core.layers import LayerNorm, Linear, init_weight, layer_norm_params, linear_params

logger = logging.getLogger(__name__)

BLANK_ID = 0


def _check_labels(labels, vocab_size):
    labels = tuple(int(k) for k in labels)
    for k in labels:
        if not 1 <= k < vocab_size:
            raise UsageError(f"Label {k} outside [1, {vocab_size - 1}]")
    return labels


class LstmLayer(T.Module):
    def __init__(self, rng, in_dim, hidden_dim, dtype):
        self.hidden_dim = hidden_dim
        self.w_ih = T.Parameter(init_weight(rng.child("w_ih"), in_dim, 4 * hidden_dim, dtype), name="w_ih")
        self.w_hh = T.Parameter(init_weight(rng.child("w_hh"), hidden_dim, 4 * hidden_dim, dtype), name="w_hh")
        self.bias = T.Parameter(np.zeros(4 * hidden_dim, dtype=dtype), name="bias")

    def cell(self, x, h, c):
        """One step. Gates are ordered input, forget, candidate, output."""
        H = self.hidden_dim
        gates = T.matmul(x, self.w_ih) + T.matmul(h, self.w_hh) + self.bias
        i = T.sigmoid(gates[0:H])
        f = T.sigmoid(gates[H:2 * H])
        g = T.tanh(gates[2 * H:3 * H])
        o = T.sigmoid(gates[3 * H:4 * H])
        c = f * c + i * g
        return o * T.tanh(c), c


class LstmPredictor(T.Module):
    """
    Embedding -> stacked LSTM -> output projection.

    Attributes:
        embedding (Parameter): V x E matrix; row 0 embeds the start symbol.
        lstm_layers (list): LstmLayer per layer.
        output_proj (Linear): H -> P projection.
    """

    kind = "lstm"

    def __init__(self, rng, vocab_size, embedding_dim, hidden_dim, output_dim, num_layers=2, dtype=np.float32):
        if num_layers < 1:
            raise UsageError(f"LSTM predictor needs at least one layer, got {num_layers}")
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        scale = 1.0 / np.sqrt(embedding_dim)
        self.embedding = T.Parameter(rng.child("embedding").normal((vocab_size, embedding_dim), std=scale, dtype=dtype),
                                     name="embedding")
        self.lstm_layers = [
            LstmLayer(rng.child(f"lstm{i}"), embedding_dim if i == 0 else hidden_dim, hidden_dim, dtype)
            for i in range(num_layers)
        ]
        self.output_proj = Linear(rng.child("output_proj"), hidden_dim, output_dim, dtype=dtype)

    def initial_state(self):
        zeros = np.zeros(self.hidden_dim, dtype=self.embedding.dtype)
        state = tuple((T.constant(zeros), T.constant(zeros)) for _ in self.lstm_layers)
        _, state = self._advance(state, BLANK_ID)
        return state

    def _advance(self, state, label):
        x = self.embedding[label]
        new_state = []
        for layer, (h, c) in zip(self.lstm_layers, state):
            h, c = layer.cell(x, h, c)
            new_state.append((h, c))
            x = h
        return x, tuple(new_state)

    def output(self, state):
        return self.output_proj(state[-1][0])

    def step(self, state, label):
        _, state = self._advance(state, label)
        return state

    def predict(self, labels):
        """
        Predictor rows for a label prefix.

        Args:
            labels (sequence): Label ids in [1, V-1].

        Returns:
            DiffArray: (U+1) x P matrix.

        Raises:
            UsageError: If a label is out of range.
        """
        labels = _check_labels(labels, self.vocab_size)
        state = self.initial_state()
        rows = [state[-1][0]]
        for k in labels:
            state = self.step(state, k)
            rows.append(state[-1][0])
        return self.output_proj(T.stack(rows, axis=0))


class TarPredictor(T.Module):
    """
    Tied-and-reduced predictor over the last history_size labels.

    Attributes:
        embedding (Parameter): V x E matrix, optionally shared with the joint output.
        position (Parameter): history_size x E position vectors, one per slot.
        head_logits (Parameter): num_heads x history_size slot-weight logits.
        proj (Linear): E -> P projection.
        norm (LayerNorm): Output normalisation over P.
    """

    kind = "tar"

    def __init__(self, rng, vocab_size, embedding_dim, output_dim, history_size=5, num_heads=4, dtype=np.float32):
        if history_size < 1 or num_heads < 1:
            raise UsageError(f"history_size and num_heads must be positive, got {history_size}, {num_heads}")
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.output_dim = output_dim
        self.history_size = history_size
        self.num_heads = num_heads
        scale = 1.0 / np.sqrt(embedding_dim)
        self.embedding = T.Parameter(rng.child("embedding").normal((vocab_size, embedding_dim), std=scale, dtype=dtype),
                                     name="embedding")
        self.position = T.Parameter(rng.child("position").normal((history_size, embedding_dim), std=0.1, dtype=dtype),
                                    name="position")
        self.head_logits = T.Parameter(rng.child("head_logits").normal((num_heads, history_size), std=0.1, dtype=dtype),
                                       name="head_logits")
        self.proj = Linear(rng.child("proj"), embedding_dim, output_dim, dtype=dtype)
        self.norm = LayerNorm(output_dim, dtype)

    def history_matrix(self, labels):
        """(U+1) x N ids; row u holds the last N of labels[:u], left-padded with blank."""
        padded = (BLANK_ID,) * self.history_size + tuple(labels)
        return np.array([padded[u:u + self.history_size] for u in range(len(labels) + 1)], dtype=np.int64)

    def pooled_history(self, labels):
        """Head-averaged convex combination of slot vectors, before projection."""
        labels = _check_labels(labels, self.vocab_size)
        return self._pool(self.history_matrix(labels))

    def _pool(self, history):
        slots = self.embedding[history] + self.position
        weights = T.softmax(self.head_logits, axis=-1)
        per_head = T.matmul(weights, slots)
        return T.mean(per_head, axis=-2)

    def _head(self, pooled):
        return T.swish(self.norm(self.proj(pooled)))

    def predict(self, labels):
        """
        Predictor rows for a label prefix; row u depends only on the most
        recent history_size labels before position u.

        Returns:
            DiffArray: (U+1) x P matrix.

        Raises:
            UsageError: If a label is out of range.
        """
        return self._head(self.pooled_history(labels))

    def initial_state(self):
        return (BLANK_ID,) * self.history_size

    def step(self, state, label):
        return state[1:] + (int(label),)

    def output(self, state):
        return self._head(self._pool(np.array([state], dtype=np.int64)))[0]


class Joint(T.Module):
    """
    logits = tanh(enc @ enc_proj + pred @ pred_proj + bias) @ output + output_bias.

    pred_proj is omitted when the predictor already emits joint-width rows.
    When tied, the output matrix is the predictor's embedding transposed
    (the same Parameter object).

    Attributes:
        enc_proj (Parameter): D x J.
        pred_proj (Parameter or None): P x J.
        bias (Parameter): J.
        output_weight (Parameter): J x V, or the tied V x J embedding.
        output_bias (Parameter): V.
    """

    def __init__(self, rng, encoder_dim, pred_dim, joint_dim, vocab_size, use_pred_proj=True,
                 tied_embedding=None, dtype=np.float32):
        self.encoder_dim = encoder_dim
        self.pred_dim = pred_dim
        self.joint_dim = joint_dim
        self.vocab_size = vocab_size
        if not use_pred_proj and pred_dim != joint_dim:
            raise UsageError(f"Without pred_proj the predictor width {pred_dim} must equal joint width {joint_dim}")
        self.enc_proj = T.Parameter(init_weight(rng.child("enc_proj"), encoder_dim, joint_dim, dtype), name="enc_proj")
        self.pred_proj = (T.Parameter(init_weight(rng.child("pred_proj"), pred_dim, joint_dim, dtype), name="pred_proj")
                          if use_pred_proj else None)
        self.bias = T.Parameter(np.zeros(joint_dim, dtype=dtype), name="bias")
        self.tied = tied_embedding is not None
        if self.tied:
            if tied_embedding.shape != (vocab_size, joint_dim):
                raise UsageError(f"Tied embedding shape {tied_embedding.shape} != ({vocab_size}, {joint_dim})")
            self.output_weight = tied_embedding
        else:
            self.output_weight = T.Parameter(init_weight(rng.child("output"), joint_dim, vocab_size, dtype),
                                             name="output_weight")
        self.output_bias = T.Parameter(np.zeros(vocab_size, dtype=dtype), name="output_bias")

    def output_matrix(self):
        return T.transpose(self.output_weight) if self.tied else self.output_weight

    def project_encoder(self, enc):
        if enc.shape[-1] != self.encoder_dim:
            raise UsageError(f"Joint expects encoder width {self.encoder_dim}, got {enc.shape[-1]}")
        return T.matmul(enc, self.enc_proj)

    def project_predictor(self, pred):
        if pred.shape[-1] != self.pred_dim:
            raise UsageError(f"Joint expects predictor width {self.pred_dim}, got {pred.shape[-1]}")
        return T.matmul(pred, self.pred_proj) if self.pred_proj is not None else pred

    def combine(self, enc_h, pred_h):
        """Logits from already-projected encoder and predictor activations (broadcasting)."""
        hidden = T.tanh(enc_h + pred_h + self.bias)
        return T.matmul(hidden, self.output_matrix()) + self.output_bias

    def __call__(self, enc, pred):
        return self.combine(self.project_encoder(enc), self.project_predictor(pred))


def joint(enc_row, pred_row, params):
    """
    Vocabulary logits for one encoder row and one predictor row.

    Args:
        enc_row (DiffArray): Width-D encoder output.
        pred_row (DiffArray): Width-P predictor output.
        params (Joint): Joint network.

    Returns:
        DiffArray: Length-V logits.

    Raises:
        UsageError: On width mismatch.
    """
    return params(enc_row, pred_row)


def lstm_predict(label_prefix, params):
    return params.predict(label_prefix)


def tar_predict(label_prefix, params):
    return params.predict(label_prefix)


def lstm_predictor_params(vocab_size, embedding_dim, hidden_dim, output_dim, num_layers):
    total = vocab_size * embedding_dim
    for i in range(num_layers):
        in_dim = embedding_dim if i == 0 else hidden_dim
        total += 4 * hidden_dim * (in_dim + hidden_dim) + 4 * hidden_dim
    return total + linear_params(hidden_dim, output_dim)


def tar_predictor_params(vocab_size, embedding_dim, output_dim, history_size, num_heads):
    return (vocab_size * embedding_dim + history_size * embedding_dim + num_heads * history_size
            + linear_params(embedding_dim, output_dim) + layer_norm_params(output_dim))


def joint_params(encoder_dim, pred_dim, joint_dim, vocab_size, use_pred_proj, tied):
    total = encoder_dim * joint_dim + joint_dim + vocab_size
    if use_pred_proj:
        total += pred_dim * joint_dim
    if not tied:
        total += joint_dim * vocab_size
    return total
