"""Encoder-decoder over tensor-product representations.

The encoder runs two LSTMs (filler and role) whose shared recurrent input is
the previous token's flattened binding; each step soft-selects a filler and a
role column under a sharp softmax (temperature 0.1) and binds them with an
outer product.  A reasoning MLP maps the pooled binding to the decoder's
initial hidden state.  The decoder is an attentional tuple-LSTM whose hidden
state is treated as an order-3 binding and unbound into relation and argument
vectors, which feed separate classifier heads.

Ablation variants swap either side for a plain LSTM (hidden size 100).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Vocabularies
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    contract_last,
    embedding_row,
    flatten,
    matmul,
    mul,
    outer_product,
    reshape,
    sigmoid,
    softmax_with_temperature,
    stack_rows,
    tanh,
    transpose,
    zeros,
)


class VocabError(ValueError):
    """Token/relation/argument id outside its vocabulary."""


@dataclass
class ModelDims:
    """Dimension hyperparameters; derived sizes are properties."""

    d_word: int = 100
    d_filler: int = 30
    n_fillers: int = 150
    d_role: int = 20
    n_roles: int = 50
    d_rel: int = 20
    d_arg: int = 10
    d_pos: int = 5
    positions: int = 2
    lstm_hidden: int = 100

    @property
    def d_t(self) -> int:
        return self.d_filler * self.d_role

    @property
    def d_h(self) -> int:
        return self.d_arg * self.d_rel * self.d_pos

    @property
    def d_dec(self) -> int:
        return self.d_rel + self.positions * self.d_arg

    def validate(self) -> None:
        for name, v in vars(self).items():
            if v <= 0:
                raise ShapeError(f"dimension {name} must be positive, got {v}")
        if self.positions not in (2, 3):
            raise ShapeError(f"positions must be 2 or 3, got {self.positions}")


@dataclass
class ModelVariant:
    encoder_kind: str = "tpr"       # tpr | lstm
    decoder_kind: str = "tpr"       # tpr | lstm
    pooling: str = "sum_tprs"       # sum_tprs | last_state
    reasoning_layers: int = 1

    def validate(self) -> None:
        if self.encoder_kind not in ("tpr", "lstm"):
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.decoder_kind not in ("tpr", "lstm"):
            raise ValueError(f"unknown decoder kind {self.decoder_kind!r}")
        if self.pooling not in ("sum_tprs", "last_state"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.reasoning_layers < 1:
            raise ValueError("reasoning_layers must be >= 1")


def _uniform(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-0.1, 0.1, size=shape), requires_grad=True)


@dataclass
class LstmParams:
    """One LSTM cell: forget/candidate/input/output gates."""

    u_f: Tensor
    u_g: Tensor
    u_i: Tensor
    u_o: Tensor
    v_f: Tensor
    v_g: Tensor
    v_i: Tensor
    v_o: Tensor
    b_f: Tensor
    b_g: Tensor
    b_i: Tensor
    b_o: Tensor

    @classmethod
    def random(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "LstmParams":
        u = lambda: _uniform(rng, (hidden_dim, input_dim))
        v = lambda: _uniform(rng, (hidden_dim, hidden_dim))
        b = lambda: _uniform(rng, (hidden_dim,))
        return cls(u(), u(), u(), u(), v(), v(), v(), v(), b(), b(), b(), b())

    def named_tensors(self, prefix: str):
        for gate in ("f", "g", "i", "o"):
            yield f"{prefix}.u_{gate}", getattr(self, f"u_{gate}")
            yield f"{prefix}.v_{gate}", getattr(self, f"v_{gate}")
            yield f"{prefix}.b_{gate}", getattr(self, f"b_{gate}")


def lstm_cell(p: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    f = sigmoid(add(add(matmul(p.u_f, x), matmul(p.v_f, h_prev)), p.b_f))
    g = tanh(add(add(matmul(p.u_g, x), matmul(p.v_g, h_prev)), p.b_g))
    i = sigmoid(add(add(matmul(p.u_i, x), matmul(p.v_i, h_prev)), p.b_i))
    o = sigmoid(add(add(matmul(p.u_o, x), matmul(p.v_o, h_prev)), p.b_o))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# encoders


@dataclass
class EncoderParams:
    """Filler/role binding encoder."""

    embed: Tensor                 # (n_tokens, d_word)
    filler_lstm: LstmParams       # input d_word, hidden d_t
    role_lstm: LstmParams
    w_filler_attn: Tensor         # (n_fillers, d_t)
    w_role_attn: Tensor           # (n_roles, d_t)
    fillers: Tensor               # (d_filler, n_fillers)
    roles: Tensor                 # (d_role, n_roles)
    temperature: float = 0.1      # fixed during training and inference

    @classmethod
    def random(cls, rng, dims: ModelDims, n_tokens: int) -> "EncoderParams":
        return cls(
            embed=_uniform(rng, (n_tokens, dims.d_word)),
            filler_lstm=LstmParams.random(rng, dims.d_word, dims.d_t),
            role_lstm=LstmParams.random(rng, dims.d_word, dims.d_t),
            w_filler_attn=_uniform(rng, (dims.n_fillers, dims.d_t)),
            w_role_attn=_uniform(rng, (dims.n_roles, dims.d_t)),
            fillers=_uniform(rng, (dims.d_filler, dims.n_fillers)),
            roles=_uniform(rng, (dims.d_role, dims.n_roles)),
        )

    def named_tensors(self, prefix: str = "encoder"):
        yield f"{prefix}.embed", self.embed
        yield from self.filler_lstm.named_tensors(f"{prefix}.filler_lstm")
        yield from self.role_lstm.named_tensors(f"{prefix}.role_lstm")
        yield f"{prefix}.w_filler_attn", self.w_filler_attn
        yield f"{prefix}.w_role_attn", self.w_role_attn
        yield f"{prefix}.fillers", self.fillers
        yield f"{prefix}.roles", self.roles


def _check_token(token_id: int, params: EncoderParams | "LstmEncoderParams") -> None:
    if not 0 <= token_id < params.embed.shape[0]:
        raise VocabError(f"token id {token_id} outside vocabulary of {params.embed.shape[0]}")


def _encoder_step_scores(token_id: int, prev_binding: Tensor,
                         prev_cells: tuple[Tensor, Tensor], params: EncoderParams):
    _check_token(token_id, params)
    w = embedding_row(params.embed, token_id)
    recurrent = flatten(prev_binding)
    h_f, c_f = lstm_cell(params.filler_lstm, w, recurrent, prev_cells[0])
    h_r, c_r = lstm_cell(params.role_lstm, w, recurrent, prev_cells[1])
    a_f = softmax_with_temperature(matmul(params.w_filler_attn, h_f), params.temperature)
    a_r = softmax_with_temperature(matmul(params.w_role_attn, h_r), params.temperature)
    f = matmul(params.fillers, a_f)
    r = matmul(params.roles, a_r)
    return outer_product(f, r), c_f, c_r, a_f, a_r


def encoder_step(token_id: int, prev_binding: Tensor, prev_cells: tuple[Tensor, Tensor],
                 params: EncoderParams) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """One step of the binding encoder: returns the token binding and cell states."""
    binding, c_f, c_r, _, _ = _encoder_step_scores(token_id, prev_binding, prev_cells, params)
    return binding, (c_f, c_r)


def encode_sequence(token_ids: Sequence[int], params: EncoderParams,
                    pooling: str = "sum_tprs") -> tuple[Tensor, list[Tensor]]:
    """Run the encoder over a sequence; returns (pooled binding, per-token bindings)."""
    if not token_ids:
        raise ValueError("cannot encode an empty token sequence")
    d_f, d_r = params.fillers.shape[0], params.roles.shape[0]
    binding = zeros((d_f, d_r))
    cells = (zeros(d_f * d_r), zeros(d_f * d_r))
    contexts: list[Tensor] = []
    for tok in token_ids:
        binding, cells = encoder_step(tok, binding, cells, params)
        contexts.append(binding)
    if pooling == "last_state":
        pooled = contexts[-1]
    else:
        pooled = contexts[0]
        for t in contexts[1:]:
            pooled = add(pooled, t)
    return pooled, contexts


def bag_of_embeddings(token_ids: Sequence[int], embed: Tensor) -> Tensor:
    """Order-insensitive baseline: the multiset sum of token embeddings.

    Summation runs in sorted-id order, so any permutation of the input yields
    a bit-identical result.
    """
    ordered = sorted(token_ids)
    total = embedding_row(embed, ordered[0])
    for tok in ordered[1:]:
        total = add(total, embedding_row(embed, tok))
    return total


@dataclass
class LstmEncoderParams:
    """Plain single-layer LSTM encoder used by the ablation variants."""

    embed: Tensor
    lstm: LstmParams
    hidden: int

    @classmethod
    def random(cls, rng, dims: ModelDims, n_tokens: int) -> "LstmEncoderParams":
        return cls(embed=_uniform(rng, (n_tokens, dims.d_word)),
                   lstm=LstmParams.random(rng, dims.d_word, dims.lstm_hidden),
                   hidden=dims.lstm_hidden)

    def named_tensors(self, prefix: str = "encoder"):
        yield f"{prefix}.embed", self.embed
        yield from self.lstm.named_tensors(f"{prefix}.lstm")


def lstm_encode_sequence(token_ids: Sequence[int], params: LstmEncoderParams,
                         pooling: str = "sum_tprs") -> tuple[Tensor, list[Tensor]]:
    if not token_ids:
        raise ValueError("cannot encode an empty token sequence")
    h, c = zeros(params.hidden), zeros(params.hidden)
    contexts: list[Tensor] = []
    for tok in token_ids:
        _check_token(tok, params)
        h, c = lstm_cell(params.lstm, embedding_row(params.embed, tok), h, c)
        contexts.append(h)
    if pooling == "last_state":
        pooled = contexts[-1]
    else:
        pooled = contexts[0]
        for t in contexts[1:]:
            pooled = add(pooled, t)
    return pooled, contexts


# ---------------------------------------------------------------------------
# reasoning MLP


@dataclass
class ReasoningParams:
    """Affine + tanh layers mapping the pooled encoding to the decoder state."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def random(cls, rng, in_dim: int, out_dim: int, layers: int) -> "ReasoningParams":
        ws, bs = [], []
        cur = in_dim
        for _ in range(layers):
            ws.append(_uniform(rng, (out_dim, cur)))
            bs.append(_uniform(rng, (out_dim,)))
            cur = out_dim
        return cls(ws, bs)

    def named_tensors(self, prefix: str = "reasoning"):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{k}", w
            yield f"{prefix}.b{k}", b


def reasoning_map(pooled: Tensor, params: ReasoningParams) -> Tensor:
    x = flatten(pooled) if pooled.ndim > 1 else pooled
    for w, b in zip(params.weights, params.biases):
        x = tanh(add(matmul(w, x), b))
    return x


# ---------------------------------------------------------------------------
# decoders


@dataclass
class DecoderParams:
    """Tuple-LSTM with attention feeding the unbinding head."""

    rel_embed: Tensor             # (n_relations, d_rel)
    arg_embed: Tensor             # (n_arguments, d_arg)
    lstm: LstmParams              # input d_dec, hidden d_h
    w_context: Tensor             # (d_h, enc_dim) projection building the attention memory
    attn_combine: Tensor          # (d_h, 2*d_h)
    pos_unbind: list[Tensor]      # positional unbinding vectors, each (d_pos,)
    w_dual: Tensor                # (d_rel, d_arg*d_rel)
    rel_classifier: Tensor        # (n_relations, d_rel)
    arg_classifier: Tensor        # (n_arguments, d_arg)
    rel_decode: Tensor | None = None   # optional (d_rel, d_rel) map before classifying
    attn_tanh: bool = True

    @classmethod
    def random(cls, rng, dims: ModelDims, n_relations: int, n_arguments: int,
               enc_dim: int, attn_tanh: bool = True, rel_decode_linear: bool = False):
        # Unbinding vectors start as distinct unit Gaussians.
        pos = []
        for _ in range(dims.positions):
            v = rng.standard_normal(dims.d_pos)
            pos.append(Tensor(v / np.linalg.norm(v), requires_grad=True))
        return cls(
            rel_embed=_uniform(rng, (n_relations, dims.d_rel)),
            arg_embed=_uniform(rng, (n_arguments, dims.d_arg)),
            lstm=LstmParams.random(rng, dims.d_dec, dims.d_h),
            w_context=_uniform(rng, (dims.d_h, enc_dim)),
            attn_combine=_uniform(rng, (dims.d_h, 2 * dims.d_h)),
            pos_unbind=pos,
            w_dual=_uniform(rng, (dims.d_rel, dims.d_arg * dims.d_rel)),
            rel_classifier=_uniform(rng, (n_relations, dims.d_rel)),
            arg_classifier=_uniform(rng, (n_arguments, dims.d_arg)),
            rel_decode=_uniform(rng, (dims.d_rel, dims.d_rel)) if rel_decode_linear else None,
            attn_tanh=attn_tanh,
        )

    def named_tensors(self, prefix: str = "decoder"):
        yield f"{prefix}.rel_embed", self.rel_embed
        yield f"{prefix}.arg_embed", self.arg_embed
        yield from self.lstm.named_tensors(f"{prefix}.lstm")
        yield f"{prefix}.w_context", self.w_context
        yield f"{prefix}.attn_combine", self.attn_combine
        for k, p in enumerate(self.pos_unbind):
            yield f"{prefix}.pos_unbind.{k}", p
        yield f"{prefix}.w_dual", self.w_dual
        yield f"{prefix}.rel_classifier", self.rel_classifier
        yield f"{prefix}.arg_classifier", self.arg_classifier
        if self.rel_decode is not None:
            yield f"{prefix}.rel_decode", self.rel_decode


@dataclass
class LstmDecoderParams:
    """Attentional LSTM baseline emitting one classifier head per output slot."""

    rel_embed: Tensor
    arg_embed: Tensor
    lstm: LstmParams              # input d_dec, hidden lstm_hidden
    w_context: Tensor             # (hidden, enc_dim)
    attn_combine: Tensor          # (hidden, 2*hidden)
    rel_head: Tensor              # (n_relations, hidden)
    arg_heads: list[Tensor]       # per position, (n_arguments, hidden)
    hidden: int = 100
    attn_tanh: bool = True

    @classmethod
    def random(cls, rng, dims: ModelDims, n_relations: int, n_arguments: int,
               enc_dim: int, attn_tanh: bool = True):
        h = dims.lstm_hidden
        return cls(
            rel_embed=_uniform(rng, (n_relations, dims.d_rel)),
            arg_embed=_uniform(rng, (n_arguments, dims.d_arg)),
            lstm=LstmParams.random(rng, dims.d_dec, h),
            w_context=_uniform(rng, (h, enc_dim)),
            attn_combine=_uniform(rng, (h, 2 * h)),
            rel_head=_uniform(rng, (n_relations, h)),
            arg_heads=[_uniform(rng, (n_arguments, h)) for _ in range(dims.positions)],
            hidden=h,
            attn_tanh=attn_tanh,
        )

    def named_tensors(self, prefix: str = "decoder"):
        yield f"{prefix}.rel_embed", self.rel_embed
        yield f"{prefix}.arg_embed", self.arg_embed
        yield from self.lstm.named_tensors(f"{prefix}.lstm")
        yield f"{prefix}.w_context", self.w_context
        yield f"{prefix}.attn_combine", self.attn_combine
        yield f"{prefix}.rel_head", self.rel_head
        for k, head in enumerate(self.arg_heads):
            yield f"{prefix}.arg_heads.{k}", head


def project_contexts(contexts: Sequence[Tensor],
                     params: DecoderParams | LstmDecoderParams) -> Tensor:
    """Attention memory: one projected row per encoder position."""
    if not contexts:
        raise ValueError("attention needs a non-empty context")
    rows = [matmul(params.w_context, flatten(t) if t.ndim > 1 else t) for t in contexts]
    return stack_rows(rows)


def _attend(h_input: Tensor, projected: Tensor,
            params: DecoderParams | LstmDecoderParams) -> tuple[Tensor, Tensor]:
    scores = matmul(projected, h_input)
    weights = softmax_with_temperature(scores, 1.0)
    summary = matmul(transpose(projected), weights)
    combined = matmul(params.attn_combine, concat([h_input, summary]))
    return (tanh(combined) if params.attn_tanh else combined), weights


def attention(h_input: Tensor, contexts: Sequence[Tensor],
              params: DecoderParams | LstmDecoderParams) -> Tensor:
    """Dot-product attention over encoder positions, then a combining layer."""
    out, _ = _attend(h_input, project_contexts(contexts, params), params)
    return out


def attention_weights(h_input: Tensor, contexts: Sequence[Tensor],
                      params: DecoderParams | LstmDecoderParams) -> np.ndarray:
    _, weights = _attend(h_input, project_contexts(contexts, params), params)
    return weights.data


def _embed_tuple(prev_ids: Sequence[int], params: DecoderParams | LstmDecoderParams) -> Tensor:
    rel_id, arg_ids = prev_ids[0], prev_ids[1:]
    if not 0 <= rel_id < params.rel_embed.shape[0]:
        raise VocabError(f"relation id {rel_id} outside vocabulary")
    parts = [embedding_row(params.rel_embed, rel_id)]
    for a in arg_ids:
        if not 0 <= a < params.arg_embed.shape[0]:
            raise VocabError(f"argument id {a} outside vocabulary")
        parts.append(embedding_row(params.arg_embed, a))
    return concat(parts)


def decoder_step(prev_ids: Sequence[int], prev_hidden: Tensor, prev_cell: Tensor,
                 projected: Tensor, params: DecoderParams | LstmDecoderParams
                 ) -> tuple[Tensor, Tensor]:
    """One tuple-LSTM step: embed the previous tuple, recur, attend."""
    x = _embed_tuple(prev_ids, params)
    h_in, c = lstm_cell(params.lstm, x, prev_hidden, prev_cell)
    h_out, _ = _attend(h_in, projected, params)
    return h_out, c


def unbinding_module(hidden: Tensor, params: DecoderParams, dims: ModelDims
                     ) -> tuple[Tensor, list[Tensor], Tensor]:
    """Treat the hidden state as an order-3 binding and unbind it.

    Returns (relation logits, per-position argument logits, relation
    unbinding vector).
    """
    if hidden.size != dims.d_h:
        raise ShapeError(f"hidden size {hidden.size} != d_arg*d_rel*d_pos = {dims.d_h}")
    cube = reshape(hidden, (dims.d_arg, dims.d_rel, dims.d_pos))
    slabs = [contract_last(cube, p) for p in params.pos_unbind]
    total = slabs[0]
    for s in slabs[1:]:
        total = add(total, s)
    r_unbind = matmul(params.w_dual, flatten(total))
    rel_vec = matmul(params.rel_decode, r_unbind) if params.rel_decode is not None else r_unbind
    rel_logits = matmul(params.rel_classifier, rel_vec)
    arg_logits = [matmul(params.arg_classifier, matmul(slab, r_unbind)) for slab in slabs]
    return rel_logits, arg_logits, r_unbind


def lstm_head_logits(hidden: Tensor, params: LstmDecoderParams) -> tuple[Tensor, list[Tensor], None]:
    rel_logits = matmul(params.rel_head, hidden)
    arg_logits = [matmul(head, hidden) for head in params.arg_heads]
    return rel_logits, arg_logits, None


# ---------------------------------------------------------------------------
# assembled model


@dataclass
class Tpn2fModel:
    dims: ModelDims
    variant: ModelVariant
    vocab: Vocabularies
    encoder: EncoderParams | LstmEncoderParams
    reasoning: ReasoningParams
    decoder: DecoderParams | LstmDecoderParams

    @property
    def enc_dim(self) -> int:
        return self.dims.d_t if self.variant.encoder_kind == "tpr" else self.dims.lstm_hidden

    @property
    def dec_hidden(self) -> int:
        return self.dims.d_h if self.variant.decoder_kind == "tpr" else self.dims.lstm_hidden

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.encoder.named_tensors("encoder"))
        out += list(self.reasoning.named_tensors("reasoning"))
        out += list(self.decoder.named_tensors("decoder"))
        return out

    def encode(self, token_ids: Sequence[int]) -> tuple[Tensor, list[Tensor]]:
        if self.variant.encoder_kind == "tpr":
            return encode_sequence(token_ids, self.encoder, self.variant.pooling)
        return lstm_encode_sequence(token_ids, self.encoder, self.variant.pooling)

    def initial_decoder_state(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        return reasoning_map(pooled, self.reasoning), zeros(self.dec_hidden)

    def project_contexts(self, contexts: Sequence[Tensor]) -> Tensor:
        return project_contexts(contexts, self.decoder)

    def decode_step(self, prev_ids: Sequence[int], hidden: Tensor, cell: Tensor,
                    projected: Tensor) -> tuple[Tensor, Tensor]:
        return decoder_step(prev_ids, hidden, cell, projected, self.decoder)

    def head_logits(self, hidden: Tensor) -> tuple[Tensor, list[Tensor], Tensor | None]:
        if self.variant.decoder_kind == "tpr":
            return unbinding_module(hidden, self.decoder, self.dims)
        return lstm_head_logits(hidden, self.decoder)


def build_model(variant: ModelVariant, dims: ModelDims, vocab: Vocabularies,
                rng: np.random.Generator, attn_tanh: bool = True,
                rel_decode_linear: bool = False) -> Tpn2fModel:
    """Assemble the requested encoder/decoder pair with fresh random weights."""
    dims.validate()
    variant.validate()
    if variant.encoder_kind == "tpr":
        encoder = EncoderParams.random(rng, dims, vocab.n_tokens)
        enc_dim = dims.d_t
    else:
        encoder = LstmEncoderParams.random(rng, dims, vocab.n_tokens)
        enc_dim = dims.lstm_hidden
    if variant.decoder_kind == "tpr":
        decoder = DecoderParams.random(rng, dims, vocab.n_relations, vocab.n_arguments,
                                       enc_dim, attn_tanh, rel_decode_linear)
        dec_hidden = dims.d_h
    else:
        decoder = LstmDecoderParams.random(rng, dims, vocab.n_relations, vocab.n_arguments,
                                           enc_dim, attn_tanh)
        dec_hidden = dims.lstm_hidden
    reasoning = ReasoningParams.random(rng, enc_dim, dec_hidden, variant.reasoning_layers)
    return Tpn2fModel(dims=dims, variant=variant, vocab=vocab,
                      encoder=encoder, reasoning=reasoning, decoder=decoder)
