"""Encoder/decoder behavior: closed forms, shapes, variants, gradient flow."""

import numpy as np
import pytest

from tpn2f.data import Sample, Vocabularies
from tpn2f.formal_lang import RelationalTuple
from tpn2f.model import (
    EncoderParams,
    LstmDecoderParams,
    LstmEncoderParams,
    ModelDims,
    ModelVariant,
    VocabError,
    attention,
    attention_weights,
    bag_of_embeddings,
    build_model,
    encode_sequence,
    encoder_step,
    reasoning_map,
    unbinding_module,
    _encoder_step_scores,
)
from tpn2f.tensor import GradientTape, Tensor, backward, zeros
from tpn2f.tpr import TupleTprConfig, bind3
from tpn2f.training import sample_loss, encode_sample

MICRO = ModelDims(d_word=8, d_filler=5, n_fillers=7, d_role=4, n_roles=6,
                  d_rel=4, d_arg=3, d_pos=5, positions=2, lstm_hidden=9)
MATHQA = ModelDims(d_word=16, d_filler=30, n_fillers=150, d_role=20, n_roles=50,
                   d_rel=20, d_arg=10, d_pos=5, positions=2)
ALGOLISP = ModelDims(d_word=16, d_filler=30, n_fillers=150, d_role=30, n_roles=50,
                     d_rel=30, d_arg=20, d_pos=5, positions=3)


def tiny_vocab(n_tokens=5, n_rel=6, n_arg=7):
    return Vocabularies(
        tokens=["UNK"] + [f"w{i}" for i in range(n_tokens - 1)],
        relations=["PAD", "UNK", "GO", "EOS"] + [f"r{i}" for i in range(n_rel - 4)],
        arguments=["PAD", "UNK", "GO", "EOS"] + [f"a{i}" for i in range(n_arg - 4)],
    )


def micro_model(seed=0, dims=MICRO, variant=None, vocab=None):
    return build_model(variant or ModelVariant(), dims, vocab or tiny_vocab(),
                       np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# encoder


def test_encoder_step_output_shape_at_published_dims():
    model = micro_model(dims=MATHQA)
    binding, (c_f, c_r) = encoder_step(1, zeros((30, 20)), (zeros(600), zeros(600)),
                                       model.encoder)
    assert binding.shape == (30, 20)
    assert c_f.shape == (600,) and c_r.shape == (600,)


def test_encoder_step_zero_weights_uniform_softmax_closed_form():
    rng = np.random.default_rng(0)
    params = EncoderParams.random(rng, MICRO, n_tokens=5)
    for name, t in params.named_tensors():
        if "fillers" not in name and "roles" not in name:
            t.data[...] = 0.0
    binding, _ = encoder_step(2, zeros((5, 4)), (zeros(20), zeros(20)), params)
    f_mean = params.fillers.data.mean(axis=1)
    r_mean = params.roles.data.mean(axis=1)
    assert np.allclose(binding.data, np.outer(f_mean, r_mean), atol=1e-12)


def test_encoder_selections_are_convex_combinations():
    model = micro_model(seed=3)
    binding, c_f, c_r, a_f, a_r = _encoder_step_scores(
        1, zeros((5, 4)), (zeros(20), zeros(20)), model.encoder)
    for scores in (a_f.data, a_r.data):
        assert (scores >= 0).all()
        assert abs(scores.sum() - 1.0) <= 1e-12
    # The binding is the outer product of the dictionary mixtures.
    f = model.encoder.fillers.data @ a_f.data
    r = model.encoder.roles.data @ a_r.data
    assert np.allclose(binding.data, np.outer(f, r), atol=1e-15)


def test_encoder_rejects_unknown_token_id():
    model = micro_model()
    with pytest.raises(VocabError):
        encoder_step(99, zeros((5, 4)), (zeros(20), zeros(20)), model.encoder)


def test_encode_sequence_singleton_equals_context():
    model = micro_model()
    pooled, contexts = encode_sequence([1], model.encoder)
    assert len(contexts) == 1
    assert np.array_equal(pooled.data, contexts[0].data)


def test_encode_sequence_sum_of_two():
    model = micro_model()
    pooled, contexts = encode_sequence([1, 2], model.encoder)
    assert np.abs(pooled.data - (contexts[0].data + contexts[1].data)).max() <= 1e-12


def test_encode_sequence_last_state_pooling():
    model = micro_model()
    pooled, contexts = encode_sequence([1, 2, 3], model.encoder, pooling="last_state")
    assert np.array_equal(pooled.data, contexts[2].data)


def test_encode_sequence_rejects_empty():
    model = micro_model()
    with pytest.raises(ValueError):
        encode_sequence([], model.encoder)


def test_bow_sensitivity_vs_bag_of_embeddings():
    """Token order changes the binding encoding but not the embedding bag."""
    for seed in range(5):
        model = micro_model(seed=seed)
        fwd, _ = encode_sequence([1, 2, 3], model.encoder)
        rev, _ = encode_sequence([3, 2, 1], model.encoder)
        assert np.linalg.norm(fwd.data - rev.data) > 1e-6
        bag_fwd = bag_of_embeddings([1, 2, 3], model.encoder.embed)
        bag_rev = bag_of_embeddings([3, 2, 1], model.encoder.embed)
        assert np.array_equal(bag_fwd.data, bag_rev.data)


# ---------------------------------------------------------------------------
# reasoning


def test_reasoning_dims_at_published_config():
    model = micro_model(dims=MATHQA)
    pooled = Tensor(np.random.default_rng(0).standard_normal((30, 20)))
    out = reasoning_map(pooled, model.reasoning)
    assert out.shape == (1000,)  # 30*20 -> 10*20*5


def test_reasoning_zero_input_zero_bias():
    model = micro_model()
    for _, t in model.reasoning.named_tensors():
        t.data[...] = t.data * 0.0
    out = reasoning_map(zeros((5, 4)), model.reasoning)
    assert np.array_equal(out.data, np.zeros(out.shape))


def test_reasoning_outputs_bounded_by_tanh():
    model = micro_model()
    out = reasoning_map(Tensor(np.random.default_rng(0).standard_normal((5, 4))),
                        model.reasoning)
    assert (np.abs(out.data) < 1.0).all()


def test_reasoning_layer_count():
    model = micro_model(variant=ModelVariant(reasoning_layers=3))
    assert len(model.reasoning.weights) == 3
    out = reasoning_map(zeros((5, 4)), model.reasoning)
    assert out.shape == (MICRO.d_h,)


# ---------------------------------------------------------------------------
# attention


def test_attention_single_context_weight_one():
    model = micro_model()
    rng = np.random.default_rng(1)
    h = Tensor(rng.standard_normal(MICRO.d_h))
    ctx = [Tensor(rng.standard_normal((5, 4)))]
    weights = attention_weights(h, ctx, model.decoder)
    assert np.array_equal(weights, [1.0])
    out = attention(h, ctx, model.decoder)
    proj = model.decoder.w_context.data @ ctx[0].data.reshape(-1)
    manual = np.tanh(model.decoder.attn_combine.data @ np.concatenate([h.data, proj]))
    assert np.allclose(out.data, manual, atol=1e-15)


def test_attention_identical_contexts_split_evenly():
    model = micro_model()
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal(MICRO.d_h))
    c = Tensor(rng.standard_normal((5, 4)))
    weights = attention_weights(h, [c, c], model.decoder)
    assert np.allclose(weights, [0.5, 0.5], atol=1e-15)


def test_attention_weights_sum_to_one():
    model = micro_model()
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal(MICRO.d_h))
    ctx = [Tensor(rng.standard_normal((5, 4))) for _ in range(6)]
    weights = attention_weights(h, ctx, model.decoder)
    assert abs(weights.sum() - 1.0) <= 1e-12


def test_attention_rejects_empty_context():
    model = micro_model()
    with pytest.raises(ValueError):
        attention(Tensor(np.zeros(MICRO.d_h)), [], model.decoder)


# ---------------------------------------------------------------------------
# decoder


def test_decoder_step_shapes_at_published_dims():
    model = micro_model(dims=MATHQA)
    assert MATHQA.d_h == 1000
    assert MATHQA.d_dec == 40  # 20 + 2*10
    ctx = [Tensor(np.random.default_rng(0).standard_normal((30, 20)))]
    projected = model.project_contexts(ctx)
    h, c = model.decode_step((2, 0, 0), zeros(1000), zeros(1000), projected)
    assert h.shape == (1000,) and c.shape == (1000,)


def test_decoder_step_deterministic():
    model = micro_model()
    ctx = [Tensor(np.random.default_rng(0).standard_normal((5, 4)))]
    projected = model.project_contexts(ctx)
    runs = [model.decode_step((2, 0, 0), zeros(MICRO.d_h), zeros(MICRO.d_h), projected)
            for _ in range(2)]
    assert np.array_equal(runs[0][0].data, runs[1][0].data)
    assert np.array_equal(runs[0][1].data, runs[1][1].data)


def test_decoder_rejects_bad_ids():
    model = micro_model()
    projected = model.project_contexts([Tensor(np.zeros((5, 4)))])
    with pytest.raises(VocabError):
        model.decode_step((99, 0, 0), zeros(MICRO.d_h), zeros(MICRO.d_h), projected)


def test_unbinding_round_trip_with_rigged_dual_map():
    """With orthonormal positions, unit relation vector, and the dual map set
    to reproduce it, the argument vectors come back exactly."""
    dims = ModelDims(d_word=8, d_filler=5, n_fillers=7, d_role=4, n_roles=6,
                     d_rel=2, d_arg=3, d_pos=4, positions=2)
    model = micro_model(dims=dims)
    rng = np.random.default_rng(8)
    q, _ = np.linalg.qr(rng.standard_normal((dims.d_pos, 2)))
    cfg = TupleTprConfig.from_positions(dims.d_arg, dims.d_rel, q)
    a1, a2 = rng.standard_normal(dims.d_arg), rng.standard_normal(dims.d_arg)
    r = rng.standard_normal(dims.d_rel)
    r /= np.linalg.norm(r)
    hidden = Tensor(bind3(a1, a2, r, cfg).data.reshape(-1))

    dec = model.decoder
    for i in range(2):
        dec.pos_unbind[i].data[...] = q[:, i]
    u = (a1 + a2) / np.dot(a1 + a2, a1 + a2)
    w_dual = np.zeros((dims.d_rel, dims.d_arg * dims.d_rel))
    for k in range(dims.d_rel):
        for j in range(dims.d_arg):
            w_dual[k, j * dims.d_rel + k] = u[j]
    dec.w_dual.data[...] = w_dual

    rel_logits, arg_logits, r_unbind = unbinding_module(hidden, dec, dims)
    assert np.abs(r_unbind.data - r).max() < 1e-9
    recovered = [dec.arg_classifier.data @ a for a in (a1, a2)]
    for got, want in zip(arg_logits, recovered):
        assert np.abs(got.data - want).max() < 1e-9


def test_unbinding_zero_hidden_gives_zero_logits():
    model = micro_model()
    rel_logits, arg_logits, r_unbind = unbinding_module(zeros(MICRO.d_h), model.decoder, MICRO)
    assert np.array_equal(rel_logits.data, np.zeros_like(rel_logits.data))
    for a in arg_logits:
        assert np.array_equal(a.data, np.zeros_like(a.data))
    assert np.array_equal(r_unbind.data, np.zeros(MICRO.d_rel))


def test_unbinding_position_slabs_differ_generically():
    model = micro_model(seed=11)
    rng = np.random.default_rng(12)
    hidden = Tensor(rng.standard_normal(MICRO.d_h))
    cube = hidden.data.reshape(MICRO.d_arg, MICRO.d_rel, MICRO.d_pos)
    slab1 = cube @ model.decoder.pos_unbind[0].data
    slab2 = cube @ model.decoder.pos_unbind[1].data
    assert np.abs(slab1 - slab2).max() > 1e-8


# ---------------------------------------------------------------------------
# variants


def test_build_full_model_has_binding_parts():
    model = micro_model(variant=ModelVariant("tpr", "tpr"))
    names = [n for n, _ in model.parameters()]
    assert "encoder.fillers" in names and "decoder.pos_unbind.0" in names


def test_build_baseline_uses_hidden_100():
    model = micro_model(dims=MATHQA, variant=ModelVariant("lstm", "lstm"))
    assert isinstance(model.encoder, LstmEncoderParams)
    assert isinstance(model.decoder, LstmDecoderParams)
    assert model.encoder.lstm.v_f.shape == (100, 100)
    assert model.decoder.lstm.v_f.shape == (100, 100)


def test_build_tp2lstm_mixes_parts():
    model = micro_model(variant=ModelVariant("tpr", "lstm"))
    names = [n for n, _ in model.parameters()]
    assert "encoder.fillers" in names
    assert all("pos_unbind" not in n for n in names)


def test_build_lstm2tp_mixes_parts():
    model = micro_model(variant=ModelVariant("lstm", "tpr"))
    names = [n for n, _ in model.parameters()]
    assert all("fillers" not in n for n in names)
    assert "decoder.pos_unbind.1" in names


def test_distinct_position_unbinding_vectors_at_init():
    model = micro_model(seed=4)
    p1, p2 = (p.data for p in model.decoder.pos_unbind)
    assert not np.allclose(p1, p2)
    assert np.linalg.norm(p1) == pytest.approx(1.0, abs=1e-12)


def test_same_seed_same_parameters():
    a = micro_model(seed=5)
    b = micro_model(seed=5)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


# ---------------------------------------------------------------------------
# shape audit and gradient flow


def _audit_sample(vocab, positions):
    program = [RelationalTuple("r0", ("a0", "a1", "a2")[:positions]),
               RelationalTuple("r1", ("#0", "a0", "a1")[:positions])]
    return Sample(id="audit", text=["w0", "w1", "w2"], program=program)


@pytest.mark.parametrize("dims", [MATHQA, ALGOLISP], ids=["mathqa", "algolisp"])
def test_shape_audit_full_forward_pass(dims):
    """A complete teacher-forced step runs without shape errors at both
    published configurations."""
    vocab = tiny_vocab()
    model = build_model(ModelVariant(), dims, vocab, np.random.default_rng(0))
    enc = encode_sample(_audit_sample(vocab, dims.positions), vocab, dims.positions)
    with GradientTape():
        loss = sample_loss(model, enc)
        backward(loss)
    assert np.isfinite(loss.item())
    for name, t in model.parameters():
        assert t.grad is None or t.grad.shape == t.data.shape, name


@pytest.mark.parametrize("encoder,decoder", [("tpr", "tpr"), ("tpr", "lstm"),
                                             ("lstm", "tpr"), ("lstm", "lstm")])
def test_gradient_flow_all_variants(encoder, decoder):
    """Finite differences agree with the tape on sampled parameter entries."""
    vocab = tiny_vocab()
    model = build_model(ModelVariant(encoder, decoder), MICRO, vocab,
                        np.random.default_rng(1))
    enc = encode_sample(_audit_sample(vocab, 2), vocab, 2)

    def loss_value():
        return sample_loss(model, enc).item()

    with GradientTape():
        backward(sample_loss(model, enc))
    rng = np.random.default_rng(2)
    h = 1e-5
    for name, t in model.parameters():
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros(t.data.shape)).reshape(-1)
        for k in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + h
            hi = loss_value()
            flat[k] = orig - h
            lo = loss_value()
            flat[k] = orig
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(grad[k]), 1e-4)
            assert abs(fd - grad[k]) / denom < 1e-3, f"{name}[{k}]"
