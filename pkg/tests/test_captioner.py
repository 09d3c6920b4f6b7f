import numpy as np
import numpy.testing as npt
import pytest

from groundprobe.autodiff import ShapeError, backward, finite_diff, sigmoid
from groundprobe.captioner import (
    END_ID,
    START_ID,
    ArchitectureKind,
    CaptionerError,
    CheckpointError,
    build_replay_graph,
    forward_replay,
    generate,
    gru_step,
    image_projection,
    load_params,
    save_params,
)

from conftest import make_params, random_caption
from oracles import oracle_next_prob, scalar_gru_step, scalar_replay_probs

INIT = ArchitectureKind.INIT_INJECT
PRE = ArchitectureKind.PRE_INJECT
PAR = ArchitectureKind.PAR_INJECT
MERGE = ArchitectureKind.MERGE


# --- gru_step -------------------------------------------------------------------


def test_gru_zero_weights_fixed_point(rng):
    params = make_params(INIT, seed=5)
    for _, arr in params.tensors():
        arr[...] = 0.0
    x = rng.standard_normal(params.m)
    npt.assert_array_equal(gru_step(params, x, np.zeros(params.h)), np.zeros(params.h))


def test_gru_closed_update_gate_keeps_state(rng):
    params = make_params(INIT, seed=6)
    params.bz[...] = -1e3  # z ~ 0 regardless of input
    h_prev = rng.standard_normal(params.h)
    npt.assert_allclose(gru_step(params, rng.standard_normal(params.m), h_prev),
                        h_prev, atol=1e-6)


def test_gru_matches_scalar_loop_oracle(rng):
    for kind in (INIT, PAR):
        params = make_params(kind, seed=7)
        x = rng.standard_normal(2 * params.m if kind is PAR else params.m)
        h_prev = rng.standard_normal(params.h)
        npt.assert_allclose(gru_step(params, x, h_prev),
                            scalar_gru_step(params, x, h_prev), rtol=1e-12, atol=1e-12)


def test_gru_shape_errors(rng):
    params = make_params(INIT)
    with pytest.raises(ShapeError):
        gru_step(params, np.zeros(params.m + 1), np.zeros(params.h))
    with pytest.raises(ShapeError):
        gru_step(params, np.zeros(params.m), np.zeros(params.h + 1))


# --- forward_replay ---------------------------------------------------------------


def _full(tokens):
    return [START_ID, *tokens]


def test_merge_hidden_states_ignore_image(rng):
    params = make_params(MERGE, seed=8)
    tokens = random_caption(rng, params.V, 5)
    image_a = rng.standard_normal(params.D)
    image_b = rng.standard_normal(params.D)
    tr_a = forward_replay(MERGE, params, image_a, _full(tokens))
    tr_b = forward_replay(MERGE, params, image_b, _full(tokens))
    for a, b in zip(tr_a, tr_b):
        assert np.array_equal(a.hidden, b.hidden)
        assert np.array_equal(a.multimodal[: params.h], b.multimodal[: params.h])
        assert not np.array_equal(a.logits, b.logits)


def test_merge_multimodal_is_exact_concatenation(rng):
    params = make_params(MERGE, seed=9)
    image = rng.standard_normal(params.D)
    proj = image_projection(params, image)
    for trace in forward_replay(MERGE, params, image, _full(random_caption(rng, params.V, 4))):
        assert np.array_equal(trace.multimodal, np.concatenate([trace.hidden, proj]))


def test_par_with_zero_projection_equals_text_only_gru(rng):
    params = make_params(PAR, seed=10)
    params.W_img[...] = 0.0
    params.b_img[...] = 0.0
    tokens = random_caption(rng, params.V, 5)
    traces = forward_replay(PAR, params, rng.standard_normal(params.D), _full(tokens))

    # text-only GRU over the word-embedding half of the input weights
    m, h = params.m, params.h
    hid = np.zeros(h)
    for t, trace in enumerate(traces):
        e = params.E[_full(tokens)[t]]
        z = sigmoid(params.Wz[:, :m] @ e + params.Uz @ hid + params.bz)
        r = sigmoid(params.Wr[:, :m] @ e + params.Ur @ hid + params.br)
        c = np.tanh(params.Wc[:, :m] @ e + params.Uc @ (r * hid) + params.bc)
        hid = (1.0 - z) * hid + z * c
        npt.assert_allclose(trace.hidden, hid, rtol=1e-12, atol=1e-14)


def test_next_word_probability_matches_scalar_oracle(rng):
    # 2 prediction steps, h=3, V=5
    for kind in ArchitectureKind:
        params = make_params(kind, V=5, m=3, h=3, D=4, seed=11)
        tokens = _full([3, END_ID])
        image = rng.standard_normal(params.D)
        traces = forward_replay(kind, params, image, tokens)
        oracle = scalar_replay_probs(kind.tag, params, image, tokens)
        assert len(traces) == len(oracle) == 2
        for t, trace in enumerate(traces):
            npt.assert_allclose(trace.softmax, oracle[t], rtol=1e-10, atol=1e-12)
            # p(next word) = softmax[tokens[t+1]]
            assert trace.softmax[tokens[t + 1]] == pytest.approx(oracle[t][tokens[t + 1]])


def test_init_inject_image_perturbation_propagates(rng):
    params = make_params(INIT, seed=12)
    tokens = random_caption(rng, params.V, 5)
    image = rng.standard_normal(params.D)
    delta = rng.standard_normal(params.D)
    delta /= np.linalg.norm(delta)
    tr_a = forward_replay(INIT, params, image, _full(tokens))
    tr_b = forward_replay(INIT, params, image + delta, _full(tokens))
    assert np.linalg.norm(image_projection(params, image) - image_projection(params, image + delta)) > 0
    for a, b in zip(tr_a, tr_b):
        assert np.linalg.norm(a.hidden - b.hidden) > 1e-9


def test_par_inject_image_enters_every_step(rng):
    params = make_params(PAR, seed=13)
    tokens = random_caption(rng, params.V, 5)
    image = rng.standard_normal(params.D)
    other = image + rng.standard_normal(params.D)
    tr_a = forward_replay(PAR, params, image, _full(tokens))
    tr_b = forward_replay(PAR, params, other, _full(tokens))
    for a, b in zip(tr_a, tr_b):
        assert np.linalg.norm(a.hidden - b.hidden) > 1e-9


def test_pre_inject_alignment(rng):
    params = make_params(PRE, seed=14)
    tokens = random_caption(rng, params.V, 5)
    traces = forward_replay(PRE, params, rng.standard_normal(params.D), _full(tokens))
    # one trace per word input; the image step emits none
    assert len(traces) == len(_full(tokens)) - 1
    assert traces[0].input_token == START_ID


def test_replay_softmax_is_normalized(kind, rng):
    params = make_params(kind, seed=15)
    traces = forward_replay(kind, params, rng.standard_normal(params.D),
                            _full(random_caption(rng, params.V, 4)))
    for trace in traces:
        assert abs(trace.softmax.sum() - 1.0) <= 1e-9
        assert np.all(trace.softmax > 0)


def test_replay_validation_errors(rng):
    params = make_params(INIT)
    image = rng.standard_normal(params.D)
    with pytest.raises(CaptionerError, match="START"):
        forward_replay(INIT, params, image, [3, END_ID])
    with pytest.raises(CaptionerError, match="unknown token"):
        forward_replay(INIT, params, image, [START_ID, params.V + 3])
    with pytest.raises(ShapeError):
        forward_replay(INIT, params, np.zeros(params.D + 1), [START_ID, END_ID])
    with pytest.raises(CaptionerError):
        forward_replay(INIT, params, image, [])


# --- generate ---------------------------------------------------------------------


def test_generate_forced_end(rng):
    params = make_params(INIT, seed=16)
    params.b_out[...] = 0.0
    params.b_out[END_ID] = 1e6
    assert generate(INIT, params, rng.standard_normal(params.D), 10) == [END_ID]


def test_generate_deterministic(rng):
    params = make_params(MERGE, seed=17)
    image = rng.standard_normal(params.D)
    assert generate(MERGE, params, image, 15) == generate(MERGE, params, image, 15)


def test_generate_tie_break_matches_linear_scan(rng):
    params = make_params(INIT, seed=18)
    params.W_out[...] = 0.0  # logits reduce to b_out: exact engineered ties
    params.b_out[...] = 0.0
    params.b_out[3] = 7.0
    params.b_out[5] = 7.0

    def scan_argmax(v):
        best = 0
        for i in range(1, len(v)):
            if v[i] > v[best]:
                best = i
        return best

    seq = generate(INIT, params, rng.standard_normal(params.D), 4)
    assert seq == [scan_argmax(params.b_out)] * 4 == [3, 3, 3, 3]

    params.b_out[2] = 7.0  # END joins the tie and has the lowest id
    assert generate(INIT, params, rng.standard_normal(params.D), 4) == [END_ID]


def test_generate_respects_max_len(rng):
    params = make_params(PAR, seed=19)
    params.b_out[END_ID] = -1e6  # END never wins
    assert len(generate(PAR, params, rng.standard_normal(params.D), 6)) == 6
    with pytest.raises(CaptionerError):
        generate(PAR, params, rng.standard_normal(params.D), 0)


# --- graph replay route -------------------------------------------------------------


def test_graph_replay_agrees_with_plain_replay(kind, rng):
    params = make_params(kind, seed=20)
    tokens = _full(random_caption(rng, params.V, 5))
    image = rng.standard_normal(params.D)
    traces = forward_replay(kind, params, image, tokens)
    replay = build_replay_graph(kind, params, image, tokens)
    for t, trace in enumerate(traces):
        npt.assert_allclose(replay.graph.value(replay.softmax[t]), trace.softmax,
                            rtol=1e-12, atol=1e-14)
        npt.assert_allclose(replay.graph.value(replay.hiddens[t]), trace.hidden,
                            rtol=1e-12, atol=1e-14)
        npt.assert_allclose(replay.graph.value(replay.multimodal[t]), trace.multimodal,
                            rtol=1e-12, atol=1e-14)
        prob = replay.graph.value(replay.probs[t])[0]
        assert prob == pytest.approx(trace.softmax[tokens[t + 1]], rel=1e-12)


def test_image_gradient_matches_finite_differences(kind, rng):
    # caption length 5, h=8, V=12, D=10 micro configuration
    params = make_params(kind, V=12, m=7, h=8, D=10, seed=21)
    tokens = _full(random_caption(rng, params.V, 5))
    image = rng.standard_normal(params.D)
    replay = build_replay_graph(kind, params, image, tokens)
    for t in range(len(tokens) - 1):
        grads = backward(replay.graph, replay.probs[t])

        def f_img(v, t=t):
            return oracle_next_prob(kind.tag, params, v, tokens, t)

        npt.assert_allclose(grads[replay.image], finite_diff(f_img, image, 1e-5),
                            rtol=1e-4, atol=1e-7,
                            err_msg=f"{kind.tag} image gradient at position {t}")


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(kind, tmp_path):
    params = make_params(kind, seed=22)
    path = tmp_path / "model.gprb"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.kind is kind
    assert (loaded.V, loaded.m, loaded.h, loaded.D) == (params.V, params.m, params.h, params.D)
    for (name, a), (_, b) in zip(params.tensors(), loaded.tensors()):
        assert np.array_equal(a, b), name


def test_checkpoint_validation_errors(tmp_path):
    params = make_params(INIT, seed=23)
    path = tmp_path / "model.gprb"
    save_params(params, path)
    blob = path.read_bytes()

    # corrupted dimension field: declared D no longer matches the payload
    # (header layout: magic 0:4, version 4:8, kind 8, V 9:13, m 13:17, h 17:21, D 21:25)
    import struct
    bad = bytearray(blob)
    bad[21:25] = struct.pack("<I", params.D + 3)
    (tmp_path / "bad_d.gprb").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad_d.gprb")

    (tmp_path / "trunc.gprb").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "trunc.gprb")

    (tmp_path / "magic.gprb").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_params(tmp_path / "magic.gprb")

    bad = bytearray(blob)
    bad[4:8] = struct.pack("<I", 99)
    (tmp_path / "ver.gprb").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_params(tmp_path / "ver.gprb")

    (tmp_path / "extra.gprb").write_bytes(blob + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(tmp_path / "extra.gprb")
