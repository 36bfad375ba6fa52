import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpnet import model as M
from qpnet import tensor as tn
from qpnet.errors import CheckpointError, CheckpointVersionError, ConfigurationError, DataError
from qpnet.gradcheck import tiny_config
from qpnet.model import ADAPTIVE, FIXED, AuxTrack, MacroblockSpec, ModelConfig
from qpnet.tensor import AdamState, Tensor

FS = 22050


def cfg(*blocks, **kw):
    return ModelConfig(macroblocks=tuple(MacroblockSpec(*b) for b in blocks), **kw)


# dilation factor


def test_factor_500hz_a8_is_6():
    assert M.compute_dilation_factor(500, FS, 8) == 6


def test_factor_clamps_to_one():
    assert M.compute_dilation_factor(350, FS, 64) == 1
    for f in (345, 400, 800):
        assert M.compute_dilation_factor(f, FS, 64) == 1


def test_factor_50hz_a8_is_55():
    assert FS / (50 * 8) == pytest.approx(55.125)
    assert M.compute_dilation_factor(50, FS, 8) == 55


def test_factor_round_half_up():
    # fs / (f0 * a) == 2.5 exactly
    assert M.compute_dilation_factor(FS / 2.5, FS, 1) == 3


def test_factor_rejects_non_positive():
    with pytest.raises(DataError):
        M.compute_dilation_factor(0.0, FS, 8)


@settings(max_examples=200, deadline=None)
@given(st.floats(1, 5000), st.floats(1, 5000), st.sampled_from([1, 2, 4, 8, 16, 32, 64]))
def test_factor_monotone_in_f0(fa, fb, a):
    hi, lo = max(fa, fb), min(fa, fb)
    assert M.compute_dilation_factor(hi, FS, a) <= M.compute_dilation_factor(lo, FS, a)


# F0 interpolation


def test_interpolate_interior_gap():
    f0 = [100, 0, 0, 0, 200]
    voiced = [True, False, False, False, True]
    np.testing.assert_allclose(M.interpolate_f0(f0, voiced), [100, 125, 150, 175, 200])


def test_interpolate_fully_voiced_identity():
    f0 = np.array([110.0, 120.0, 130.0])
    np.testing.assert_array_equal(M.interpolate_f0(f0, [True] * 3), f0)


def test_interpolate_holds_edges():
    out = M.interpolate_f0([0, 0, 150, 160, 0], [False, False, True, True, False])
    np.testing.assert_array_equal(out, [150, 150, 150, 160, 160])


def test_interpolate_all_unvoiced_rejected():
    with pytest.raises(DataError):
        M.interpolate_f0([0, 0], [False, False])


# dilation plans


def test_fixed_plan_doubles():
    plan = M.build_dilation_plan(cfg((FIXED, 1, 4)), AuxTrack.constant(150, 20))
    for offs, d in zip(plan.offsets, [1, 2, 4, 8]):
        np.testing.assert_array_equal(offs, d)


def test_adaptive_plan_scales_by_factor():
    config = cfg((ADAPTIVE, 1, 4), dense_factor=8)
    plan = M.build_dilation_plan(config, AuxTrack.constant(150, 20))
    for offs, d in zip(plan.offsets, [18, 36, 72, 144]):
        np.testing.assert_array_equal(offs, d)


def test_unit_factor_plan_equals_fixed_plan():
    adaptive = cfg((FIXED, 3, 4), (ADAPTIVE, 1, 4), dense_factor=64)
    aux = AuxTrack.constant(400, 50)
    a = M.build_dilation_plan(adaptive, aux)
    f = M.build_dilation_plan(adaptive.as_fixed(), aux)
    assert all(np.array_equal(x, y) for x, y in zip(a.offsets, f.offsets))
    forced = M.build_dilation_plan(cfg((ADAPTIVE, 2, 3)), AuxTrack.constant(20, 10), force_unit_factor=True)
    fixed = M.build_dilation_plan(cfg((FIXED, 2, 3)), AuxTrack.constant(20, 10))
    assert all(np.array_equal(x, y) for x, y in zip(forced.offsets, fixed.offsets))


def test_plan_time_variant_track():
    f0 = np.array([100.0] * 5 + [200.0] * 5)
    aux = AuxTrack(f0, np.ones(10, bool), f0 / 400)
    plan = M.build_dilation_plan(cfg((ADAPTIVE, 1, 2), dense_factor=8), aux)
    np.testing.assert_array_equal(plan.factors, [28] * 5 + [14] * 5)
    np.testing.assert_array_equal(plan.offsets[1], 2 * plan.factors)


# receptive fields


@pytest.mark.parametrize(
    "name,expected", [("WNf", 3070), ("WNc", 61), ("pQPNet", 61), ("QPNet", 61), ("rQPNet", 61)]
)
def test_receptive_field_lengths(name, expected):
    assert M.receptive_field_length(M.named_config(name)) == expected


def test_receptive_field_qpnet_fixed_part():
    assert M.receptive_field_length(cfg((FIXED, 3, 4))) == 46


def test_effective_receptive_field():
    aux = AuxTrack.constant(150, 10)
    p = M.named_config("pQPNet", dense_factor=8)
    assert M.effective_receptive_field_length(p, aux, 3) == 60 * 18 + 1 == 1081
    q = M.named_config("QPNet", dense_factor=8)
    assert M.effective_receptive_field_length(q, aux, 3) == 46 + 15 * 18 == 316
    unit = M.named_config("pQPNet", dense_factor=64)
    assert M.effective_receptive_field_length(unit, AuxTrack.constant(400, 4), 0) == 61


# parameters


def test_parameter_counts_follow_layer_counts():
    counts = {n: M.parameter_count(M.named_config(n)) for n in M.ARCHITECTURES}
    assert counts["QPNet"] == counts["WNc"] == counts["pQPNet"] == counts["rQPNet"]
    assert counts["WNf"] > counts["WNc"]
    init = M.init_params(M.named_config("WNc"))
    assert init.count() == counts["WNc"]


def test_paper_profile_is_larger_with_same_ordering():
    for n in M.ARCHITECTURES:
        assert M.parameter_count(M.named_config(n, profile="paper")) > M.parameter_count(M.named_config(n))
    big = M.parameter_count(M.named_config("WNf", profile="paper"))
    small = M.parameter_count(M.named_config("WNc", profile="paper"))
    assert big > small == M.parameter_count(M.named_config("pQPNet", profile="paper"))


def test_config_roundtrip_and_validation():
    c = M.named_config("QPNet", dense_factor=4)
    assert ModelConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ConfigurationError):
        ModelConfig(macroblocks=())
    with pytest.raises(ConfigurationError):
        cfg((FIXED, 1, 1), dense_factor=0)
    with pytest.raises(ConfigurationError):
        M.named_config("nope")


# residual block


def _block_inputs(rng, R=4, G=4, S=4, T=32, A=1):
    bp = {
        "w_cur": rng.standard_normal((2 * G, R)),
        "w_prev": rng.standard_normal((2 * G, R)),
        "w_aux": rng.standard_normal((2 * G, A)),
        "bias": rng.standard_normal(2 * G),
        "w_res": rng.standard_normal((R, G)),
        "b_res": rng.standard_normal(R),
        "w_skip": rng.standard_normal((S, G)),
        "b_skip": rng.standard_normal(S),
    }
    x = rng.standard_normal((R, T))
    aux = rng.standard_normal((A, T))
    offsets = rng.integers(1, 12, size=T)
    return bp, x, aux, offsets


def _block_oracle(bp, x, aux, offsets):
    R, T = x.shape
    G = bp["w_res"].shape[1]
    S = bp["w_skip"].shape[0]
    res = np.zeros((R, T))
    skip = np.zeros((S, T))
    for t in range(T):
        s = t - offsets[t]
        past = [x[k, s] if s >= 0 else 0.0 for k in range(R)]
        z = []
        for g in range(G):
            uf, ug = bp["bias"][g], bp["bias"][G + g]
            for k in range(R):
                uf += bp["w_cur"][g, k] * x[k, t] + bp["w_prev"][g, k] * past[k]
                ug += bp["w_cur"][G + g, k] * x[k, t] + bp["w_prev"][G + g, k] * past[k]
            for a in range(aux.shape[0]):
                uf += bp["w_aux"][g, a] * aux[a, t]
                ug += bp["w_aux"][G + g, a] * aux[a, t]
            z.append(math.tanh(uf) / (1 + math.exp(-ug)))
        for c in range(R):
            res[c, t] = x[c, t] + bp["b_res"][c] + sum(bp["w_res"][c, g] * z[g] for g in range(G))
        for c in range(S):
            skip[c, t] = bp["b_skip"][c] + sum(bp["w_skip"][c, g] * z[g] for g in range(G))
    return res, skip


def _run_block(bp, x, aux, offsets):
    tensors = {k: Tensor(v) for k, v in bp.items()}
    res, skip = M.residual_block_forward(Tensor(x), Tensor(aux), offsets, tensors, bp["w_res"].shape[1])
    return res.data, skip.data


def test_block_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    bp, x, aux, offsets = _block_inputs(rng)
    res, skip = _run_block(bp, x, aux, offsets)
    ores, oskip = _block_oracle(bp, x, aux, offsets)
    np.testing.assert_allclose(res, ores, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(skip, oskip, rtol=1e-6, atol=1e-12)


def test_block_zero_weights_passthrough():
    rng = np.random.default_rng(1)
    bp, x, aux, offsets = _block_inputs(rng)
    bp = {k: np.zeros_like(v) for k, v in bp.items()}
    res, skip = _run_block(bp, x, aux, offsets)
    np.testing.assert_array_equal(res, x)
    np.testing.assert_array_equal(skip, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 31), st.integers(0, 2**20))
def test_block_is_causal(t, seed):
    rng = np.random.default_rng(seed)
    bp, x, aux, offsets = _block_inputs(rng)
    base, _ = _run_block(bp, x, aux, offsets)
    x2 = x.copy()
    x2[:, t] += rng.standard_normal(x.shape[0])
    moved, _ = _run_block(bp, x2, aux, offsets)
    np.testing.assert_array_equal(base[:, :t], moved[:, :t])


def test_block_plan_length_mismatch():
    rng = np.random.default_rng(2)
    bp, x, aux, offsets = _block_inputs(rng)
    with pytest.raises(ConfigurationError):
        _run_block(bp, x, aux, offsets[:-1])


# full forward


def _trained_like(config, seed=0):
    return M.init_params(config, seed, zero_head=False)


def test_forward_causality_audit():
    config = tiny_config((FIXED, ADAPTIVE), channels=6, blocks=3)
    params = _trained_like(config)
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 256, size=80)
    aux = AuxTrack.constant(3000, 80)
    with tn.no_grad():
        base = M.forward_teacher_forced(params, config, codes, aux).data
        for t in (1, 17, 50, 79):
            changed = codes.copy()
            changed[t:] = rng.integers(0, 256, size=80 - t)
            out = M.forward_teacher_forced(params, config, changed, aux).data
            np.testing.assert_array_equal(out[:, : t + 1], base[:, : t + 1])


def test_zero_head_gives_uniform_loss():
    config = M.named_config("QPNet")
    params = M.init_params(config, 0)
    codes = np.random.default_rng(0).integers(0, 256, size=300)
    with tn.no_grad():
        logits = M.forward_teacher_forced(params, config, codes, AuxTrack.constant(200, 300))
        loss = float(tn.softmax_cross_entropy(logits, codes).data)
    assert abs(loss - math.log(256)) < 1e-3


def test_softmax_columns_normalized():
    config = tiny_config()
    params = _trained_like(config)
    with tn.no_grad():
        logits = M.forward_teacher_forced(params, config, np.arange(40) % 256, AuxTrack.constant(2000, 40)).data
    np.testing.assert_allclose(M.softmax_columns(logits).sum(axis=0), 1.0, atol=1e-6)


def test_unit_factor_forward_matches_fixed_network():
    q = M.named_config("QPNet", dense_factor=64)
    params = _trained_like(q, 3)
    fixed = q.as_fixed()
    fixed_params = M.NetworkParams(fixed, params.tensors)
    codes = np.random.default_rng(1).integers(0, 256, size=500)
    aux = AuxTrack.constant(400, 500)
    with tn.no_grad():
        a = M.forward_teacher_forced(params, q, codes, aux).data
        b = M.forward_teacher_forced(fixed_params, fixed, codes, aux).data
        forced = M.forward_teacher_forced(
            params, q, codes, AuxTrack.constant(100, 500), plan=M.build_dilation_plan(q, aux, True)
        ).data
    assert a.tobytes() == b.tobytes()
    c = M.forward_teacher_forced(fixed_params, fixed, codes, AuxTrack.constant(100, 500)).data
    assert forced.tobytes() == c.tobytes()


def test_forward_length_mismatch():
    config = tiny_config()
    params = M.init_params(config)
    with pytest.raises(DataError):
        M.forward_teacher_forced(params, config, np.zeros(10, int), AuxTrack.constant(100, 9))


def test_shifted_input():
    np.testing.assert_array_equal(M.shifted_input([5, 6, 7]), [128, 5, 6])


# checkpoints


def _adam_after_step(params, config):
    adam = AdamState.for_params(params.values(), learning_rate=1e-3)
    codes = np.random.default_rng(0).integers(0, 256, size=64)
    loss = tn.softmax_cross_entropy(M.forward_teacher_forced(params, config, codes, AuxTrack.constant(300, 64)), codes)
    tn.backward(loss)
    tn.adam_step(params.values(), [t.grad for t in params.values()], adam)
    params.zero_grad()
    return adam


def test_checkpoint_roundtrip(tmp_path):
    config = tiny_config((FIXED, ADAPTIVE))
    params = _trained_like(config)
    adam = _adam_after_step(params, config)
    path = tmp_path / "ck.npz"
    M.save_checkpoint(path, params, adam, 1, meta={"note": "x"})
    ck = M.load_checkpoint(path)
    assert ck.config == config and ck.step == 1 and ck.meta == {"note": "x"}
    for k in params.names():
        assert ck.params[k].data.tobytes() == params[k].data.tobytes()
    assert ck.adam.step_count == 1
    for a, b in zip(ck.adam.first_moment + ck.adam.second_moment, adam.first_moment + adam.second_moment):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_wrong_version(tmp_path):
    config = tiny_config()
    path = tmp_path / "ck.npz"
    M.save_checkpoint(path, M.init_params(config))
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(arrays["header"].tobytes())
    header["version"] = "qpnet-checkpoint/0"
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(CheckpointVersionError, match="version"):
        M.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    config = tiny_config()
    path = tmp_path / "ck.npz"
    M.save_checkpoint(path, M.init_params(config))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        M.load_checkpoint(path)

