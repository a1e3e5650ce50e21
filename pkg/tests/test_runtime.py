import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamformer import (
    ConfigError,
    ModelConfig,
    check_equivalence,
    encoder_forward_parallel,
    encoder_forward_streaming,
    gen_weights,
    leak_check,
    parameter_count,
    plan_blocks,
    stream_flush,
    stream_open,
    stream_push,
    superframe_stack,
)
from streamformer.numerics import precision
from streamformer.weights import deserialize, serialize


class TestSuperframes:
    def test_80ms_slots(self, rng):
        frames = rng.standard_normal((16, 80))
        out = superframe_stack(frames, 8)
        assert out.shape == (2, 640)
        assert np.array_equal(out[1, 80:160], frames[9])

    def test_factor_one(self, rng):
        frames = rng.standard_normal((5, 3))
        assert np.array_equal(superframe_stack(frames, 1), frames)

    def test_remainder_dropped(self, rng):
        assert superframe_stack(rng.standard_normal((17, 2)), 8).shape == (2, 16)

    def test_remainder_buffered_while_streaming(self, rng):
        cfg = ModelConfig(stack_factor=8, input_dim=2, num_layers=0, block_size=1, lookahead=0)
        state = stream_open(cfg, gen_weights(cfg))
        out = stream_push(state, rng.standard_normal((17, 2)))
        assert sum(o.shape[0] for o in out) == 2 and state.raw.shape == (1, 2)


class TestPlan:
    def test_by_definition(self):
        plan = plan_blocks(10, 4, 1)
        assert plan.centers == ((0, 4), (4, 8), (8, 10))
        assert plan.lookaheads == ((4, 5), (8, 9), (10, 10))

    def test_single_block_no_lookahead(self):
        plan = plan_blocks(4, 4, 0)
        assert plan.centers == ((0, 4),) and plan.lookaheads == ((4, 4),)

    def test_causal_400ms_block(self):
        # 400 ms block, no lookahead, 80 ms slots
        plan = plan_blocks(5, 5, 0)
        assert len(plan) == 1 and plan.centers[0] == (0, 5)
        assert ModelConfig(block_size=5, lookahead=0, stack_factor=8, kernel=7).first_emission_ms == 400

    @given(st.integers(0, 60), st.integers(1, 7), st.integers(0, 4))
    def test_partition(self, n, c, r):
        plan = plan_blocks(n, c, r)
        assert len(plan) == -(-n // c)
        covered = [t for s, e in plan.centers for t in range(s, e)]
        assert covered == list(range(n))
        for (s, e), (ls, le) in zip(plan.centers, plan.lookaheads):
            assert ls == e and le == min(e + r, n)


class TestConfig:
    def test_desk_defaults(self, desk_cfg):
        assert (desk_cfg.num_layers, desk_cfg.model_dim, desk_cfg.num_heads) == (3, 16, 4)
        assert (desk_cfg.block_size, desk_cfg.lookahead, desk_cfg.left_context) == (4, 1, 8)

    def test_large_geometry_validates(self):
        cfg = ModelConfig(
            input_dim=80, stack_factor=8, model_dim=512, ffn_dim=2048, num_layers=20, num_heads=8,
            block_size=4, lookahead=1, left_context=30, memory_slots=0, kernel=7,
        )
        assert cfg.superframe_dim == 640 and cfg.slot_ms == 80

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError) as err:
            ModelConfig(model_dim=10, num_heads=4)
        assert err.value.field == "num_heads"

    @pytest.mark.parametrize("field,value", [("block_size", 0), ("lookahead", -1), ("kernel", 0), ("precision", "float16"), ("model_dim", 2.5)])
    def test_field_errors(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: value})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="blocksize"):
            ModelConfig.from_mapping({"blocksize": 4})

    def test_file_round_trip(self, tmp_path):
        cfg = ModelConfig(num_layers=2, use_conv=False)
        cfg.dump(tmp_path / "m.yaml")
        assert ModelConfig.load(tmp_path / "m.yaml") == cfg

    def test_nested_rejected(self, tmp_path):
        (tmp_path / "m.yaml").write_text("model_dim:\n  a: 1\n")
        with pytest.raises(ConfigError):
            ModelConfig.load(tmp_path / "m.yaml")

    def test_digest_tracks_fields(self, desk_cfg):
        assert desk_cfg.digest() == ModelConfig().digest() != desk_cfg.replace(kernel=5).digest()


class TestWeights:
    def test_seeded(self, desk_cfg):
        assert serialize(gen_weights(desk_cfg, 5)) == serialize(gen_weights(desk_cfg, 5))
        assert serialize(gen_weights(desk_cfg, 5)) != serialize(gen_weights(desk_cfg, 6))

    def test_round_trip(self, desk_weights):
        blob = serialize(desk_weights)
        assert serialize(deserialize(blob)) == blob

    def test_desk_parameter_count(self, desk_cfg, desk_weights):
        # 128 input projection + 3 x 4116 per layer, counted by hand
        assert desk_weights.num_parameters == parameter_count(desk_cfg) == 12476

    @pytest.mark.parametrize("flags", [(c, m, t, s) for c in (0, 1) for m in (0, 1) for t in (0, 1) for s in (0, 2)])
    def test_parameter_formula(self, flags):
        c, m, t, s = flags
        cfg = ModelConfig(use_conv=bool(c), use_macaron=bool(m), use_talking_heads=bool(t), memory_slots=s, kernel=5)
        assert gen_weights(cfg).num_parameters == parameter_count(cfg)

    def test_init_ranges(self, desk_cfg, desk_weights):
        lw = desk_weights.layers[0]
        assert np.abs(lw.attn.w_q).max() <= 1 / np.sqrt(16)
        assert np.array_equal(lw.norm_final.gain, np.ones(16))
        assert np.array_equal(lw.compress, np.full(4, 0.25))
        assert np.abs(lw.talking_heads.w_l - np.eye(4)).max() < 0.1

    def test_truncated_file(self, desk_weights):
        from streamformer.weights import WeightFileError

        with pytest.raises(WeightFileError):
            deserialize(serialize(desk_weights)[:-3])
        with pytest.raises(WeightFileError, match="magic"):
            deserialize(b"nonsense" + serialize(desk_weights)[8:])


class TestEncoder:
    def test_no_layers_is_projection(self, rng):
        cfg = ModelConfig(num_layers=0)
        w = gen_weights(cfg, 2)
        frames = rng.standard_normal((11, 4))
        expected = superframe_stack(frames, 2) @ w.input_proj
        assert np.max(np.abs(encoder_forward_parallel(frames, cfg, w) - expected)) <= 1e-12
        assert check_equivalence(frames, cfg, w).max_abs_diff == 0.0

    def test_corrupted_conv_state_detected(self, rng, desk_cfg, desk_weights):
        report = check_equivalence(rng.standard_normal((40, 4)), desk_cfg, desk_weights, corrupt=True)
        assert report.max_abs_diff > 1e-3
        row, _ = report.location
        assert row >= desk_cfg.block_size  # first corrupted output is in block 1 or later

    def test_input_shape_checked(self, desk_cfg, desk_weights):
        with pytest.raises(ValueError, match="shape"):
            encoder_forward_parallel(np.zeros((10, 5)), desk_cfg, desk_weights)

    def test_weights_for_other_config(self, desk_cfg, desk_weights):
        with pytest.raises(ValueError):
            encoder_forward_parallel(np.zeros((10, 4)), desk_cfg.replace(lookahead=2), desk_weights)

    def test_empty_utterance(self, desk_cfg, desk_weights):
        assert encoder_forward_parallel(np.zeros((1, 4)), desk_cfg, desk_weights).shape == (0, 16)
        assert encoder_forward_streaming(np.zeros((1, 4)), desk_cfg, desk_weights).shape == (0, 16)

    def test_identity_talking_heads_equal_multi_head(self, rng, desk_cfg):
        w_th = gen_weights(desk_cfg, 3, th_epsilon=0.0)
        cfg_mha = desk_cfg.replace(use_talking_heads=False)
        w_mha = dataclasses.replace(
            w_th, config=cfg_mha, layers=tuple(dataclasses.replace(lw, talking_heads=None) for lw in w_th.layers)
        )
        frames = rng.standard_normal((50, 4))
        assert np.array_equal(
            encoder_forward_parallel(frames, desk_cfg, w_th), encoder_forward_parallel(frames, cfg_mha, w_mha)
        )

    def test_float32_mode(self, rng, desk_cfg, desk_weights):
        frames = rng.standard_normal((40, 4))
        with precision("float32"):
            out = encoder_forward_streaming(frames, desk_cfg, desk_weights)
            report = check_equivalence(frames, desk_cfg, desk_weights)
        assert out.dtype == np.float32
        assert report.dual_path_diff == 0.0
        assert 0.0 < report.max_abs_diff < 1e-4


class TestStreamingSession:
    def test_chunking_invariance(self, rng, desk_cfg, desk_weights):
        frames = rng.standard_normal((61, 4))
        whole = encoder_forward_streaming(frames, desk_cfg, desk_weights)
        for chunk in (1, 3, 7):
            assert np.array_equal(encoder_forward_streaming(frames, desk_cfg, desk_weights, chunk=chunk), whole)

    def test_zero_length_push(self, desk_cfg, desk_weights):
        state = stream_open(desk_cfg, desk_weights)
        assert stream_push(state, np.zeros((0, 4))) == []
        assert state.raw.shape[0] == 0 and state.pending.shape[0] == 0 and state.blocks_done == 0

    def test_short_utterance_all_at_flush(self, rng, desk_cfg, desk_weights):
        state = stream_open(desk_cfg, desk_weights)
        assert stream_push(state, rng.standard_normal((9, 4))) == []
        out = stream_flush(state)
        assert sum(o.shape[0] for o in out) == 4

    def test_push_after_flush(self, desk_cfg, desk_weights):
        state = stream_open(desk_cfg, desk_weights)
        stream_flush(state)
        with pytest.raises(RuntimeError):
            stream_push(state, np.zeros((1, 4)))

    def test_total_rows(self, rng, desk_cfg, desk_weights):
        for t in (0, 1, 2, 9, 10, 33):
            out = encoder_forward_streaming(rng.standard_normal((t, 4)), desk_cfg, desk_weights, chunk=5)
            assert out.shape == (t // 2, 16)

    def test_cache_bounds(self, rng, desk_cfg, desk_weights):
        state = stream_open(desk_cfg, desk_weights)
        for _ in range(30):
            stream_push(state, rng.standard_normal((3, 4)))
            for ls in state.layers:
                assert ls.keys.shape[0] <= desk_cfg.left_context
                assert len(ls.memory) <= desk_cfg.memory_slots + desk_cfg.memory_offset
                assert ls.conv.tail.shape == (desk_cfg.kernel - 1, 16)
            assert state.pending.shape[0] < desk_cfg.block_size + desk_cfg.lookahead

    @pytest.mark.parametrize("c,r,sf", [(4, 1, 2), (4, 1, 8), (5, 0, 8), (1, 2, 3)])
    def test_first_emission_latency(self, rng, c, r, sf):
        cfg = ModelConfig(block_size=c, lookahead=r, stack_factor=sf, num_layers=1)
        state = stream_open(cfg, gen_weights(cfg))
        for n in range(1, 200):
            if stream_push(state, rng.standard_normal((1, 4))):
                break
        assert n * 10 == cfg.first_emission_ms == (c + r) * sf * 10


@st.composite
def model_configs(draw):
    h = draw(st.sampled_from([1, 2, 4]))
    return ModelConfig(
        input_dim=draw(st.integers(1, 5)),
        stack_factor=draw(st.integers(1, 3)),
        num_layers=draw(st.integers(0, 4)),
        num_heads=h,
        model_dim=h * draw(st.integers(1, 32 // (2 * h) or 1)),
        ffn_dim=draw(st.integers(1, 16)),
        block_size=draw(st.integers(1, 5)),
        lookahead=draw(st.integers(0, 2)),
        left_context=draw(st.sampled_from([0, 4, 8])),
        memory_slots=draw(st.sampled_from([0, 2])),
        memory_offset=draw(st.sampled_from([0, 2])),
        kernel=draw(st.sampled_from([1, 3, 7])),
        use_conv=draw(st.booleans()),
        use_macaron=draw(st.booleans()),
        use_talking_heads=draw(st.booleans()),
    )


@settings(max_examples=40, deadline=None)
@given(cfg=model_configs(), t=st.integers(0, 50), seed=st.integers(0, 2**31))
def test_full_stack_equivalence_property(cfg, t, seed):
    w = gen_weights(cfg, seed % 997, th_epsilon=0.2)
    frames = np.random.default_rng(seed).standard_normal((t, cfg.input_dim))
    report = check_equivalence(frames, cfg, w, chunk=(seed % 5) + 1)
    assert report.max_abs_diff <= 1e-9


@settings(max_examples=10, deadline=None)
@given(cfg=model_configs(), seed=st.integers(0, 2**31))
def test_leak_bound_property(cfg, seed):
    w = gen_weights(cfg, 3)
    frames = np.random.default_rng(seed).standard_normal((3 * cfg.block_size * cfg.stack_factor + 3, cfg.input_dim))
    assert leak_check(frames, cfg, w, seed=seed).max_change == 0.0
