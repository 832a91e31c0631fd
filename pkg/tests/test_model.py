"""Model tests: branch shapes, zero-parameter fixed points, decoder
causality, parameter accounting, and the checkpoint container."""

import numpy as np
import pytest

from audet.data import AU_ORDER
from audet.errors import ContractViolation, FormatError
from audet.model import (
    CHECKPOINT_VERSION,
    ModelConfig,
    ModelParams,
    classify_aus,
    dynamic_forward,
    fuse,
    load_checkpoint,
    model_forward,
    parameter_count,
    save_checkpoint,
    static_forward,
)
from audet.tensor import Tensor, finite_difference_check, total, mul

from conftest import TINY_MODEL


def _inputs(config, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, (2, config.image_size, config.image_size)).astype(dtype)
    diff = rng.uniform(-1, 1, 146).astype(dtype)
    return image, diff


# ---------------------------------------------------------------------------
# configuration


def test_default_config_dimensions():
    cfg = ModelConfig()
    cfg.validate()
    assert cfg.conv_output_shape() == (32, 6, 6)
    assert parameter_count(cfg) == 94066


def test_parameter_count_matches_actual_parameters():
    for cfg in (ModelConfig(), TINY_MODEL):
        params = ModelParams.zeros(cfg)
        actual = sum(p.value.size for p in params.all_parameters())
        assert actual == parameter_count(cfg)


def test_config_validation_errors():
    with pytest.raises(ContractViolation, match="2 image planes"):
        ModelConfig(conv_spec=((3, 8, 3, 1),)).validate()
    with pytest.raises(ContractViolation, match="channels"):
        ModelConfig(conv_spec=((2, 8, 3, 1), (4, 8, 3, 1))).validate()
    with pytest.raises(ContractViolation, match="tanh"):
        ModelConfig(dynamic_hidden=((64, "relu"),)).validate()
    with pytest.raises(ContractViolation, match="smaller than kernel"):
        ModelConfig(image_size=8).validate()


def test_config_kv_round_trip():
    for cfg in (ModelConfig(), TINY_MODEL):
        assert ModelConfig.from_kv(cfg.to_kv(), "test") == cfg


def test_config_from_kv_rejects_garbage():
    kv = ModelConfig().to_kv()
    kv["conv_spec"] = "2:16:5"
    with pytest.raises(FormatError, match="config"):
        ModelConfig.from_kv(kv, "test")
    with pytest.raises(FormatError, match="keys"):
        ModelConfig.from_kv({"image_size": "64"}, "test")


# ---------------------------------------------------------------------------
# forward passes


def test_branch_shapes_and_ranges():
    params = ModelParams.init(TINY_MODEL, seed=1, dtype=np.float64)
    image, diff = _inputs(TINY_MODEL)
    h_static = static_forward(params, image)
    assert h_static.shape == (TINY_MODEL.static_gru_hidden,)
    assert np.all(np.abs(h_static.value) <= 1.0)
    h_dynamic = dynamic_forward(params, diff)
    assert h_dynamic.shape == (TINY_MODEL.dynamic_hidden[-1][0],)
    assert np.all(np.abs(h_dynamic.value) < 1.0)
    fused = fuse(params, h_dynamic, h_static)
    assert fused.shape == (TINY_MODEL.fusion_out,)
    assert np.all(np.abs(fused.value) < 1.0)

    result = model_forward(params, image, diff)
    assert result.probs.shape == (8,)
    assert result.probs.dtype == np.float64
    assert np.all((result.probs > 0.0) & (result.probs < 1.0))
    assert len(result.logits) == 8
    assert all(lg.shape == (2,) for lg in result.logits)


def test_zero_params_give_indifferent_predictions():
    params = ModelParams.zeros(TINY_MODEL, dtype=np.float64)
    image, diff = _inputs(TINY_MODEL)
    h_static = static_forward(params, image)
    np.testing.assert_array_equal(h_static.value, np.zeros(TINY_MODEL.static_gru_hidden))
    h_dynamic = dynamic_forward(params, diff)
    np.testing.assert_array_equal(h_dynamic.value, np.zeros(TINY_MODEL.dynamic_hidden[-1][0]))
    result = model_forward(params, image, diff)
    np.testing.assert_array_equal(result.probs, np.full(8, 0.5))


def test_fusion_concatenates_dynamic_before_static():
    params = ModelParams.zeros(TINY_MODEL, dtype=np.float64)
    d = TINY_MODEL.dynamic_hidden[-1][0]
    s = TINY_MODEL.static_gru_hidden
    # weights that copy the dynamic half and ignore the static half
    w = np.zeros((TINY_MODEL.fusion_out, d + s))
    w[:d, :d] = np.eye(d)
    params.fusion_weights.value[...] = w
    rng = np.random.default_rng(3)
    dynamic = Tensor(rng.uniform(-1, 1, d))
    static = Tensor(rng.uniform(-1, 1, s))
    fused = fuse(params, dynamic, static)
    np.testing.assert_allclose(fused.value[:d], np.tanh(dynamic.value), atol=1e-12)


def test_dynamic_branch_input_gradient():
    # gradient with respect to the branch input, against finite differences
    from audet.tensor import Parameter

    params = ModelParams.init(TINY_MODEL, seed=2, dtype=np.float64)
    rng = np.random.default_rng(4)
    diff = Parameter(rng.uniform(-1, 1, 146), "diff_input")
    weights = Tensor(rng.uniform(-1, 1, TINY_MODEL.dynamic_hidden[-1][0]))

    def loss_fn():
        from audet.model import _ACTIVATIONS
        from audet.tensor import linear

        x = diff
        for (w, b), (_, act) in zip(params.dynamic_layers, TINY_MODEL.dynamic_hidden):
            x = _ACTIVATIONS[act](linear(w, b, x))
        return total(mul(x, weights))

    assert finite_difference_check(loss_fn, [diff], 1e-3) <= 1e-5


def test_decoder_causality():
    params = ModelParams.init(TINY_MODEL, seed=5, dtype=np.float64)
    image, diff = _inputs(TINY_MODEL, seed=6)
    base = model_forward(params, image, diff).probs
    rng = np.random.default_rng(7)
    for j in (1, 4, 7):
        bumped = params.copy()
        bumped.au_table.value[j] += rng.uniform(0.5, 1.0, TINY_MODEL.au_embedding_dim)
        probs = model_forward(bumped, image, diff).probs
        np.testing.assert_array_equal(probs[:j], base[:j])
        assert probs[j] != base[j]


def test_model_forward_accepts_frame_sample():
    from audet.data import SynthConfig, generate_synthetic, landmark_diffs

    video = generate_synthetic(
        SynthConfig(videos=1, frames_per_video=3, seed=8, image_size=TINY_MODEL.image_size)
    )[0]
    params = ModelParams.init(TINY_MODEL, seed=9, dtype=np.float32)
    diff = landmark_diffs(video)[1].astype(np.float32)
    by_frame = model_forward(params, video.frames[1], diff)
    by_array = model_forward(params, video.frames[1].image_stack().astype(np.float32), diff)
    np.testing.assert_array_equal(by_frame.probs, by_array.probs)


def test_static_forward_rejects_wrong_image():
    params = ModelParams.zeros(TINY_MODEL)
    with pytest.raises(ContractViolation, match="image"):
        static_forward(params, np.zeros((2, 8, 8), dtype=np.float32))
    with pytest.raises(ContractViolation, match="diff"):
        dynamic_forward(params, np.zeros(10, dtype=np.float32))


def test_init_is_seeded_and_distinct():
    a = ModelParams.init(TINY_MODEL, seed=11)
    b = ModelParams.init(TINY_MODEL, seed=11)
    c = ModelParams.init(TINY_MODEL, seed=12)
    for pa, pb in zip(a.all_parameters(), b.all_parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)
    assert any(
        not np.array_equal(pa.value, pc.value)
        for pa, pc in zip(a.all_parameters(), c.all_parameters())
    )


def test_copy_is_independent():
    params = ModelParams.init(TINY_MODEL, seed=13)
    clone = params.copy()
    clone.au_table.value[0, 0] += 1.0
    assert params.au_table.value[0, 0] != clone.au_table.value[0, 0]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path):
    params = ModelParams.init(TINY_MODEL, seed=21, dtype=np.float32)
    path = save_checkpoint(params, tmp_path / "m.auck")
    loaded = load_checkpoint(path)
    assert loaded.config == TINY_MODEL
    for pa, pb in zip(params.all_parameters(), loaded.all_parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.value, pb.value)
    image, diff = _inputs(TINY_MODEL, seed=22, dtype=np.float32)
    np.testing.assert_array_equal(
        model_forward(params, image, diff).probs, model_forward(loaded, image, diff).probs
    )


def test_checkpoint_rejects_bad_magic(tmp_path):
    params = ModelParams.init(TINY_MODEL, seed=23)
    path = save_checkpoint(params, tmp_path / "m.auck")
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_names_both_versions(tmp_path):
    params = ModelParams.init(TINY_MODEL, seed=24)
    path = save_checkpoint(params, tmp_path / "m.auck")
    blob = bytearray(path.read_bytes())
    blob[4:6] = (7).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert "7" in str(err.value) and str(CHECKPOINT_VERSION) in str(err.value)


def test_checkpoint_rejects_truncation(tmp_path):
    from audet.errors import CorruptionError

    params = ModelParams.init(TINY_MODEL, seed=25)
    path = save_checkpoint(params, tmp_path / "m.auck")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 30])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    params = ModelParams.init(TINY_MODEL, seed=26)
    path = save_checkpoint(params, tmp_path / "m.auck")
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_float64_params_stored_as_float32(tmp_path):
    params = ModelParams.init(TINY_MODEL, seed=27, dtype=np.float64)
    path = save_checkpoint(params, tmp_path / "m.auck")
    loaded = load_checkpoint(path)
    assert loaded.dtype == np.float32
    for pa, pb in zip(params.all_parameters(), loaded.all_parameters()):
        np.testing.assert_array_equal(pa.value.astype(np.float32), pb.value)
