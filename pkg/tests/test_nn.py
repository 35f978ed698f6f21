import numpy as np
import pytest

from itmn import tensor as T
from itmn.gradcheck import max_rel_error
from itmn.loss import mse
from itmn.nn import (GENERATOR_DECODER_MAPS, GENERATOR_ENCODER_MAPS,
                     ParamsFormatError, build_discriminator, build_generator,
                     discriminator_forward, generator_forward, load_params,
                     params_equal, save_params)


def unit_input(shape, seed=0):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.uniform(0, 1, shape).astype(np.float32))


# --------------------------------------------------------------------------
# generator structure
# --------------------------------------------------------------------------

def test_generator_has_ten_layers():
    g = build_generator(0.25, seed=0)
    assert len(g.encoder) == 5 and len(g.decoder) == 5
    assert all(l.spec.kind == "conv" for l in g.encoder)
    assert all(l.spec.kind == "deconv" for l in g.decoder)


def test_generator_output_layer_is_plain_sigmoid():
    g = build_generator(0.25, seed=0)
    last = g.decoder[-1]
    assert last.spec.act == "sigmoid" and not last.spec.norm and last.spec.n == 3
    assert g.encoder[0].bn is None          # first encoder layer skips BN


def test_width_multiplier_quarters_feature_maps():
    g = build_generator(0.25, seed=0)
    assert [l.spec.n for l in g.encoder] == [n // 4 for n in GENERATOR_ENCODER_MAPS]
    assert [l.spec.n for l in g.decoder][:-1] == \
        [n // 4 for n in GENERATOR_DECODER_MAPS[:-1]]
    tiny = build_generator(1 / 512, seed=0)
    assert all(l.spec.n >= 1 for l in tiny.encoder)   # min 1, never zero


def test_nonpositive_multiplier_rejected():
    with pytest.raises(ValueError):
        build_generator(0.0, seed=0)
    with pytest.raises(ValueError):
        build_discriminator(-1.0, seed=0)


def test_same_seed_bit_identical_build():
    assert params_equal(build_generator(0.25, seed=9), build_generator(0.25, seed=9))
    assert not params_equal(build_generator(0.25, seed=9), build_generator(0.25, seed=10))


# --------------------------------------------------------------------------
# generator forward
# --------------------------------------------------------------------------

def test_forward_preserves_shape():
    g = build_generator(0.25, seed=1)
    for shape in ((1, 3, 64, 64), (2, 3, 32, 32)):
        out = generator_forward(g, unit_input(shape), mode="eval")
        assert out.shape == shape


def test_forward_output_strictly_inside_unit_interval():
    g = build_generator(0.25, seed=2)
    out = generator_forward(g, unit_input((2, 3, 64, 64), seed=3), mode="train").data
    assert out.min() > 0.0 and out.max() < 1.0


def test_forward_multi_scale_without_reconfiguration():
    g = build_generator(0.25, seed=4)
    for hw in (32, 64, 128):
        out = generator_forward(g, unit_input((1, 3, hw, hw), seed=hw), mode="eval")
        assert out.shape == (1, 3, hw, hw)


def test_forward_rejects_indivisible_dims():
    g = build_generator(0.25, seed=5)
    with pytest.raises(T.ShapeError) as exc:
        generator_forward(g, unit_input((1, 3, 48, 48)))
    assert "32" in str(exc.value)


def test_forward_rejects_out_of_range_values():
    g = build_generator(0.25, seed=5)
    bad = T.Tensor(np.full((1, 3, 32, 32), 1.5, np.float32))
    with pytest.raises(ValueError):
        generator_forward(g, bad)


def test_forward_records_on_active_tape_in_train_mode():
    g = build_generator(0.25, seed=6)
    with T.Tape() as tape:
        generator_forward(g, unit_input((2, 3, 32, 32)), mode="train")
    assert len(tape) > 20   # leaves + one node per primitive


def test_forward_train_mode_needs_batch_statistics():
    # a single 32x32 image leaves the bottleneck with one value per channel
    g = build_generator(0.25, seed=6)
    with pytest.raises(ValueError):
        generator_forward(g, unit_input((1, 3, 32, 32)), mode="train")
    generator_forward(g, unit_input((1, 3, 32, 32)), mode="eval")


def _sampled_param_fd(net32, net64, forward32, forward64, picks, h=1e-5, seed=0):
    """Analytic f32 grads vs central differences on the f64 twin."""
    with T.Tape() as tape:
        loss = forward32()
    grads = T.backward(tape, loss)
    rng = np.random.default_rng(seed)
    p32s, p64s = net32.parameters(), net64.parameters()
    worst = 0.0
    for _ in range(picks):
        pi = int(rng.integers(0, len(p32s)))
        p32, p64 = p32s[pi], p64s[pi]
        idx = np.unravel_index(int(rng.integers(0, p32.data.size)), p32.shape)
        keep = p64.data[idx]
        p64.data[idx] = keep + h
        hi = forward64().item()
        p64.data[idx] = keep - h
        lo = forward64().item()
        p64.data[idx] = keep
        fd = (hi - lo) / (2 * h)
        analytic = float(tape.grad_for(grads, p32).data[idx])
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def _clone_to_float64(build, net32):
    net64 = build()
    for p32, p64 in zip(net32.parameters(), net64.parameters()):
        p64.data = p32.data.astype(np.float64)
    return net64


def test_generator_end_to_end_gradcheck_float32():
    g32 = build_generator(0.25, seed=7)
    g64 = _clone_to_float64(lambda: build_generator(0.25, seed=7, dtype=np.float64), g32)
    rng = np.random.default_rng(8)
    ldr32 = T.Tensor(rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
    hdr32 = T.Tensor(rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
    ldr64, hdr64 = T.Tensor(ldr32.data.astype(np.float64)), T.Tensor(hdr32.data.astype(np.float64))

    def f32():
        return mse(generator_forward(g32, ldr32, mode="train"), hdr32)

    def f64():
        with T.pause_recording():
            return mse(generator_forward(g64, ldr64, mode="train"), hdr64)

    # ~1% of the desk-width parameter tensors, sampled at random
    worst = _sampled_param_fd(g32, g64, f32, f64, picks=12, seed=9)
    assert worst < 1e-3


def test_discriminator_end_to_end_gradcheck_float32():
    d32 = build_discriminator(0.25, seed=11, input_hw=32)
    d64 = _clone_to_float64(
        lambda: build_discriminator(0.25, seed=11, input_hw=32, dtype=np.float64), d32)
    rng = np.random.default_rng(12)
    x32 = T.Tensor(rng.uniform(0, 1, (4, 3, 32, 32)).astype(np.float32))
    x64 = T.Tensor(x32.data.astype(np.float64))

    def f32():
        out = discriminator_forward(d32, x32, mode="train")
        return T.sum_all(T.mul(out, out))

    def f64():
        with T.pause_recording():
            out = discriminator_forward(d64, x64, mode="train")
            return T.sum_all(T.mul(out, out))

    worst = _sampled_param_fd(d32, d64, f32, f64, picks=12, seed=13)
    assert worst < 1e-3


# --------------------------------------------------------------------------
# discriminator forward
# --------------------------------------------------------------------------

def test_discriminator_batch_of_six():
    d = build_discriminator(0.25, seed=14, input_hw=64)
    out = discriminator_forward(d, unit_input((6, 3, 64, 64), seed=15), mode="train")
    assert out.shape == (6, 1, 1, 1)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_discriminator_rejects_wrong_size():
    d = build_discriminator(0.25, seed=16, input_hw=64)
    with pytest.raises(T.ShapeError):
        discriminator_forward(d, unit_input((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        build_discriminator(0.25, seed=0, input_hw=8)   # below the conv stack


# --------------------------------------------------------------------------
# save / load
# --------------------------------------------------------------------------

def probe_forward(net, seed=20):
    return generator_forward(net, unit_input((1, 3, 32, 32), seed=seed), mode="eval").data


def test_save_load_roundtrip_identical_forward(tmp_path):
    g = build_generator(0.25, seed=17)
    # move running stats off their init values so they are exercised too
    generator_forward(g, unit_input((2, 3, 32, 32), seed=18), mode="train")
    path = tmp_path / "gen.itmn"
    save_params(g, path)
    g2 = load_params(path)
    assert params_equal(g, g2)
    assert np.array_equal(probe_forward(g), probe_forward(g2))


def test_save_load_discriminator_roundtrip(tmp_path):
    d = build_discriminator(0.25, seed=19, input_hw=64)
    path = tmp_path / "disc.itmn"
    save_params(d, path)
    d2 = load_params(path)
    assert params_equal(d, d2)
    assert d2.input_hw == 64


def test_load_truncated_file_rejected(tmp_path):
    g = build_generator(0.25, seed=21)
    path = tmp_path / "gen.itmn"
    save_params(g, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 64])
    with pytest.raises(ParamsFormatError):
        load_params(path)


def test_load_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.itmn"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ParamsFormatError):
        load_params(path)


def test_load_into_mismatched_width_rejected(tmp_path):
    g = build_generator(0.25, seed=22)
    path = tmp_path / "gen.itmn"
    save_params(g, path)
    other = build_generator(0.5, seed=22)
    with pytest.raises(ParamsFormatError) as exc:
        load_params(path, into=other)
    assert "enc0" in str(exc.value)   # first mismatching layer is named


def test_load_into_wrong_kind_rejected(tmp_path):
    d = build_discriminator(0.25, seed=23, input_hw=32)
    path = tmp_path / "disc.itmn"
    save_params(d, path)
    with pytest.raises(ParamsFormatError):
        load_params(path, into=build_generator(0.25, seed=23))
