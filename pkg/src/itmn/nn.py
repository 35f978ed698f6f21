"""Generator and discriminator assembly, initialization, and (de)serialization.

The generator is a 10-layer encoder-decoder with skip connections: 5 strided
convolutions down, 5 transposed convolutions up, every resolution level of the
encoder concatenated into the matching decoder input. The discriminator is a
strided conv stack followed by fully connected layers ending in a sigmoid.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor

GENERATOR_ENCODER_MAPS = (64, 128, 256, 512, 512)
GENERATOR_DECODER_MAPS = (512, 256, 128, 64, 3)
DISCRIMINATOR_CONV_MAPS = (64, 128, 256, 512)
DISCRIMINATOR_FC_WIDTHS = (1024, 1)

DOWN_FACTOR = 32           # 5 stride-2 encoder levels
WEIGHT_STD = 0.02
GAMMA_STD = 0.02

PARAMS_MAGIC = b"ITMN"
PARAMS_VERSION = 1


class ParamsFormatError(ValueError):
    """Parameter file is malformed or does not match the receiving network."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str          # conv | deconv | fc
    k: int             # kernel size (1 for fc)
    n: int             # output feature maps / fc width
    s: int             # stride (1 for fc)
    norm: bool
    act: str           # leaky_relu | sigmoid | none

    def __post_init__(self):
        if self.kind not in ("conv", "deconv", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.n < 1 or self.s < 1:
            raise ValueError(f"layer spec fields must be >= 1: {self}")
        if self.act not in ("leaky_relu", "sigmoid", "none"):
            raise ValueError(f"unknown activation {self.act!r}")


@dataclass
class Layer:
    spec: LayerSpec
    weight: Tensor
    bias: Tensor
    bn: Optional[BatchNormState] = None

    def parameters(self) -> list[Tensor]:
        out = [self.weight, self.bias]
        if self.bn is not None:
            out += [self.bn.gamma, self.bn.beta]
        return out


def _scaled(n0: int, wm: float) -> int:
    return max(1, int(round(n0 * wm)))


def _init_layer(spec: LayerSpec, c_in: int, rng: np.random.Generator,
                dtype=np.float32) -> Layer:
    if spec.kind == "conv":
        wshape = (spec.n, c_in, spec.k, spec.k)
    elif spec.kind == "deconv":
        wshape = (c_in, spec.n, spec.k, spec.k)
    else:
        wshape = (spec.n, c_in, 1, 1)
    weight = Tensor(rng.normal(0.0, WEIGHT_STD, wshape).astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros((1, spec.n, 1, 1), dtype=dtype), requires_grad=True)
    bn = None
    if spec.norm:
        bn = BatchNormState.create(spec.n, dtype=dtype)
        bn.gamma = Tensor(rng.normal(1.0, GAMMA_STD, (1, spec.n, 1, 1)).astype(dtype),
                          requires_grad=True)
    return Layer(spec, weight, bias, bn)


def _layer_forward(layer: Layer, x: Tensor, mode: str) -> Tensor:
    spec = layer.spec
    if spec.kind == "conv":
        y = T.conv2d(x, layer.weight, layer.bias, stride=spec.s, pad=(spec.k - spec.s) // 2)
    elif spec.kind == "deconv":
        y = T.conv2d_transpose(x, layer.weight, layer.bias, stride=spec.s,
                               pad=(spec.k - spec.s) // 2)
    else:
        y = T.fc(x, layer.weight, layer.bias)
    if layer.bn is not None:
        y = T.batchnorm(y, layer.bn, mode)
    if spec.act != "none":
        y = T.activation(y, spec.act)
    return y


@dataclass
class Generator:
    encoder: list[Layer]
    decoder: list[Layer]
    width_multiplier: float
    seed: int

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.encoder + self.decoder:
            out += layer.parameters()
        return out

    def layers(self) -> list[Layer]:
        return self.encoder + self.decoder


@dataclass
class Discriminator:
    convs: list[Layer]
    fcs: list[Layer]
    input_hw: int
    width_multiplier: float
    seed: int

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.convs + self.fcs:
            out += layer.parameters()
        return out

    def layers(self) -> list[Layer]:
        return self.convs + self.fcs


def build_generator(width_multiplier: float = 1.0, seed: int = 0,
                    dtype=np.float32) -> Generator:
    """U-Net generator; (seed, width_multiplier) fully determine the weights."""
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    rng = np.random.default_rng(seed)
    wm = float(width_multiplier)

    enc_maps = [_scaled(n, wm) for n in GENERATOR_ENCODER_MAPS]
    dec_maps = [_scaled(n, wm) for n in GENERATOR_DECODER_MAPS[:-1]] + [3]

    encoder: list[Layer] = []
    c = 3
    for i, n in enumerate(enc_maps):
        spec = LayerSpec("conv", 4, n, 2, norm=(i != 0), act="leaky_relu")
        encoder.append(_init_layer(spec, c, rng, dtype))
        c = n

    decoder: list[Layer] = []
    for j, n in enumerate(dec_maps):
        last = j == len(dec_maps) - 1
        c_in = c if j == 0 else c + enc_maps[len(enc_maps) - 1 - j]
        spec = LayerSpec("deconv", 4, n, 2, norm=not last,
                         act="sigmoid" if last else "leaky_relu")
        decoder.append(_init_layer(spec, c_in, rng, dtype))
        c = n

    return Generator(encoder, decoder, wm, seed)


def generator_forward(g: Generator, ldr: Tensor, mode: str = "train") -> Tensor:
    """Maps an LDR batch in [0,1] to an HDR batch in (0,1), same shape."""
    n, c, h, w = ldr.shape
    if c != 3:
        raise ShapeError(f"generator expects 3 input channels, got {ldr.shape}")
    if h % DOWN_FACTOR or w % DOWN_FACTOR:
        raise ShapeError(f"generator input dims must be divisible by {DOWN_FACTOR}, "
                         f"got {h}x{w}")
    if np.any(ldr.data < 0) or np.any(ldr.data > 1):
        raise ValueError("generator input values must lie in [0,1]")

    feats: list[Tensor] = []
    x = ldr
    for layer in g.encoder:
        x = _layer_forward(layer, x, mode)
        feats.append(x)
    for j, layer in enumerate(g.decoder):
        if j > 0:
            x = T.concat_channels(x, feats[len(feats) - 1 - j])
        x = _layer_forward(layer, x, mode)
    return x


def build_discriminator(width_multiplier: float = 1.0, seed: int = 0,
                        input_hw: int = 64, dtype=np.float32) -> Discriminator:
    """Conv stack + FC head sized for square inputs of input_hw pixels."""
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    down = 2 ** len(DISCRIMINATOR_CONV_MAPS)
    if input_hw < down or input_hw % down:
        raise ValueError(f"discriminator input_hw must be a multiple of {down}, "
                         f"got {input_hw}")
    rng = np.random.default_rng(seed)
    wm = float(width_multiplier)

    convs: list[Layer] = []
    c = 3
    for n0 in DISCRIMINATOR_CONV_MAPS:
        n = _scaled(n0, wm)
        convs.append(_init_layer(LayerSpec("conv", 4, n, 2, norm=True, act="leaky_relu"),
                                 c, rng, dtype))
        c = n

    feat_hw = input_hw // down
    in_features = c * feat_hw * feat_hw
    fcs: list[Layer] = []
    widths = [_scaled(DISCRIMINATOR_FC_WIDTHS[0], wm), 1]
    for idx, width in enumerate(widths):
        last = idx == len(widths) - 1
        spec = LayerSpec("fc", 1, width, 1, norm=False,
                         act="sigmoid" if last else "leaky_relu")
        fcs.append(_init_layer(spec, in_features, rng, dtype))
        in_features = width

    return Discriminator(convs, fcs, input_hw, wm, seed)


def discriminator_forward(d: Discriminator, hdr: Tensor, mode: str = "train") -> Tensor:
    """Per-image probability-of-generated, shape (n, 1, 1, 1)."""
    n, c, h, w = hdr.shape
    if c != 3:
        raise ShapeError(f"discriminator expects 3 input channels, got {hdr.shape}")
    if (h, w) != (d.input_hw, d.input_hw):
        raise ShapeError(f"discriminator was built for {d.input_hw}x{d.input_hw} inputs "
                         f"(minimum {2 ** len(DISCRIMINATOR_CONV_MAPS)}), got {h}x{w}")
    if np.any(hdr.data < 0) or np.any(hdr.data > 1):
        raise ValueError("discriminator input values must lie in [0,1]")

    x = hdr
    for layer in d.convs:
        x = _layer_forward(layer, x, mode)
    for layer in d.fcs:
        x = _layer_forward(layer, x, mode)
    return x


# --------------------------------------------------------------------------
# Parameter file format
# --------------------------------------------------------------------------
# magic "ITMN" | version u32 | net kind | width_multiplier f64 | input_hw u32
# | layer specs | tensor manifest (name, dims) | raw little-endian f32 data.

def _w_str(f: BinaryIO, s: str):
    raw = s.encode("ascii")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _r_exact(f: BinaryIO, nbytes: int) -> bytes:
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise ParamsFormatError("parameter file truncated")
    return raw


def _r_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _r_exact(f, 2))
    return _r_exact(f, n).decode("ascii")


def _net_entries(net) -> list[tuple[str, np.ndarray]]:
    """(name, array) pairs in declaration order; arrays are live references."""
    entries: list[tuple[str, np.ndarray]] = []
    if isinstance(net, Generator):
        groups = [("enc", net.encoder), ("dec", net.decoder)]
    else:
        groups = [("conv", net.convs), ("fc", net.fcs)]
    for prefix, layers in groups:
        for i, layer in enumerate(layers):
            base = f"{prefix}{i}"
            entries.append((f"{base}.weight", layer.weight.data))
            entries.append((f"{base}.bias", layer.bias.data))
            if layer.bn is not None:
                entries.append((f"{base}.bn.gamma", layer.bn.gamma.data))
                entries.append((f"{base}.bn.beta", layer.bn.beta.data))
                entries.append((f"{base}.bn.running_mean", layer.bn.running_mean))
                entries.append((f"{base}.bn.running_var", layer.bn.running_var))
    return entries


def save_params(net, path):
    """Write a parameter file; float32 payload, roundtrips bit-exactly."""
    kind = "generator" if isinstance(net, Generator) else "discriminator"
    specs = [layer.spec for layer in net.layers()]
    entries = _net_entries(net)
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<I", PARAMS_VERSION))
        _w_str(f, kind)
        f.write(struct.pack("<d", net.width_multiplier))
        f.write(struct.pack("<I", net.input_hw if isinstance(net, Discriminator) else 0))
        f.write(struct.pack("<I", len(specs)))
        for spec in specs:
            _w_str(f, spec.kind)
            f.write(struct.pack("<IIIB", spec.k, spec.n, spec.s, int(spec.norm)))
            _w_str(f, spec.act)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _w_str(f, name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path, into=None):
    """Read a parameter file back into a network.

    With into=None the network is rebuilt from the stored layer specs;
    otherwise the file must match the given network's manifest exactly
    (the first mismatching layer is named in the error).
    """
    with open(path, "rb") as f:
        if _r_exact(f, 4) != PARAMS_MAGIC:
            raise ParamsFormatError("not an ITMN parameter file (bad magic)")
        (version,) = struct.unpack("<I", _r_exact(f, 4))
        if version != PARAMS_VERSION:
            raise ParamsFormatError(f"unsupported parameter format version {version}")
        kind = _r_str(f)
        if kind not in ("generator", "discriminator"):
            raise ParamsFormatError(f"unknown network kind {kind!r}")
        (wm,) = struct.unpack("<d", _r_exact(f, 8))
        (input_hw,) = struct.unpack("<I", _r_exact(f, 4))
        (n_specs,) = struct.unpack("<I", _r_exact(f, 4))
        specs = []
        for _ in range(n_specs):
            skind = _r_str(f)
            k, n, s, norm = struct.unpack("<IIIB", _r_exact(f, 13))
            act = _r_str(f)
            specs.append(LayerSpec(skind, k, n, s, bool(norm), act))
        (n_entries,) = struct.unpack("<I", _r_exact(f, 4))
        manifest = []
        for _ in range(n_entries):
            name = _r_str(f)
            (ndim,) = struct.unpack("<B", _r_exact(f, 1))
            dims = struct.unpack(f"<{ndim}I", _r_exact(f, 4 * ndim))
            manifest.append((name, dims))

        if into is None:
            if kind == "generator":
                net = build_generator(wm, seed=0)
            else:
                net = build_discriminator(wm, seed=0, input_hw=input_hw)
        else:
            net = into
            want_kind = "generator" if isinstance(net, Generator) else "discriminator"
            if kind != want_kind:
                raise ParamsFormatError(f"file holds a {kind}, target is a {want_kind}")

        targets = _net_entries(net)
        if len(targets) != len(manifest):
            raise ParamsFormatError(f"file has {len(manifest)} tensors, network has "
                                    f"{len(targets)}")
        for (name, dims), (tname, arr) in zip(manifest, targets):
            if name != tname or tuple(dims) != arr.shape:
                raise ParamsFormatError(f"layer {tname!r} mismatch: file has {name!r} with "
                                        f"shape {tuple(dims)}, network expects {arr.shape}")

        for (name, dims), (tname, arr) in zip(manifest, targets):
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            values = np.frombuffer(_r_exact(f, 4 * count), dtype="<f4").reshape(dims)
            arr[...] = values.astype(arr.dtype)
    return net


def params_equal(a, b) -> bool:
    ea, eb = _net_entries(a), _net_entries(b)
    return len(ea) == len(eb) and all(
        na == nb and np.array_equal(va, vb) for (na, va), (nb, vb) in zip(ea, eb))
