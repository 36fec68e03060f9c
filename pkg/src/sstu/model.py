"""Segmentation network assembly, inference and weight persistence.

The network is a 5-layer encoder/decoder with skip connections.  Encoder
layer i runs two conv3x3+BN+ReLU blocks at width base*2**(i-1) followed
by a 2x2 max pool; the decoder mirrors it with a learned 2x2 stride-2
transposed convolution, concatenation of the matching pre-pool encoder
activation and two conv blocks.  The head projects to one channel with a
1x1 convolution and a sigmoid.  A two-decoder variant shares the encoder
and duplicates decoder+head parameters under "exo." and "ego." prefixes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from . import nn

WEIGHT_MAGIC = "SSTU1"


class WeightFormatError(ValueError):
    """Raised when a weight bundle file is malformed or truncated."""


@dataclass(frozen=True)
class ArchConfig:
    """Network shape. base_channels 16 keeps CPU inference tractable;
    use FIDELITY_PRESET for the heavier 64-channel variant."""

    input_size: int = 256
    base_channels: int = 16
    depth: int = 5
    decoders: int = 1

    def __post_init__(self):
        if self.depth != 5:
            raise ValueError(f"depth is fixed at 5, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.decoders not in (1, 2):
            raise ValueError(f"decoders must be 1 or 2, got {self.decoders}")
        if self.input_size % (1 << self.depth):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2**{self.depth}")

    def layer_width(self, i):
        """Channel width of encoder layer i (1-based)."""
        return self.base_channels * (1 << (i - 1))


FIDELITY_PRESET = ArchConfig(input_size=256, base_channels=64)


@dataclass
class WeightBundle:
    """Ordered name -> tensor map plus the architecture that shaped it."""

    params: dict[str, np.ndarray]
    arch: ArchConfig
    tag: str = "untrained"

    def copy(self):
        return WeightBundle({k: v.copy() for k, v in self.params.items()},
                            self.arch, self.tag)

    def decoder_prefixes(self):
        return ("exo.", "ego.") if self.arch.decoders == 2 else ("",)


def _conv_params(params, rng, name, cin, cout, k):
    std = np.sqrt(2.0 / (cin * k * k))
    params[f"{name}.w"] = rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32)
    params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)


def _tconv_params(params, rng, name, cin, cout):
    # stride-2 2x2 kernel: each output pixel sees one tap per input channel
    std = np.sqrt(2.0 / cin)
    params[f"{name}.w"] = rng.normal(0.0, std, (cin, cout, 2, 2)).astype(np.float32)
    params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)


def _bn_params(params, name, c):
    params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
    params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)
    params[f"{name}.mean"] = np.zeros(c, dtype=np.float32)
    params[f"{name}.var"] = np.ones(c, dtype=np.float32)


def build(config: ArchConfig, seed=0) -> WeightBundle:
    """Freshly initialized bundle; identical seeds give identical bundles."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for i in range(1, 6):
        cin = 3 if i == 1 else config.layer_width(i - 1)
        cout = config.layer_width(i)
        _conv_params(params, rng, f"enc{i}.conv1", cin, cout, 3)
        _bn_params(params, f"enc{i}.bn1", cout)
        _conv_params(params, rng, f"enc{i}.conv2", cout, cout, 3)
        _bn_params(params, f"enc{i}.bn2", cout)
    prefixes = ("exo.", "ego.") if config.decoders == 2 else ("",)
    for prefix in prefixes:
        for i in range(5, 0, -1):
            ci = config.layer_width(i)
            cin_up = ci if i == 5 else config.layer_width(i + 1)
            _tconv_params(params, rng, f"{prefix}dec{i}.up", cin_up, ci)
            _conv_params(params, rng, f"{prefix}dec{i}.conv1", 2 * ci, ci, 3)
            _bn_params(params, f"{prefix}dec{i}.bn1", ci)
            _conv_params(params, rng, f"{prefix}dec{i}.conv2", ci, ci, 3)
            _bn_params(params, f"{prefix}dec{i}.bn2", ci)
        _conv_params(params, rng, f"{prefix}head", config.layer_width(1), 1, 1)
    return WeightBundle(params, config, "untrained")


def expand_to_dual(bundle: WeightBundle, seed=0) -> WeightBundle:
    """Two-decoder bundle: encoder and exo.* copied from the one-decoder
    source, ego.* freshly initialized from the seed."""
    if bundle.arch.decoders != 1:
        raise ValueError("expand_to_dual expects a one-decoder bundle")
    dual_arch = replace(bundle.arch, decoders=2)
    dual = build(dual_arch, seed)
    for name, value in bundle.params.items():
        if name.startswith("enc"):
            dual.params[name] = value.copy()
        else:
            dual.params["exo." + name] = value.copy()
    dual.tag = bundle.tag + "+ego_init"
    return dual


# ----------------------------------------------------------------- forward

def _conv_block(p, conv, bn, x, tape, mode, update_running, frozen):
    x = nn.conv3x3(x, p[f"{conv}.w"], p[f"{conv}.b"], tape)
    x = nn.batch_norm(x, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                      p[f"{bn}.mean"], p[f"{bn}.var"], mode=mode,
                      update_running=update_running and not frozen(f"{bn}.mean"),
                      tape=tape)
    return nn.relu(x, tape)


def _never_frozen(name):
    return False


def encode(bundle, image, tape=None, mode="infer", update_running=True,
           frozen=_never_frozen):
    """Run the shared encoder; returns (pre-pool skips, bottleneck)."""
    p = bundle.params
    skips = []
    x = image
    for i in range(1, 6):
        x = _conv_block(p, f"enc{i}.conv1", f"enc{i}.bn1", x, tape, mode,
                        update_running, frozen)
        x = _conv_block(p, f"enc{i}.conv2", f"enc{i}.bn2", x, tape, mode,
                        update_running, frozen)
        skips.append(x)
        x = nn.maxpool2(x, tape)
    return skips, x


def decode(bundle, prefix, skips, bottom, tape=None, mode="infer",
           update_running=True, frozen=_never_frozen):
    """Run one decoder path; returns (logits (1,S,S), probabilities (S,S))."""
    p = bundle.params
    x = bottom
    for i in range(5, 0, -1):
        x = nn.upsample_tconv2(x, p[f"{prefix}dec{i}.up.w"],
                               p[f"{prefix}dec{i}.up.b"], tape)
        x = nn.concat_channels(x, skips[i - 1], tape)
        x = _conv_block(p, f"{prefix}dec{i}.conv1", f"{prefix}dec{i}.bn1",
                        x, tape, mode, update_running, frozen)
        x = _conv_block(p, f"{prefix}dec{i}.conv2", f"{prefix}dec{i}.bn2",
                        x, tape, mode, update_running, frozen)
    logits = nn.conv1x1(x, p[f"{prefix}head.w"], p[f"{prefix}head.b"], tape)
    prob = nn.sigmoid(logits, tape)
    return logits, prob[0]


def _check_image(bundle, image):
    s = bundle.arch.input_size
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, {s}, {s}) image, got shape {image.shape}")
    if image.shape[1] != s or image.shape[2] != s:
        raise ValueError(
            f"image spatial size {image.shape[1]}x{image.shape[2]} does not match "
            f"the bundle input_size {s}")


def infer_single(bundle: WeightBundle, image: np.ndarray) -> np.ndarray:
    """Full forward pass of a one-decoder bundle -> (S, S) probabilities."""
    if bundle.arch.decoders != 1:
        raise ValueError("infer_single expects a one-decoder bundle")
    _check_image(bundle, image)
    skips, bottom = encode(bundle, image)
    _, prob = decode(bundle, "", skips, bottom)
    return prob


def infer_dual(bundle: WeightBundle, image: np.ndarray):
    """One encoder pass, two decoder passes -> (p_exo, p_ego)."""
    if bundle.arch.decoders != 2:
        raise ValueError("infer_dual expects a two-decoder bundle")
    _check_image(bundle, image)
    skips, bottom = encode(bundle, image)
    _, p_exo = decode(bundle, "exo.", skips, bottom)
    _, p_ego = decode(bundle, "ego.", skips, bottom)
    return p_exo, p_ego


def aggregate_max(p_exo: np.ndarray, p_ego: np.ndarray) -> np.ndarray:
    """Pointwise maximum of the two decoder predictions."""
    if p_exo.shape != p_ego.shape:
        raise ValueError(f"mask shapes differ: {p_exo.shape} vs {p_ego.shape}")
    return np.maximum(p_exo, p_ego)


def infer(bundle: WeightBundle, image: np.ndarray) -> np.ndarray:
    """Probability mask from either bundle kind (dual outputs aggregated)."""
    if bundle.arch.decoders == 1:
        return infer_single(bundle, image)
    return aggregate_max(*infer_dual(bundle, image))


# ------------------------------------------------------------- persistence

def save_weights(bundle: WeightBundle, path) -> None:
    """Bit-exact weight bundle file: ASCII manifest, blank line, f32 blob."""
    lines = [WEIGHT_MAGIC]
    blob = io.BytesIO()
    offset = 0
    for name, t in bundle.params.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        dims = " ".join(str(d) for d in t.shape)
        lines.append(f"tensor {name} f32 {t.ndim} {dims} {offset} {len(raw)}")
        blob.write(raw)
        offset += len(raw)
    a = bundle.arch
    lines.append(f"arch {a.input_size} {a.base_channels} {a.depth} {a.decoders}")
    lines.append(f"tag {bundle.tag}")
    lines.append("")
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode("ascii"))
        f.write(b"\n")
        f.write(blob.getvalue())


def load_weights(path) -> WeightBundle:
    with open(path, "rb") as f:
        data = f.read()
    sep = data.find(b"\n\n")
    if sep < 0:
        raise WeightFormatError(f"{path}: no blank line separating header from blob")
    try:
        header = data[:sep].decode("ascii")
    except UnicodeDecodeError as e:
        raise WeightFormatError(f"{path}: header is not ASCII ({e})") from None
    blob = data[sep + 2:]
    lines = header.split("\n")
    if not lines or lines[0] != WEIGHT_MAGIC:
        raise WeightFormatError(
            f"{path}: bad magic {lines[0]!r}, expected {WEIGHT_MAGIC!r}")

    params: dict[str, np.ndarray] = {}
    arch = None
    tag = None
    for ln, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        kind = fields[0]
        if kind == "tensor":
            name = fields[1]
            if fields[2] != "f32":
                raise WeightFormatError(
                    f"{path}:{ln}: tensor {name}: unsupported dtype {fields[2]}")
            rank = int(fields[3])
            if len(fields) != 6 + rank:
                raise WeightFormatError(
                    f"{path}:{ln}: tensor {name}: malformed declaration")
            dims = tuple(int(d) for d in fields[4:4 + rank])
            off, nbytes = int(fields[4 + rank]), int(fields[5 + rank])
            expect = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
            if nbytes != expect:
                raise WeightFormatError(
                    f"{path}:{ln}: tensor {name}: declared {nbytes} bytes, "
                    f"shape {dims} needs {expect}")
            if off < 0 or off + nbytes > len(blob):
                raise WeightFormatError(
                    f"{path}: tensor {name}: blob range [{off}, {off + nbytes}) "
                    f"exceeds blob size {len(blob)} (truncated file?)")
            t = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off)
            params[name] = t.reshape(dims).astype(np.float32)
        elif kind == "arch":
            if len(fields) != 5:
                raise WeightFormatError(f"{path}:{ln}: malformed arch line")
            dec = {"one": 1, "two": 2}.get(fields[4])
            if dec is None:
                dec = int(fields[4])
            arch = ArchConfig(input_size=int(fields[1]), base_channels=int(fields[2]),
                              depth=int(fields[3]), decoders=dec)
        elif kind == "tag":
            tag = line.split(None, 1)[1] if len(fields) > 1 else ""
        else:
            raise WeightFormatError(f"{path}:{ln}: unknown record {kind!r}")
    if arch is None:
        raise WeightFormatError(f"{path}: missing arch line")
    if tag is None:
        raise WeightFormatError(f"{path}: missing tag line")

    expected = build(arch, seed=0).params
    if list(expected) != list(params):
        missing = [n for n in expected if n not in params]
        extra = [n for n in params if n not in expected]
        raise WeightFormatError(
            f"{path}: parameter names do not match the declared architecture "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in params.items():
        if t.shape != expected[name].shape:
            raise WeightFormatError(
                f"{path}: tensor {name}: shape {t.shape} does not match "
                f"architecture shape {expected[name].shape}")
    return WeightBundle(params, arch, tag)
