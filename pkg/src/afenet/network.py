"""Model assembly: residual encoder, transformer blocks, frequency-enhanced
decoder, segmentation head, size accounting and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .afsim import Afsim, fuse_encoder_decoder
from .nn import ChannelNorm, Conv2d, Module, conv_flops, meta_init, param
from .sfm import Sfm
from .tensor import Tensor

FULL_CHANNELS = (64, 128, 256, 512)


@dataclass
class ModelConfig:
    num_classes: int = 5
    stage_channels: tuple[int, ...] = FULL_CHANNELS
    width_multiplier: float = 0.125
    encoder_blocks: tuple[int, ...] = (2, 2, 2, 2)
    decoder_tb_depth: tuple[int, ...] = (1, 1, 1, 1)
    afeb_levels: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (2, 2, 2, 2)
    tb_heads: tuple[int, ...] = (1, 2, 4, 8)
    ffn_expansion: float = 2.66
    mask_mode: str = "soft"
    infer_mask_mode: str = "hard"
    temperature: float = 1.0
    in_channels: int = 3
    zero_init_out: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_channels", "encoder_blocks", "decoder_tb_depth", "afeb_levels",
                     "heads", "tb_heads"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        for mode in (self.mask_mode, self.infer_mask_mode):
            if mode not in ("hard", "soft"):
                raise ValueError(f"mask mode must be 'hard' or 'soft', got {mode!r}")
        ch = self.channels
        if any(b != 2 * a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage channels must double per stage, got {ch}")
        for c, h, th in zip(ch, self.heads, self.tb_heads):
            if c % h or c % th:
                raise ValueError(f"heads ({h}, {th}) must divide channels {c}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width_multiplier))) for c in self.stage_channels)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def full_config(**overrides) -> ModelConfig:
    # transformer refinement only at the deepest level keeps the 512x512 budget
    base = dict(width_multiplier=1.0, decoder_tb_depth=(0, 0, 0, 1), heads=(8, 8, 8, 8),
                tb_heads=(8, 8, 8, 8), ffn_expansion=4.0)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng=None, zero_last: bool = False):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False, init="kaiming")
        self.norm1 = ChannelNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False, init="kaiming")
        self.norm2 = ChannelNorm(cout, zero=zero_last)
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng, stride=stride, bias=False, init="kaiming")
            self.down_norm = ChannelNorm(cout)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        short = x if self.down is None else self.down_norm(self.down(x))
        return T.relu(y + short)

    def flops(self, shape):
        f1, s1 = self.conv1.flops(shape)
        f2, s2 = self.conv2.flops(s1)
        total = f1 + f2
        if self.down is not None:
            total += self.down.flops(shape)[0]
        return total, s2


class Encoder(Module):
    """18-layer residual backbone; four outputs at strides 4, 8, 16 and 32."""

    def __init__(self, channels, blocks, rng=None, in_channels: int = 3, zero_last: bool = False):
        c0 = channels[0]
        self.stem = Conv2d(in_channels, c0, 7, rng, stride=2, bias=False, init="kaiming")
        self.stem_norm = ChannelNorm(c0)
        self.stages = []
        cin = c0
        for i, (c, nb) in enumerate(zip(channels, blocks)):
            stage = []
            for b in range(nb):
                stride = 2 if (i > 0 and b == 0) else 1
                stage.append(BasicBlock(cin, c, stride, rng, zero_last))
                cin = c
            self.stages.append(_Seq(stage))

    def forward(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise T.ShapeError(f"encoder: input spatial axes {h}x{w} must be divisible by 32")
        y = T.relu(self.stem_norm(self.stem(x)))
        y = T.max_pool2d(y, 3, 2, padding=1)
        feats = []
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats

    def flops(self, shape):
        total, s = self.stem.flops(shape)
        s = (s[0], s[1], (s[2] + 2 - 3) // 2 + 1, (s[3] + 2 - 3) // 2 + 1)
        shapes = []
        for stage in self.stages:
            for blk in stage.items:
                f, s = blk.flops(s)
                total += f
            shapes.append(s)
        return total, shapes


class _Seq(Module):
    def __init__(self, items):
        self.items = list(items)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


def encoder_forward(image: Tensor, encoder: Encoder) -> list[Tensor]:
    return encoder(image)


# --------------------------------------------------------------------------
# transformer block
# --------------------------------------------------------------------------

class ChannelSelfAttention(Module):
    def __init__(self, c: int, heads: int, rng=None, zero_out: bool = False):
        self.heads = heads
        self.temperature = param((heads, 1, 1), None, fill=1.0)
        self.qkv = Conv2d(c, 3 * c, 1, rng, bias=False)
        self.qkv_dw = Conv2d(3 * c, 3 * c, 3, rng, groups=3 * c, bias=False)
        self.project_out = Conv2d(c, c, 1, rng, bias=False, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q, k, v = T.split(self.qkv_dw(self.qkv(x)), 3, axis=1)
        ch = c // self.heads
        q = T.l2_normalize(q.reshape(n, self.heads, ch, h * w), axis=-1)
        k = T.l2_normalize(k.reshape(n, self.heads, ch, h * w), axis=-1)
        v = v.reshape(n, self.heads, ch, h * w)
        attn = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * self.temperature, axis=-1)
        return self.project_out(T.matmul(attn, v).reshape(n, c, h, w))

    def flops(self, shape):
        n, c, h, w = shape
        ch = c // self.heads
        return n * (conv_flops(c, 3 * c, 1, 1, h, w) + conv_flops(3 * c, 3 * c, 3, 3 * c, h, w)
                    + conv_flops(c, c, 1, 1, h, w) + 4 * self.heads * ch * ch * h * w)


class GatedFFN(Module):
    def __init__(self, c: int, expansion: float, rng=None, zero_out: bool = False):
        hid = int(c * expansion)
        self.hidden = hid
        self.project_in = Conv2d(c, 2 * hid, 1, rng, bias=False)
        self.dw = Conv2d(2 * hid, 2 * hid, 3, rng, groups=2 * hid, bias=False)
        self.project_out = Conv2d(hid, c, 1, rng, bias=False, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        a, b = T.split(self.dw(self.project_in(x)), 2, axis=1)
        return self.project_out(T.gelu(a) * b)

    def flops(self, shape):
        n, c, h, w = shape
        hid = self.hidden
        return n * (conv_flops(c, 2 * hid, 1, 1, h, w) + conv_flops(2 * hid, 2 * hid, 3, 2 * hid, h, w)
                    + conv_flops(hid, c, 1, 1, h, w))


class TransformerBlock(Module):
    def __init__(self, c: int, heads: int, expansion: float, rng=None, zero_out: bool = False):
        self.norm1 = ChannelNorm(c)
        self.attn = ChannelSelfAttention(c, heads, rng, zero_out)
        self.norm2 = ChannelNorm(c)
        self.ffn = GatedFFN(c, expansion, rng, zero_out)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def flops(self, shape):
        return self.attn.flops(shape) + self.ffn.flops(shape)


def transformer_block(x: Tensor, weights: TransformerBlock) -> Tensor:
    return weights(x)


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------

class Afeb(Module):
    """Frequency-enhanced decoder block: interaction module, then selective fusion."""

    def __init__(self, c: int, c_dec: int | None, heads: int, rng=None,
                 zero_out: bool = False, in_channels: int = 3):
        self.afsim = Afsim(c, c_dec, heads, rng, zero_out, in_channels)
        self.sfm = Sfm(c, rng, zero_out)

    def forward(self, x_raw, x_enc, x_dec_next, mode="hard", temperature=1.0) -> Tensor:
        f_h, f_l, x_in = self.afsim(x_raw, x_enc, x_dec_next, mode, temperature)
        return x_in + self.sfm(f_h, f_l, x_in)

    def flops(self, shape, in_channels: int = 3) -> int:
        return self.afsim.flops(shape, in_channels) + self.sfm.flops(shape)


class PlainFuse(Module):
    """Decoder level without frequency enhancement: fusion conv only."""

    def __init__(self, c: int, c_dec: int | None, rng=None):
        self.fuse = Conv2d(c_dec + c, c, 1, rng) if c_dec else None

    def forward(self, x_raw, x_enc, x_dec_next, mode="hard", temperature=1.0) -> Tensor:
        return fuse_encoder_decoder(x_dec_next, x_enc, self.fuse)

    def flops(self, shape) -> int:
        n, c, h, w = shape
        return 0 if self.fuse is None else n * conv_flops(self.fuse.cin, c, 1, 1, h, w)


class AfeNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        ch = config.channels
        z = config.zero_init_out
        self.encoder = Encoder(ch, config.encoder_blocks, rng, config.in_channels)
        self.afeb = []
        self.tbs = []
        for i, c in enumerate(ch):
            c_dec = ch[i + 1] if i + 1 < len(ch) else None
            if config.afeb_levels[i]:
                self.afeb.append(Afeb(c, c_dec, config.heads[i], rng, z, config.in_channels))
            else:
                self.afeb.append(PlainFuse(c, c_dec, rng))
            self.tbs.append(_Seq(TransformerBlock(c, config.tb_heads[i], config.ffn_expansion, rng, z)
                                 for _ in range(config.decoder_tb_depth[i])))
        self.head = Conv2d(ch[0], config.num_classes, 1, rng)

    def forward(self, image: Tensor, mode: str | None = None) -> Tensor:
        cfg = self.config
        mode = cfg.mask_mode if mode is None else mode
        feats = self.encoder(image)
        raws = [T.area_downsample(image, 4)]
        for _ in range(len(feats) - 1):
            raws.append(T.area_downsample(raws[-1], 2))
        x = None
        for i in reversed(range(len(feats))):
            x = self.afeb[i](raws[i], feats[i], x, mode, cfg.temperature)
            x = self.tbs[i](x)
        return T.upsample(self.head(x), 4, "bilinear")

    def window_ratios(self) -> list[np.ndarray | None]:
        """Ratios produced by each level's window module in the last forward pass."""
        return [blk.afsim.last_ratios if isinstance(blk, Afeb) else None for blk in self.afeb]

    def flops(self, input_shape) -> int:
        cfg = self.config
        n = input_shape[0]
        total, shapes = self.encoder.flops(input_shape)
        for i, s in enumerate(shapes):
            blk = self.afeb[i]
            total += blk.flops(s, cfg.in_channels) if isinstance(blk, Afeb) else blk.flops(s)
            for tb in self.tbs[i].items:
                total += tb.flops(s)
        s0 = shapes[0]
        total += n * conv_flops(s0[1], cfg.num_classes, 1, 1, s0[2], s0[3])
        return total


def build_model(config: ModelConfig, seed: int | None = None) -> AfeNet:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return AfeNet(config, rng)


def model_forward(image: Tensor, model: AfeNet, mode: str | None = None) -> Tensor:
    return model(image, mode)


def count_params(config: ModelConfig) -> int:
    with meta_init():
        model = AfeNet(config, np.random.default_rng(0))
    return model.num_params()


def count_flops(config: ModelConfig, input_shape=(1, 3, 512, 512)) -> int:
    h, w = input_shape[-2:]
    if h % 32 or w % 32:
        raise T.ShapeError(f"count_flops: input {h}x{w} must be divisible by 32")
    with meta_init():
        model = AfeNet(config, np.random.default_rng(0))
    return model.flops(tuple(input_shape))


def encoder_param_count(config: ModelConfig) -> int:
    with meta_init():
        enc = Encoder(config.channels, config.encoder_blocks, None, config.in_channels)
    return enc.num_params()


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------

MAGIC = b"AFEN"
VERSION = 1
CONFIG_KEY = "__config__"
STEP_KEY = "__step__"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def write_tensor_table(path, table: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensor_table(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def need(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"{path}: truncated at byte {pos} (need {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) < 4:
        raise TruncatedCheckpointError(f"{path}: truncated before magic bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", need(8))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", need(4))
        name = need(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", need(4))
        shape = struct.unpack(f"<{rank}I", need(4 * rank))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(need(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
        if name in table:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        table[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return table


def _encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8).tolist()).decode("utf-8")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: ModelConfig
    step: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, model: AfeNet, step: int = 0, extra: dict[str, np.ndarray] | None = None) -> None:
    table = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        if k in table:
            raise CheckpointError(f"extra entry {k!r} collides with a parameter name")
        table[k] = v
    table[CONFIG_KEY] = _encode_text(model.config.to_json())
    table[STEP_KEY] = np.asarray([step], dtype=np.float32)
    write_tensor_table(path, table)


def load_checkpoint(path) -> Checkpoint:
    table = read_tensor_table(path)
    if CONFIG_KEY not in table:
        raise CheckpointError(f"{path}: no model config entry")
    cfg = ModelConfig.from_dict(json.loads(_decode_text(table.pop(CONFIG_KEY))))
    step = int(table.pop(STEP_KEY, np.zeros(1))[0])
    extra = {k: v for k, v in table.items() if k.startswith("optim.")}
    params = {k: v for k, v in table.items() if not k.startswith("optim.")}
    return Checkpoint(params, cfg, step, extra)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> AfeNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    with meta_init():
        model = AfeNet(ckpt.config, np.random.default_rng(0))
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, T.ShapeError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return model


def param_table(model: Module) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in model.named_parameters()}


def summarize(config: ModelConfig, input_shape=(1, 3, 512, 512)) -> dict[str, float]:
    p = count_params(config)
    f = count_flops(config, input_shape)
    return {"params": p, "params_m": p / 1e6, "flops": f, "flops_g": f / 1e9,
            "encoder_params": encoder_param_count(config)}

