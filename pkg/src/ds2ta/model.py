"""Spiking transformer assembly, configuration, and checkpoint format.

Pipeline: patchify event frames -> linear embedding -> LIF -> L encoder
blocks -> mean pool over time and tokens -> linear classifier.  Each
encoder block runs windowed-decay attention (query/key/value projections
through LIF, integer score matrices, optional table denoiser, value
mixing, output projection through LIF, spike residual) followed by a
two-layer LIF MLP with its own spike residual.  Residual adds are plain
elementwise sums of spike trains, so activations between blocks are small
non-negative integers rather than strictly binary.

Checkpoints are a flat little-endian binary container: magic ``DS2T``,
format version, a canonical-text config blob, then named tensor records.
A round trip through disk reproduces forward outputs bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .neuron import LifParams, lif_forward
from .nsad import NsadHead, denoise
from .tasa import (AttentionScores, attention_scores, merge_heads, split_heads,
                   tau_round_ste, temporal_filter)
from .tensorcore import (DiffTensor, Tape, add, bias_add, make_rng, matmul,
                         reduce_mean)

CKPT_MAGIC = b"DS2T"
CKPT_VERSION = 1

_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
}
_CODE_FOR_KIND = {"f8": 0, "f4": 1, "i8": 2}

ATTENTION_MODES = ("tasa", "spatial_only")
NSAD_FORWARD_MODES = ("table", "continuous")

# Projection init: normal with std INIT_GAIN / sqrt(fan_in).  Inputs are
# sparse binary spike trains, so plain 1/sqrt(fan_in) leaves pre-activations
# far below the firing threshold and the network starts silent; the gain
# puts typical membrane inputs near the threshold instead, which also gives
# pattern tokens attention scores well above the single co-activations that
# background noise produces.
INIT_GAIN = 3.0


@dataclass
class ModelConfig:
    timesteps: int = 8        # T
    blocks: int = 2           # L, encoder blocks
    embed_dim: int = 64       # D
    heads: int = 4            # H
    mlp_ratio: int = 4
    t_aw: int = 3             # attention window length
    tau_init: float = 1.0     # continuous decay exponent init, one per block
    tau_max: int = 6
    u_init: float = 1.5       # denoiser threshold init
    tau_m: float = 2.0        # LIF membrane constant
    theta: float = 1.0        # LIF firing threshold
    surrogate_alpha: float = 2.0
    attention_mode: str = "tasa"
    nsad_enabled: bool = True
    nsad_train_forward: str = "table"
    img_size: int = 16
    patch_size: int = 4
    in_channels: int = 1
    n_classes: int = 2
    seed: int = 0

    @property
    def tokens(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_values(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    def validate(self) -> None:
        if self.timesteps < 1 or self.blocks < 1 or self.n_classes < 2:
            raise ConfigError(f"degenerate model sizes: timesteps={self.timesteps}, "
                              f"blocks={self.blocks}, n_classes={self.n_classes}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.img_size % self.patch_size != 0:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch {self.patch_size}")
        if self.t_aw < 1:
            raise ConfigError(f"t_aw must be >= 1, got {self.t_aw}")
        if self.tau_max < 0 or self.tau_init < 0 or self.u_init < 0:
            raise ConfigError("decay and threshold parameters must be >= 0")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, "
                              f"got {self.attention_mode!r}")
        if self.nsad_train_forward not in NSAD_FORWARD_MODES:
            raise ConfigError(f"nsad_train_forward must be one of {NSAD_FORWARD_MODES}, "
                              f"got {self.nsad_train_forward!r}")
        # Construct LifParams for its own validation side effects.
        LifParams(self.tau_m, self.theta, self.surrogate_alpha)


def config_to_text(cfg: ModelConfig) -> str:
    """Canonical key=value serialization: sorted keys, one per line."""
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_from_dict(values: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    cfg = ModelConfig(**vars(base)) if base is not None else ModelConfig()
    types = {f.name: f.type for f in fields(ModelConfig)}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ConfigError(f"config key {key}: expected true/false, got {raw!r}")
            value = raw == "true"
        elif kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
        else:
            value = raw
        setattr(cfg, key, value)
    return cfg


def config_from_text(text: str) -> ModelConfig:
    return config_from_dict(parse_config_text(text))


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """[T, B, C, H, W] event frames -> [T, B, N, C*patch*patch] tokens."""
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ConfigError(f"expected [T, B, C, H, W] frames, got shape {frames.shape}")
    t, b, c, h, w = frames.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(t, b, c, gh, patch, gw, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(x.reshape(t, b, gh * gw, c * patch * patch), dtype=np.float64)


@dataclass
class BlockAttentionCapture:
    """Attention maps and output spikes recorded from one encoder block."""

    block: int
    raw: np.ndarray        # scores S, [T, B, H, N, N]
    denoised: np.ndarray   # maps A after the denoiser (== raw when disabled)
    output: np.ndarray     # block output activations, [T, B, N, D]


@dataclass
class EncoderBlock:
    wq: DiffTensor
    wk: DiffTensor
    wv: DiffTensor
    wo: DiffTensor
    w1: DiffTensor
    w2: DiffTensor
    tau: DiffTensor
    heads: list[NsadHead] = field(default_factory=list)


class SpikingTransformer:
    """The assembled network; owns its parameters and their tape."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.tape = Tape()
        self.params: dict[str, DiffTensor] = {}
        rng = make_rng(cfg.seed)
        d_model = cfg.embed_dim
        hidden = cfg.mlp_ratio * d_model

        def weight(name, fan_in, fan_out):
            data = rng.normal(0.0, INIT_GAIN / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.params[name] = self.tape.leaf(data)
            return self.params[name]

        weight("embed.w", cfg.patch_values, d_model)
        self.blocks: list[EncoderBlock] = []
        for l in range(cfg.blocks):
            blk = EncoderBlock(
                wq=weight(f"block{l}.attn.wq", d_model, d_model),
                wk=weight(f"block{l}.attn.wk", d_model, d_model),
                wv=weight(f"block{l}.attn.wv", d_model, d_model),
                wo=weight(f"block{l}.attn.wo", d_model, d_model),
                w1=weight(f"block{l}.mlp.w1", d_model, hidden),
                w2=weight(f"block{l}.mlp.w2", hidden, d_model),
                tau=self.tape.leaf(np.asarray(float(cfg.tau_init))),
            )
            self.params[f"block{l}.attn.tau"] = blk.tau
            for h in range(cfg.heads):
                head = NsadHead(self.tape, cfg.head_dim, u_init=cfg.u_init)
                blk.heads.append(head)
                for pname, dt in head.named_params():
                    self.params[f"block{l}.attn.nsad{h}.{pname}"] = dt
            self.blocks.append(blk)
        weight("head.w", d_model, cfg.n_classes)
        self.params["head.b"] = self.tape.leaf(np.zeros(cfg.n_classes))

    def parameters(self):
        return self.params.items()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def rebuild_tables(self) -> None:
        for blk in self.blocks:
            for head in blk.heads:
                head.rebuild()

    def forward(self, frames: np.ndarray, capture: list | None = None,
                smooth: bool = False) -> DiffTensor:
        """Compute class logits for time-major frames [T, B, C, H, W].

        ``capture`` collects one :class:`BlockAttentionCapture` per block.
        ``smooth=True`` relaxes the spike step and the denoiser gate to
        their continuous forms so the tape gradient matches finite
        differences (gradient checking only).
        """
        cfg = self.cfg
        x = patchify(frames, cfg.patch_size)
        if x.shape[0] != cfg.timesteps or x.shape[2] != cfg.tokens \
                or x.shape[3] != cfg.patch_values:
            raise ConfigError(f"frames of shape {frames.shape} do not match the "
                              f"configured geometry {cfg.timesteps}x{cfg.in_channels}"
                              f"x{cfg.img_size}x{cfg.img_size}")
        lifp = LifParams(cfg.tau_m, cfg.theta, cfg.surrogate_alpha)
        h = self.tape.leaf(x)
        s = lif_forward(matmul(h, self.params["embed.w"]), lifp, smooth=smooth)
        for idx, blk in enumerate(self.blocks):
            s = self._encoder_block(s, idx, blk, lifp, capture, smooth)
        pooled = reduce_mean(s, axes=(0, 2))
        return bias_add(matmul(pooled, self.params["head.w"]), self.params["head.b"])

    def _encoder_block(self, s, idx, blk, lifp, capture, smooth) -> DiffTensor:
        cfg = self.cfg
        tasa_on = cfg.attention_mode == "tasa"
        if tasa_on:
            tau_int = tau_round_ste(blk.tau, cfg.tau_max)
            f = temporal_filter(s, cfg.t_aw, tau_int)
        else:
            f = s
        q = lif_forward(matmul(f, blk.wq), lifp, smooth=smooth)
        k = lif_forward(matmul(f, blk.wk), lifp, smooth=smooth)
        v = lif_forward(matmul(f, blk.wv), lifp, smooth=smooth)
        sc = attention_scores(q, k, cfg.heads)
        if cfg.nsad_enabled:
            continuous = smooth or cfg.nsad_train_forward == "continuous"
            att = denoise(sc, blk.heads, continuous=continuous)
        else:
            att = sc.scores
        ctx = merge_heads(matmul(att, split_heads(v, cfg.heads)))
        if tasa_on:
            ctx = temporal_filter(ctx, cfg.t_aw, tau_int)
        o = lif_forward(matmul(ctx, blk.wo), lifp, smooth=smooth)
        s = add(s, o)
        m = lif_forward(matmul(s, blk.w1), lifp, smooth=smooth)
        m = lif_forward(matmul(m, blk.w2), lifp, smooth=smooth)
        out = add(s, m)
        if capture is not None:
            capture.append(BlockAttentionCapture(
                idx, sc.scores.value.data.copy(), att.value.data.copy(),
                out.value.data.copy()))
        return out

    def forward_logits(self, frames: np.ndarray, capture: list | None = None) -> np.ndarray:
        """Inference helper: forward values only, tape left clean."""
        mark = len(self.tape.nodes)
        logits = self.forward(frames, capture=capture)
        values = logits.value.data.copy()
        del self.tape.nodes[mark:]
        return values


def _table_records(model: SpikingTransformer):
    for l, blk in enumerate(model.blocks):
        for h, head in enumerate(blk.heads):
            yield f"block{l}.attn.nsad{h}.table", head.table


def save_checkpoint(model: SpikingTransformer, path, optimizer=None) -> None:
    """Write config and all named tensors; see module docstring for layout."""
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    blob = config_to_text(model.cfg).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)

    def record(name: str, arr: np.ndarray):
        kind = {"float64": "f8", "float32": "f4", "int64": "i8"}.get(arr.dtype.name)
        if kind is None:
            raise ConfigError(f"tensor {name} has unsupported dtype {arr.dtype}")
        code = _CODE_FOR_KIND[kind]
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    for name, p in model.parameters():
        record(name, p.value.data)
    for name, table in _table_records(model):
        record(name, table)
    if optimizer is not None:
        for name, arr in optimizer.state_tensors():
            record(name, arr)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    @property
    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild a model from disk; bitwise-faithful to the saved tensors.

    Raises :class:`FormatError` (with the byte offset) on a bad magic,
    unsupported version, truncation, or any unknown/mismatched record; no
    partially restored model is ever returned.
    """
    rdr = _Reader(Path(path).read_bytes())
    magic = rdr.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
    version = rdr.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}; "
                          f"this reader supports {CKPT_VERSION}", offset=4)
    blob = rdr.take(rdr.u32("config length"), "config blob")
    cfg = config_from_text(blob.decode("utf-8"))
    model = SpikingTransformer(cfg)
    params = dict(model.parameters())
    tables = dict(_table_records(model))
    opt_state: dict[str, np.ndarray] = {}
    seen: set[str] = set()
    while not rdr.at_end:
        start = rdr.pos
        name = rdr.take(rdr.u16("name length"), "name").decode("utf-8")
        code = rdr.u8("dtype code")
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name}", offset=start)
        dtype = _DTYPE_CODES[code]
        rank = rdr.u8("rank")
        shape = tuple(struct.unpack(f"<{rank}I", rdr.take(4 * rank, "dims")))
        count = int(np.prod(shape)) if rank else 1
        payload = rdr.take(count * dtype.itemsize, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        if name in params:
            if arr.shape != params[name].value.data.shape:
                raise FormatError(f"tensor {name} has shape {arr.shape}, model expects "
                                  f"{params[name].value.data.shape}", offset=start)
            params[name].value.data[...] = arr
        elif name in tables:
            tables[name][...] = arr
        elif name.startswith("opt."):
            opt_state[name] = arr
        else:
            raise FormatError(f"unknown tensor record {name!r}", offset=start)
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {', '.join(missing)}",
                          offset=rdr.pos)
    if set(tables) - seen:
        # Tables are derivable from the continuous parameters just loaded.
        model.rebuild_tables()
    if with_optimizer:
        return model, opt_state
    return model
