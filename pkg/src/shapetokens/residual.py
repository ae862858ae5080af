"""Learned residual over prompt-token embeddings, driven by shape tokens.

A stack of cross-attention blocks reads the 77-row prompt embedding as
queries against the 65 shape tokens as keys/values and emits a 77-row
residual. The final projection starts at zero, so an untrained mapper is an
exact identity on prompts. Guided application interpolates the residual
into selected token rows with a strength in [0, 1].

Parameters are torch tensors; float32 is the canonical storage dtype (the
parameter file is little-endian float32). forward accepts numpy arrays
(returns numpy) or torch tensors (stays differentiable).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from shapetokens.prompts import STRATEGIES, TokenLayout

__all__ = [
    "ParamsError",
    "BlockParams",
    "MapperParams",
    "GuidanceSpec",
    "ResidualMapper",
    "init_params",
    "scaled_dot_attention",
    "apply_residual",
    "save_params",
    "load_params",
]

PARAMS_MAGIC = b"STRM"
PARAMS_VERSION = 1


class ParamsError(ValueError):
    """Malformed, truncated, or dimensionally incompatible parameter data."""


@dataclass
class BlockParams:
    """One cross-attention block: attention projections, MLP, two layer norms."""

    q: torch.Tensor        # (text_dim, attn_dim)
    k: torch.Tensor        # (shape_dim, attn_dim)
    v: torch.Tensor        # (shape_dim, attn_dim)
    out: torch.Tensor      # (attn_dim, text_dim)
    mlp1_weight: torch.Tensor  # (text_dim, hidden_dim)
    mlp1_bias: torch.Tensor    # (hidden_dim,)
    mlp2_weight: torch.Tensor  # (hidden_dim, text_dim)
    mlp2_bias: torch.Tensor    # (text_dim,)
    ln1_gain: torch.Tensor
    ln1_bias: torch.Tensor
    ln2_gain: torch.Tensor
    ln2_bias: torch.Tensor


_BLOCK_FIELDS = [f.name for f in fields(BlockParams)]


@dataclass
class MapperParams:
    blocks: list[BlockParams]
    final_weight: torch.Tensor  # (text_dim, text_dim), zero at init
    num_heads: int = 1

    @property
    def text_dim(self) -> int:
        return self.final_weight.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.blocks[0].k.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.blocks[0].q.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.blocks[0].mlp1_weight.shape[1]

    @property
    def dtype(self) -> torch.dtype:
        return self.final_weight.dtype

    def named_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        """All tensors under their serialized names, in file order."""
        for i, block in enumerate(self.blocks):
            for name in _BLOCK_FIELDS:
                yield f"block{i}.{name}", getattr(block, name)
        yield "final_weight", self.final_weight

    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.named_tensors()]

    def to_dtype(self, dtype: torch.dtype) -> "MapperParams":
        """Detached copy in ``dtype`` (e.g. float64 for numerical checks)."""
        blocks = [
            BlockParams(**{n: getattr(b, n).detach().to(dtype).clone() for n in _BLOCK_FIELDS})
            for b in self.blocks
        ]
        return MapperParams(blocks, self.final_weight.detach().to(dtype).clone(), self.num_heads)

    def requires_grad_(self, flag: bool = True) -> "MapperParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self


@dataclass(frozen=True)
class GuidanceSpec:
    """How strongly, and into which token rows, the residual is applied."""

    lam: float = 1.0
    strategy: str = "object_and_eos"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"guidance strength must lie in [0, 1], got {self.lam}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")


def init_params(
    text_dim: int,
    shape_dim: int,
    attn_dim: int,
    hidden_dim: int,
    seed: int = 0,
    num_blocks: int = 6,
    num_heads: int = 1,
) -> MapperParams:
    """Seeded scaled-normal initialization with a zero final projection.

    Weights are drawn from one generator in a fixed order, so equal seeds
    give bitwise-equal parameters. Layer norms start at identity, MLP biases
    at zero, and the final projection at zero, which makes the initial
    residual exactly zero for every input.
    """
    for name, value in (("text_dim", text_dim), ("shape_dim", shape_dim),
                        ("attn_dim", attn_dim), ("hidden_dim", hidden_dim),
                        ("num_blocks", num_blocks), ("num_heads", num_heads)):
        if value < 1:
            raise ParamsError(f"{name} must be positive, got {value}")
    if attn_dim % num_heads:
        raise ParamsError(f"attn_dim {attn_dim} not divisible by num_heads {num_heads}")
    rng = np.random.default_rng(seed)

    def draw(rows: int, cols: int) -> torch.Tensor:
        w = rng.standard_normal((rows, cols)) / np.sqrt(rows)
        return torch.from_numpy(w.astype(np.float32))

    blocks = []
    for _ in range(num_blocks):
        blocks.append(BlockParams(
            q=draw(text_dim, attn_dim),
            k=draw(shape_dim, attn_dim),
            v=draw(shape_dim, attn_dim),
            out=draw(attn_dim, text_dim),
            mlp1_weight=draw(text_dim, hidden_dim),
            mlp1_bias=torch.zeros(hidden_dim),
            mlp2_weight=draw(hidden_dim, text_dim),
            mlp2_bias=torch.zeros(text_dim),
            ln1_gain=torch.ones(text_dim),
            ln1_bias=torch.zeros(text_dim),
            ln2_gain=torch.ones(text_dim),
            ln2_bias=torch.zeros(text_dim),
        ))
    return MapperParams(blocks, torch.zeros(text_dim, text_dim), num_heads)


def scaled_dot_attention(
    query: torch.Tensor, key: torch.Tensor, value: torch.Tensor, num_heads: int = 1
) -> torch.Tensor:
    """Softmax attention over key rows, scaled by the inverse root head width."""
    q_len, dim = query.shape
    if dim % num_heads:
        raise ParamsError(f"attention width {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads
    q = query.reshape(q_len, num_heads, head_dim).transpose(0, 1)
    k = key.reshape(key.shape[0], num_heads, head_dim).transpose(0, 1)
    v = value.reshape(value.shape[0], num_heads, head_dim).transpose(0, 1)
    scores = q @ k.transpose(1, 2) / np.sqrt(head_dim)
    mixed = torch.softmax(scores, dim=-1) @ v
    return mixed.transpose(0, 1).reshape(q_len, dim)


class ResidualMapper:
    """Applies the block stack; numpy in/numpy out, torch in/torch out."""

    def __init__(self, params: MapperParams):
        self.params = params

    def __call__(self, shape_tokens: Any, prompt_emb: Any) -> Any:
        return self.forward(shape_tokens, prompt_emb)

    def forward(self, shape_tokens: Any, prompt_emb: Any) -> Any:
        numpy_mode = not (
            isinstance(shape_tokens, torch.Tensor) or isinstance(prompt_emb, torch.Tensor)
        )
        dtype = self.params.dtype
        b = torch.as_tensor(shape_tokens).to(dtype)
        t = torch.as_tensor(prompt_emb).to(dtype)
        if b.ndim != 2 or b.shape[1] != self.params.shape_dim:
            raise ParamsError(f"shape tokens {tuple(b.shape)} incompatible with shape_dim {self.params.shape_dim}")
        if t.ndim != 2 or t.shape[1] != self.params.text_dim:
            raise ParamsError(f"prompt embedding {tuple(t.shape)} incompatible with text_dim {self.params.text_dim}")
        if numpy_mode:
            with torch.no_grad():
                return self._stack(b, t).numpy()
        return self._stack(b, t)

    def _stack(self, b: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = t
        for blk in self.params.blocks:
            q_in = F.layer_norm(h, (h.shape[1],), blk.ln1_gain, blk.ln1_bias)
            attn = scaled_dot_attention(q_in @ blk.q, b @ blk.k, b @ blk.v, self.params.num_heads)
            h = attn @ blk.out + h
            m_in = F.layer_norm(h, (h.shape[1],), blk.ln2_gain, blk.ln2_bias)
            h = F.gelu(m_in @ blk.mlp1_weight + blk.mlp1_bias) @ blk.mlp2_weight + blk.mlp2_bias + h
        return h @ self.params.final_weight


def apply_residual(prompt_emb: Any, delta: Any, spec: GuidanceSpec, layout: TokenLayout) -> Any:
    """Blend ``delta`` into the rows selected by the guidance strategy.

    Selected rows become ``prompt_emb + lam * delta``; every other row is
    returned bit-identical. A strength of exactly zero returns an unchanged
    copy regardless of strategy.
    """
    layout.validate()
    torch_mode = isinstance(prompt_emb, torch.Tensor) or isinstance(delta, torch.Tensor)
    if torch_mode:
        t = prompt_emb if isinstance(prompt_emb, torch.Tensor) else torch.as_tensor(prompt_emb)
        d = delta if isinstance(delta, torch.Tensor) else torch.as_tensor(delta, dtype=t.dtype)
    else:
        t = np.asarray(prompt_emb)
        d = np.asarray(delta)
    if t.shape != d.shape:
        raise ValueError(f"residual shape {tuple(d.shape)} != prompt shape {tuple(t.shape)}")
    if t.shape[0] != layout.max_tokens:
        raise ValueError(f"prompt has {t.shape[0]} rows, layout expects {layout.max_tokens}")
    out = t.clone() if torch_mode else t.copy()
    if spec.lam == 0.0:
        return out
    rows = layout.selected_rows(spec.strategy)
    out[rows] = t[rows] + spec.lam * d[rows]
    return out


def save_params(params: MapperParams, path: str | Path) -> None:
    """Write the versioned little-endian float32 container."""
    chunks = [PARAMS_MAGIC, struct.pack(
        "<7I", PARAMS_VERSION, params.text_dim, params.shape_dim,
        params.attn_dim, params.hidden_dim, len(params.blocks), params.num_heads,
    )]
    for name, tensor in params.named_tensors():
        raw = np.asarray(
            tensor.detach().to(torch.float32).numpy(), dtype="<f4"
        ).tobytes()
        encoded = name.encode("ascii")
        chunks.append(struct.pack("<HI", len(encoded), len(raw)))
        chunks.append(encoded)
        chunks.append(raw)
    Path(path).write_bytes(b"".join(chunks))


def _expected_shapes(
    text_dim: int, shape_dim: int, attn_dim: int, hidden_dim: int, num_blocks: int
) -> list[tuple[str, tuple[int, ...]]]:
    shapes = {
        "q": (text_dim, attn_dim), "k": (shape_dim, attn_dim), "v": (shape_dim, attn_dim),
        "out": (attn_dim, text_dim),
        "mlp1_weight": (text_dim, hidden_dim), "mlp1_bias": (hidden_dim,),
        "mlp2_weight": (hidden_dim, text_dim), "mlp2_bias": (text_dim,),
        "ln1_gain": (text_dim,), "ln1_bias": (text_dim,),
        "ln2_gain": (text_dim,), "ln2_bias": (text_dim,),
    }
    order = [(f"block{i}.{n}", shapes[n]) for i in range(num_blocks) for n in _BLOCK_FIELDS]
    order.append(("final_weight", (text_dim, text_dim)))
    return order


def load_params(
    path: str | Path,
    *,
    expect_text_dim: int | None = None,
    expect_shape_dim: int | None = None,
) -> MapperParams:
    """Read a parameter file, verifying structure and optional dimensions."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    if len(view) < 4 + 28 or bytes(view[:4]) != PARAMS_MAGIC:
        raise ParamsError(f"{path}: not a mapper parameter file")
    version, text_dim, shape_dim, attn_dim, hidden_dim, num_blocks, num_heads = struct.unpack(
        "<7I", view[4:32]
    )
    if version != PARAMS_VERSION:
        raise ParamsError(f"{path}: format version {version} unsupported (expected {PARAMS_VERSION})")
    if expect_text_dim is not None and text_dim != expect_text_dim:
        raise ParamsError(f"{path}: file has text_dim {text_dim}, context requires {expect_text_dim}")
    if expect_shape_dim is not None and shape_dim != expect_shape_dim:
        raise ParamsError(f"{path}: file has shape_dim {shape_dim}, context requires {expect_shape_dim}")
    offset = 32
    loaded: dict[str, torch.Tensor] = {}
    for name, shape in _expected_shapes(text_dim, shape_dim, attn_dim, hidden_dim, num_blocks):
        if offset + 6 > len(view):
            raise ParamsError(f"{path}: truncated before tensor {name!r}")
        name_len, byte_len = struct.unpack("<HI", view[offset : offset + 6])
        offset += 6
        if offset + name_len + byte_len > len(view):
            raise ParamsError(f"{path}: truncated inside tensor {name!r}")
        found = bytes(view[offset : offset + name_len]).decode("ascii", errors="replace")
        offset += name_len
        if found != name:
            raise ParamsError(f"{path}: expected tensor {name!r}, found {found!r}")
        count = int(np.prod(shape))
        if byte_len != 4 * count:
            raise ParamsError(f"{path}: tensor {name!r} has {byte_len} bytes, expected {4 * count}")
        arr = np.frombuffer(view[offset : offset + byte_len], dtype="<f4").reshape(shape)
        offset += byte_len
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    if offset != len(view):
        raise ParamsError(f"{path}: {len(view) - offset} trailing bytes after final tensor")
    blocks = [
        BlockParams(**{n: loaded[f"block{i}.{n}"] for n in _BLOCK_FIELDS})
        for i in range(num_blocks)
    ]
    return MapperParams(blocks, loaded["final_weight"], num_heads)
