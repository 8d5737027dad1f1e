"""Small frozen pre-LN transformer used as feature extractor and classifier body.

Inputs are flat vectors of ``n_tokens * patch_dim`` floats. They are cut into
``n_tokens`` patches and linearly projected to width ``dim``. The class token
and patch tokens get fixed sinusoidal position encodings; prompt rows are
appended afterwards without any.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from kaprompt.errors import DimensionError, EmptyInputError
from kaprompt.numerics import Tensor, ops

BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "w2")


def sinusoidal_encoding(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    enc = np.zeros((n_positions, dim))
    enc[:, 0::2] = np.sin(pos * freq)
    enc[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return enc


class FrozenBackbone:
    """Deterministically initialised, read-only transformer encoder."""

    def __init__(self, seed: int = 0, n_tokens: int = 8, patch_dim: int = 8, dim: int = 32,
                 n_blocks: int = 2, n_heads: int = 4, ffn_dim: int = 64, params=None):
        if dim % n_heads:
            raise DimensionError(f"backbone: width {dim} not divisible by {n_heads} heads")
        self.seed = int(seed)
        self.n_tokens = n_tokens
        self.patch_dim = patch_dim
        self.dim = dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        if params is None:
            params = self._init_params()
        expected = self.param_shapes()
        if set(params) != set(expected):
            raise DimensionError(f"backbone: parameter names {sorted(params)} != {sorted(expected)}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"backbone: {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            self.params[name] = arr
        pe = sinusoidal_encoding(n_tokens + 1, dim)
        pe.flags.writeable = False
        self.position_encoding = pe

    @property
    def input_dim(self) -> int:
        return self.n_tokens * self.patch_dim

    def config(self) -> dict:
        return {"seed": self.seed, "n_tokens": self.n_tokens, "patch_dim": self.patch_dim,
                "dim": self.dim, "n_blocks": self.n_blocks, "n_heads": self.n_heads,
                "ffn_dim": self.ffn_dim}

    def param_shapes(self) -> dict[str, tuple]:
        d, f = self.dim, self.ffn_dim
        shapes = {"patch_proj": (self.patch_dim, d), "cls": (1, d),
                  "lnf_g": (d,), "lnf_b": (d,)}
        per_block = {"ln1_g": (d,), "ln1_b": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d),
                     "wo": (d, d), "ln2_g": (d,), "ln2_b": (d,), "w1": (d, f), "w2": (f, d)}
        for b in range(self.n_blocks):
            for name, shape in per_block.items():
                shapes[f"block{b}.{name}"] = shape
        return shapes

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        std = 1.0 / math.sqrt(self.dim)
        params = {}
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                params[name] = np.ones(shape)
            elif leaf.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, std, size=shape)
        return params

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # -- forward pieces -------------------------------------------------

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise DimensionError(f"tokenize: expected input length {self.input_dim}, got shape {x.shape}")
        return xb, single

    def tokenize(self, x) -> np.ndarray:
        """(L_h, D) patch embeddings for one input, or (B, L_h, D) for a batch."""
        xb, single = self._as_batch(x)
        patches = xb.reshape(xb.shape[0], self.n_tokens, self.patch_dim)
        h = patches @ self.params["patch_proj"]
        return h[0] if single else h

    def _input_rows(self, xb) -> np.ndarray:
        h = self.tokenize(xb)
        cls = np.broadcast_to(self.params["cls"], (xb.shape[0], 1, self.dim))
        return np.concatenate([cls, h], axis=1) + self.position_encoding

    def _block(self, x: Tensor, b: int) -> Tensor:
        p = {name: self.params[f"block{b}.{name}"] for name in BLOCK_PARAMS}
        h = ops.layer_norm(x, p["ln1_g"], p["ln1_b"])
        att = ops.attention(h @ p["wq"], h @ p["wk"], h @ p["wv"], self.n_heads)
        x = x + att @ p["wo"]
        h = ops.layer_norm(x, p["ln2_g"], p["ln2_b"])
        return x + ops.gelu(h @ p["w1"]) @ p["w2"]

    def encode(self, x, prompt=None) -> Tensor:
        """Final class-token embedding (B, D) for ``[[cls]; h_x; prompt]``."""
        xb, _ = self._as_batch(x)
        seq = Tensor(self._input_rows(xb))
        if prompt is not None:
            prompt = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
            if prompt.ndim == 2:
                if prompt.shape[1] != self.dim:
                    raise DimensionError(f"forward_with_prompt: prompt shape {prompt.shape}, width must be {self.dim}")
                prompt = ops.reshape(prompt, (1,) + prompt.shape)
            if prompt.ndim != 3 or prompt.shape[2] != self.dim or prompt.shape[0] not in (1, xb.shape[0]):
                raise DimensionError(f"forward_with_prompt: prompt shape {prompt.shape} does not match "
                                     f"batch {xb.shape[0]} and width {self.dim}")
            if prompt.shape[0] != xb.shape[0]:
                prompt = ops.concat([prompt] * xb.shape[0], axis=0)
            seq = ops.concat([seq, prompt], axis=1)
        for b in range(self.n_blocks):
            seq = self._block(seq, b)
        cls = seq[:, 0, :]
        return ops.layer_norm(cls, self.params["lnf_g"], self.params["lnf_b"])

    def extract_query(self, x) -> np.ndarray:
        """Prompt-free class-token output q(x); never part of a gradient."""
        q = self.encode(x).data
        return q[0] if np.asarray(x).ndim == 1 else q

    def extract_features_batch(self, xs, chunk: int = 256) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[0] == 0:
            raise EmptyInputError("extract_features_batch: dataset is empty")
        return np.concatenate([self.extract_query(xs[i:i + chunk]) for i in range(0, len(xs), chunk)])

    def forward_with_prompt(self, x, prompt, head: ClassifierHead) -> Tensor:
        """Logits for ``x`` with ``prompt`` (L_p, D) or per-sample (B, L_p, D) appended."""
        if prompt is None:
            raise DimensionError("forward_with_prompt: prompt is required")
        logits = head(self.encode(x, prompt))
        return logits[0] if np.asarray(x).ndim == 1 else logits


class ClassifierHead:
    """Linear head shared by every domain."""

    def __init__(self, dim: int, n_classes: int, seed: int = 0, weight=None, bias=None):
        rng = np.random.default_rng(seed)
        if weight is None:
            weight = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, n_classes))
        if bias is None:
            bias = np.zeros(n_classes)
        self.weight = Tensor(np.array(weight, dtype=np.float64), requires_grad=True, name="head.weight")
        self.bias = Tensor(np.array(bias, dtype=np.float64), requires_grad=True, name="head.bias")
        if self.weight.shape != (dim, n_classes) or self.bias.shape != (n_classes,):
            raise DimensionError(f"head: weight {self.weight.shape}, bias {self.bias.shape} "
                                 f"for dim {dim}, {n_classes} classes")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, features) -> Tensor:
        return ops.matmul(features, self.weight) + self.bias

    def checksum(self) -> str:
        h = hashlib.sha256(self.weight.data.tobytes())
        h.update(self.bias.data.tobytes())
        return h.hexdigest()
