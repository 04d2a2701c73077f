"""Transformer building blocks with explicit forward/backward.

Each layer keeps the tensors it needs from its most recent ``forward`` call,
so a layer instance must not be applied twice inside one forward pass.
``backward`` accumulates into ``Parameter.grad`` and returns input gradients.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as F
from .numerics import DTYPE, Parameter

INIT_STD = 0.02


class Module:
    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self._inits: dict[str, str | float] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, shape: tuple[int, ...], init: str | float) -> Parameter:
        p = Parameter(name, np.zeros(shape, dtype=DTYPE))
        self._params[name] = p
        self._inits[name] = init
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def _named_inits(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p, self._inits[name]
        for cname, child in self._children.items():
            yield from child._named_inits(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def initialize(self, rng: np.random.Generator, prefix: str = "") -> None:
        """Fill parameters in name order and stamp each with its full path."""
        for name, p, init in self._named_inits(prefix):
            p.name = name
            if init == "normal":
                p.value[...] = rng.normal(0.0, INIT_STD, size=p.shape)
            elif init == "zeros":
                p.value[...] = 0.0
            elif init == "ones":
                p.value[...] = 1.0
            else:
                p.value[...] = float(init)


class ModuleList(Module):
    def __init__(self, modules) -> None:
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self.add_child(str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int) -> None:
        super().__init__()
        self.weight = self.add_param("weight", (d_in, d_out), "normal")
        self.bias = self.add_param("bias", (d_out,), "zeros")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return F.linear(x, self.weight.value, self.bias.value)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = F.linear_backward(dout, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = F.LN_EPS) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", (d,), "ones")
        self.beta = self.add_param("beta", (d,), "zeros")

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = F.layer_norm(x, self.gamma.value, self.beta.value, self.eps)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dg, db = F.layer_norm_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Embedding(Module):
    def __init__(self, rows: int, d: int) -> None:
        super().__init__()
        self.weight = self.add_param("weight", (rows, d), "normal")

    def forward(self, ids: np.ndarray) -> np.ndarray:
        self._ids = ids
        return F.embedding_lookup(self.weight.value, ids)

    def backward(self, dout: np.ndarray) -> None:
        self.weight.grad += F.embedding_backward(dout, self._ids, self.weight.shape[0])


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int) -> None:
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.query = self.add_child("query", Linear(d_model, d_model))
        self.key = self.add_child("key", Linear(d_model, d_model))
        self.value = self.add_child("value", Linear(d_model, d_model))
        self.output = self.add_child("output", Linear(d_model, d_model))

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(x: np.ndarray) -> np.ndarray:
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def forward(self, xq: np.ndarray, xkv: np.ndarray, kv_mask: np.ndarray) -> np.ndarray:
        """``xq`` (B, Lq, d) attends over ``xkv`` (B, Lk, d); ``kv_mask`` is (B, Lk)."""
        q = self._split(self.query.forward(xq))
        k = self._split(self.key.forward(xkv))
        v = self._split(self.value.forward(xkv))
        ctx, self._cache = F.attention(q, k, v, kv_mask[:, None, None, :])
        return self.output.forward(self._merge(ctx))

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dctx = self._split(self.output.backward(dout))
        dq, dk, dv = F.attention_backward(dctx, self._cache)
        dxq = self.query.backward(self._merge(dq))
        dxkv = self.key.backward(self._merge(dk)) + self.value.backward(self._merge(dv))
        return dxq, dxkv


class AttentionBlock(Module):
    """``LN(x + MHA(x, context))``, post-LN."""

    def __init__(self, d_model: int, n_heads: int) -> None:
        super().__init__()
        self.attention = self.add_child("attention", MultiHeadAttention(d_model, n_heads))
        self.norm = self.add_child("norm", LayerNorm(d_model))

    def forward(self, x: np.ndarray, context: np.ndarray, context_mask: np.ndarray) -> np.ndarray:
        return self.norm.forward(x + self.attention.forward(x, context, context_mask))

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.norm.backward(dy)
        dxq, dctx = self.attention.backward(d)
        return d + dxq, dctx


class FeedForwardBlock(Module):
    """``LN(x + W2 gelu(W1 x))``, post-LN."""

    def __init__(self, d_model: int, d_ff: int) -> None:
        super().__init__()
        self.intermediate = self.add_child("intermediate", Linear(d_model, d_ff))
        self.output = self.add_child("output", Linear(d_ff, d_model))
        self.norm = self.add_child("norm", LayerNorm(d_model))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = self.intermediate.forward(x)
        self._cdf = F.gaussian_cdf(self._pre)
        return self.norm.forward(x + self.output.forward(F.gelu(self._pre, self._cdf)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.norm.backward(dy)
        dh = F.gelu_backward(self.output.backward(d), self._pre, self._cdf)
        return d + self.intermediate.backward(dh)


class EncoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.self_attn = self.add_child("self_attn", AttentionBlock(d_model, n_heads))
        self.ffn = self.add_child("ffn", FeedForwardBlock(d_model, d_ff))

    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.ffn.forward(self.self_attn.forward(x, x, mask))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dctx = self.self_attn.backward(self.ffn.backward(dy))
        return dx + dctx


class Encoder(Module):
    """A stack of self-attention layers over one stream."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.layers = self.add_child(
            "layers", ModuleList(EncoderLayer(d_model, n_heads, d_ff) for _ in range(n_layers))
        )

    def forward(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, mask)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers.items):
            dy = layer.backward(dy)
        return dy


class CrossLayer(Module):
    """Two-stream layer: cross-attention both ways, then self-attention, then FFN."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.text_cross = self.add_child("text_cross", AttentionBlock(d_model, n_heads))
        self.obj_cross = self.add_child("obj_cross", AttentionBlock(d_model, n_heads))
        self.text_self = self.add_child("text_self", AttentionBlock(d_model, n_heads))
        self.obj_self = self.add_child("obj_self", AttentionBlock(d_model, n_heads))
        self.text_ffn = self.add_child("text_ffn", FeedForwardBlock(d_model, d_ff))
        self.obj_ffn = self.add_child("obj_ffn", FeedForwardBlock(d_model, d_ff))

    def forward(self, t, o, t_mask, o_mask):
        # both cross directions read the layer inputs, not each other's outputs
        t1 = self.text_cross.forward(t, o, o_mask)
        o1 = self.obj_cross.forward(o, t, t_mask)
        t2 = self.text_self.forward(t1, t1, t_mask)
        o2 = self.obj_self.forward(o1, o1, o_mask)
        return self.text_ffn.forward(t2), self.obj_ffn.forward(o2)

    def backward(self, dt, do):
        dt2 = self.text_ffn.backward(dt)
        do2 = self.obj_ffn.backward(do)
        a, b = self.text_self.backward(dt2)
        dt1 = a + b
        a, b = self.obj_self.backward(do2)
        do1 = a + b
        dt_q, do_ctx = self.text_cross.backward(dt1)
        do_q, dt_ctx = self.obj_cross.backward(do1)
        return dt_q + dt_ctx, do_q + do_ctx


class TextEmbedding(Module):
    """Word plus learned position embedding, then layer norm."""

    def __init__(self, vocab_size: int, max_len: int, d_model: int) -> None:
        super().__init__()
        self.word = self.add_child("word", Embedding(vocab_size, d_model))
        self.position = self.add_child("position", Embedding(max_len, d_model))
        self.norm = self.add_child("norm", LayerNorm(d_model))

    def forward(self, ids: np.ndarray) -> np.ndarray:
        length = ids.shape[1]
        pos = np.broadcast_to(np.arange(length), ids.shape)
        return self.norm.forward(self.word.forward(ids) + self.position.forward(pos))

    def backward(self, dy: np.ndarray) -> None:
        d = self.norm.backward(dy)
        self.word.backward(d)
        self.position.backward(d)


class ObjectEmbedding(Module):
    """``(LN(W_f feat) + LN(W_p box)) / 2`` per object; no positional term."""

    def __init__(self, d_feat: int, d_model: int) -> None:
        super().__init__()
        self.feat_proj = self.add_child("feat_proj", Linear(d_feat, d_model))
        self.feat_norm = self.add_child("feat_norm", LayerNorm(d_model))
        self.box_proj = self.add_child("box_proj", Linear(4, d_model))
        self.box_norm = self.add_child("box_norm", LayerNorm(d_model))

    def forward(self, feats: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        f = self.feat_norm.forward(self.feat_proj.forward(feats))
        b = self.box_norm.forward(self.box_proj.forward(boxes))
        return 0.5 * (f + b)

    def backward(self, dy: np.ndarray) -> None:
        half = 0.5 * dy
        self.feat_proj.backward(self.feat_norm.backward(half))
        self.box_proj.backward(self.box_norm.backward(half))


class ClassifierHead(Module):
    """linear -> GELU -> layer norm -> linear -> sigmoid, mapping (B, d) to (B,)."""

    def __init__(self, d_model: int) -> None:
        super().__init__()
        self.linear1 = self.add_child("linear1", Linear(d_model, d_model))
        self.norm = self.add_child("norm", LayerNorm(d_model))
        self.linear2 = self.add_child("linear2", Linear(d_model, 1))
        self.activation = F.gelu
        self.activation_backward = F.gelu_backward

    def forward(self, pooled: np.ndarray) -> np.ndarray:
        self._pre = self.linear1.forward(pooled)
        h = self.norm.forward(self.activation(self._pre))
        self._prob = F.sigmoid(self.linear2.forward(h)[:, 0])
        return self._prob

    def backward(self, dprob: np.ndarray) -> np.ndarray:
        dz = F.sigmoid_backward(dprob, self._prob)[:, None]
        dh = self.norm.backward(self.linear2.backward(dz))
        return self.linear1.backward(self.activation_backward(dh, self._pre))
