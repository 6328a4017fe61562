"""Initial group token built from scene grids and individual features.

The group representation that seeds the transformer stack comes from two
sources fused together:

* ``scene_tokens`` turns a coarse feature grid into K summary tokens per
  frame.  Each token is a convex combination of pixel embeddings, with the
  combination weights produced by a per-pixel linear map and a softmax over
  the pixel axis.  The K tokens are averaged into one vector per frame.
* ``individual_token`` lets a learned per-frame query cross-attend over the
  embedded individuals of that frame.

Both summaries are fused (sum or concatenation, then a linear map) into the
initial group token sequence.  When the builder is disabled the model falls
back to the bare learned query, so the query parameter lives on the model
and is passed in here.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .layers import DecoderLayer, Linear, _swap_last
from .tensor import ContractError, Tensor


class GroupTokenBuilder:
    """Produce the initial group token sequence [T, D] (or batched)."""

    def __init__(self, rng, channels, dim, heads, scene_tokens=8,
                 fuse_mode="sum", name="grg"):
        if scene_tokens < 1:
            raise ContractError("scene_tokens must be >= 1")
        if fuse_mode not in ("sum", "concat"):
            raise ContractError(f"unknown fuse_mode {fuse_mode!r}")
        self.channels = channels
        self.dim = dim
        self.K = scene_tokens
        self.fuse_mode = fuse_mode
        self.attn_map = Linear(rng, channels, scene_tokens, name=f"{name}.attn_map")
        self.embed = Linear(rng, channels, dim, name=f"{name}.embed")
        self.decoder = DecoderLayer(rng, dim, heads, name=f"{name}.decoder")
        fuse_in = 2 * dim if fuse_mode == "concat" else dim
        self.fuse = Linear(rng, fuse_in, dim, name=f"{name}.fuse")

    def params(self):
        out = {}
        for part in (self.attn_map, self.embed, self.decoder, self.fuse):
            out.update(part.params())
        return out

    def scene_tokens_full(self, scene):
        """All K tokens per frame: [..., C, H, W] -> [..., K, D]."""
        if scene.shape[-3] != self.channels:
            raise ContractError(
                f"scene has {scene.shape[-3]} channels, expected {self.channels}")
        h, w = scene.shape[-2], scene.shape[-1]
        lead = scene.shape[:-3]
        n = scene.ndim
        # channels last, then flatten pixels: [..., H*W, C]
        perm = tuple(range(n - 3)) + (n - 2, n - 1, n - 3)
        pixels = np.transpose(scene, perm).reshape(lead + (h * w, self.channels))
        pixels = Tensor(pixels, name="scene_pixels")
        logits = self.attn_map(pixels)                    # [..., P, K]
        weights = tz.softmax(_swap_last(logits), axis=-1)  # [..., K, P]
        emb = self.embed(pixels)                          # [..., P, D]
        return tz.matmul(weights, emb)                    # [..., K, D]

    def scene_summary(self, scene):
        """Average of the K scene tokens: [..., C, H, W] -> [..., D]."""
        return tz.tensor_mean(self.scene_tokens_full(scene), axis=-2)

    def individual_token(self, query, x_i, train=False, rng=None):
        """Cross-attend a per-frame query over that frame's individuals.

        query: [T, D] learned parameter; x_i: [..., T, N, D] embedded
        individuals.  Returns [..., T, D].
        """
        t_len, dim = query.shape
        if x_i.shape[-3] != t_len:
            raise ContractError(
                f"individuals cover {x_i.shape[-3]} frames, query has {t_len}")
        q = tz.reshape(query, (t_len, 1, dim))
        # align the query with any leading batch axes of the individuals
        for size in reversed(x_i.shape[:-3]):
            q = tz.reshape(q, (1,) + q.shape)
            q = tz.tile_axis(q, 0, size) if size > 1 else q
        out = self.decoder(q, x_i, train=train, rng=rng)  # [..., T, 1, D]
        return tz.reshape(out, out.shape[:-2] + (dim,))

    def __call__(self, query, scene, x_i, train=False, rng=None):
        """Fused initial group tokens: [..., T, D]."""
        scene_tok = self.scene_summary(scene)
        ind_tok = self.individual_token(query, x_i, train=train, rng=rng)
        if self.fuse_mode == "concat":
            return self.fuse(tz.concat([scene_tok, ind_tok], axis=-1))
        return self.fuse(scene_tok + ind_tok)
