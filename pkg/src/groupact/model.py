"""Clustered spatial-temporal transformer over multi-agent clips.

The model embeds per-agent features, adds a learnable temporal position
embedding, builds an initial group token sequence (from scene grids and
individuals, or a bare learned query), and runs a stack of blocks.  Each
block refines the individual representations with spatial attention over
the roster (optionally clustered), temporal attention over each agent's
timeline, and a pair of cross decoders that exchange the two views; a
group decoder then updates the group tokens against the refined roster.

Clustered attention groups the spatial queries with k-means, restricts
the token-level attention to within-cluster pairs, and runs a second
attention among the cluster centroids whose output is added back to each
member.  Assignments are recomputed from the current queries (hard, no
gradient); the centroid features are differentiable means of the member
queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import clustering
from . import tensor as tz
from .config import GeneratorConfig, TrainConfig, stream_rng, stream_seed
from .group_token import GroupTokenBuilder
from .heads import ClassifierHeads
from .layers import (DecoderLayer, EncoderLayer, Linear, fan_in_uniform,
                     scaled_dot_attention, small_normal)
from .synth import scene_channels
from .tensor import ContractError, Tensor

_CLUSTER_SCOPES = ("frame", "joint")


@dataclass(frozen=True)
class ClusterConfig:
    """How the spatial attention is clustered inside a block."""

    C: int = 4
    mode: str = "lloyd"       # stateless per call, or "minibatch" (stateful)
    iters: int = 8
    intra: bool = True        # mask token attention to within-cluster pairs
    inter: bool = True        # add centroid-level attention back to members
    scope: str = "frame"      # cluster each frame, or the whole clip jointly

    def validate(self):
        if self.C < 1:
            raise ContractError(f"cluster count must be >= 1, got {self.C}")
        if self.mode not in ("lloyd", "minibatch"):
            raise ContractError(f"unknown cluster mode {self.mode!r}")
        if self.iters < 1:
            raise ContractError(f"kmeans iters must be >= 1, got {self.iters}")
        if self.scope not in _CLUSTER_SCOPES:
            raise ContractError(f"unknown cluster scope {self.scope!r}")

    @property
    def active(self):
        """A single cluster turns the mechanism off entirely."""
        return self.C > 1 and (self.intra or self.inter)


def assignment_matrices(labels, C):
    """Constant matrices derived from hard assignments.

    Returns (mask, mean_map, member_map): an additive [-1e9/0] attention
    mask of shape [..., N, N], a [..., C, N] matrix averaging members into
    their centroid, and its [..., N, C] one-hot transpose broadcasting a
    centroid row back to each member.  Empty clusters get zero rows.
    """
    labels = np.asarray(labels)
    same = labels[..., :, None] == labels[..., None, :]
    mask = np.where(same, 0.0, -1e9)
    member = (labels[..., None] == np.arange(C)).astype(np.float64)
    counts = member.sum(axis=-2, keepdims=True)
    mean_map = np.swapaxes(member / np.maximum(counts, 1.0), -1, -2)
    return mask, mean_map, member


class InterGroupAttention:
    """Single-head attention among cluster centroid features."""

    def __init__(self, rng, dim, name="inter"):
        self.name = name
        self.dim = dim
        self.w_q = fan_in_uniform(rng, dim, (dim, dim), name=f"{name}.w_q")
        self.w_k = fan_in_uniform(rng, dim, (dim, dim), name=f"{name}.w_k")
        self.w_v = fan_in_uniform(rng, dim, (dim, dim), name=f"{name}.w_v")

    def __call__(self, m):
        q = tz.matmul(m, self.w_q)
        k = tz.matmul(m, self.w_k)
        v = tz.matmul(m, self.w_v)
        return scaled_dot_attention(q, k, v, 1.0 / sqrt(self.dim),
                                    residual=False)

    def params(self):
        return {f"{self.name}.w_q": self.w_q, f"{self.name}.w_k": self.w_k,
                f"{self.name}.w_v": self.w_v}


def _swap_tn(x):
    """Exchange the time and roster axes: [..., T, N, D] <-> [..., N, T, D]."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return tz.transpose(x, axes)


def _np_attention_stats(h, attn, mask):
    """Entropy and peakedness of the spatial attention, computed offline."""
    heads = attn.heads
    d_h = attn.dim // heads
    q = h @ attn.w_q.data
    k = h @ attn.w_k.data
    split = lambda a: np.swapaxes(
        a.reshape(a.shape[:-1] + (heads, d_h)), -3, -2)
    scores = split(q) @ np.swapaxes(split(k), -1, -2) / sqrt(d_h)
    if mask is not None:
        scores = scores + mask[..., None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    entropy = float(-(w * np.log(w + 1e-12)).sum(-1).mean())
    return {"entropy": entropy, "max_weight": float(w.max())}


class SttBlock:
    """One spatial-temporal block plus its group decoder."""

    def __init__(self, rng, dim, heads, dropout, cluster_cfg, variant="ours",
                 name="block"):
        cluster_cfg.validate()
        self.name = name
        self.variant = variant
        self.cluster_cfg = cluster_cfg
        self.cluster_state = None
        self.spatial = EncoderLayer(rng, dim, heads, dropout,
                                    name=f"{name}.spatial")
        self.inter_attn = InterGroupAttention(rng, dim, name=f"{name}.inter")
        if variant != "spatial":
            self.temporal = EncoderLayer(rng, dim, heads, dropout,
                                         name=f"{name}.temporal")
        else:
            self.temporal = None
        if variant == "ours":
            self.dec_spatial = DecoderLayer(rng, dim, heads, dropout,
                                            name=f"{name}.dec_spatial")
            self.dec_temporal = DecoderLayer(rng, dim, heads, dropout,
                                             name=f"{name}.dec_temporal")
            self.fuse = Linear(rng, dim, dim, name=f"{name}.fuse")
        else:
            self.dec_spatial = self.dec_temporal = self.fuse = None
        self.group_dec = DecoderLayer(rng, dim, heads, dropout,
                                      name=f"{name}.group_dec")

    def params(self):
        parts = [self.spatial, self.inter_attn]
        for extra in (self.temporal, self.dec_spatial, self.dec_temporal,
                      self.fuse, self.group_dec):
            if extra is not None:
                parts.append(extra)
        out = {}
        for part in parts:
            out.update(part.params())
        return out

    def _labels(self, queries, clip_seeds, update_state):
        """Hard assignments [B, T, N] from the spatial queries (numpy)."""
        cfg = self.cluster_cfg
        B, T, N, _ = queries.shape
        labels = np.zeros((B, T, N), dtype=np.int64)
        if cfg.mode == "minibatch":
            state = self.cluster_state
            for b in range(B):
                for t in range(T):
                    pts = queries[b, t]
                    if state is None:
                        seed = stream_seed(clip_seeds[b],
                                           f"kmeans_init:{self.name}")
                        state = clustering.init_centroids(pts, cfg.C, seed)
                    labels[b, t] = clustering.assign(pts, state)
                    if update_state:
                        state = clustering.minibatch_step(pts, state)
            if update_state:
                self.cluster_state = state
            elif self.cluster_state is None:
                self.cluster_state = state
            return labels
        for b in range(B):
            if cfg.scope == "joint":
                seed = stream_seed(clip_seeds[b], f"kmeans:{self.name}:joint")
                _, flat = clustering.kmeans(queries[b].reshape(T * N, -1),
                                            cfg.C, seed, iters=cfg.iters)
                labels[b] = flat.reshape(T, N)
                continue
            for t in range(T):
                seed = stream_seed(clip_seeds[b],
                                   f"kmeans:{self.name}:frame{t}")
                _, labels[b, t] = clustering.kmeans(queries[b, t], cfg.C,
                                                    seed, iters=cfg.iters)
        return labels

    def _spatial_encode(self, x, clip_seeds, train, rng, assignments,
                        update_state, collect):
        """Spatial attention over each frame's roster, clustered if active."""
        cfg = self.cluster_cfg
        if not cfg.active:
            h = self.spatial.norm_attn(x)
            out = self.spatial.ffn_sublayer(
                self.spatial.finish_attention(h, train=train, rng=rng),
                train=train, rng=rng)
            stats = _np_attention_stats(h.data, self.spatial.attn, None) if collect else None
            return out, None, stats
        h = self.spatial.norm_attn(x)
        queries = h.data @ self.spatial.attn.w_q.data
        if assignments is None:
            labels = self._labels(queries, clip_seeds, update_state)
        else:
            labels = np.asarray(assignments)
        mask, mean_map, member = assignment_matrices(labels, cfg.C)
        extra = None
        if cfg.inter:
            q_graph = tz.matmul(h, self.spatial.attn.w_q)
            centroids = tz.matmul(Tensor(mean_map, name="mean_map"), q_graph)
            updated = self.inter_attn(centroids)
            extra = tz.matmul(Tensor(member, name="member_map"), updated)
        attn_mask = mask[..., None, :, :] if cfg.intra else None
        a = self.spatial.finish_attention(h, mask=attn_mask, extra=extra,
                                          train=train, rng=rng)
        out = self.spatial.ffn_sublayer(a, train=train, rng=rng)
        stats = None
        if collect:
            stats = _np_attention_stats(h.data, self.spatial.attn,
                                        mask if cfg.intra else None)
        return out, labels, stats

    def __call__(self, x_i, x_g, clip_seeds, train=False, rng=None,
                 assignments=None, update_state=False, collect=False):
        """Refine (x_i [B,T,N,D], x_g [B,T,D]) -> same shapes."""
        v_s, labels, stats = self._spatial_encode(
            x_i, clip_seeds, train, rng, assignments, update_state, collect)
        if self.variant == "spatial":
            x_next = v_s
        elif self.variant == "stacked":
            v_t = self.temporal(_swap_tn(v_s), train=train, rng=rng)
            x_next = _swap_tn(v_t)
        elif self.variant == "parallel":
            v_t = self.temporal(_swap_tn(x_i), train=train, rng=rng)
            x_next = v_s + _swap_tn(v_t)
        else:
            v_t = self.temporal(_swap_tn(x_i), train=train, rng=rng)
            d_s = self.dec_spatial(_swap_tn(v_s), v_t, train=train, rng=rng)
            d_t = self.dec_temporal(_swap_tn(v_t), v_s, train=train, rng=rng)
            x_next = self.fuse(_swap_tn(d_s) + d_t)
        queries = tz.reshape(x_g, x_g.shape[:-1] + (1, x_g.shape[-1]))
        g = self.group_dec(queries, x_next, train=train, rng=rng)
        x_g_next = tz.reshape(g, x_g.shape)
        return x_next, x_g_next, labels, stats


def clustered_self_attention(frame_tokens, layer, inter_attn, cluster_cfg,
                             seed):
    """One frame of clustered attention: [N, D] -> [N, D].

    ``layer`` supplies the attention and FFN parameters (an EncoderLayer),
    ``inter_attn`` the centroid-level attention.  With C=1 the mask is all
    zeros and the intra path equals plain self-attention exactly.
    """
    cluster_cfg.validate()
    if frame_tokens.ndim != 2:
        raise ContractError(
            f"expected [N, D] frame tokens, got {frame_tokens.shape}")
    h = layer.norm_attn(frame_tokens)
    queries = h.data @ layer.attn.w_q.data
    if cluster_cfg.mode == "minibatch":
        state = clustering.init_centroids(queries, cluster_cfg.C, seed)
        labels = clustering.assign(queries, state)
    else:
        _, labels = clustering.kmeans(queries, cluster_cfg.C, seed,
                                      iters=cluster_cfg.iters)
    mask, mean_map, member = assignment_matrices(labels, cluster_cfg.C)
    extra = None
    if cluster_cfg.inter:
        q_graph = tz.matmul(h, layer.attn.w_q)
        centroids = tz.matmul(Tensor(mean_map), q_graph)
        extra = tz.matmul(Tensor(member), inter_attn(centroids))
    a = layer.finish_attention(h, mask=mask if cluster_cfg.intra else None,
                               extra=extra)
    return layer.ffn_sublayer(a)


@dataclass
class ModelOutput:
    """Final representations plus per-block diagnostics."""

    x_i: Tensor                 # [B, T, N, D]
    x_g: Tensor                 # [B, T, D]
    cluster_labels: list = field(default_factory=list)
    attention_stats: list = field(default_factory=list)


class ActivityModel:
    """Full recognizer: embedding, group token builder, blocks, heads."""

    def __init__(self, gen_cfg: GeneratorConfig, train_cfg: TrainConfig):
        gen_cfg.validate()
        train_cfg.validate()
        self.gen = gen_cfg
        self.cfg = train_cfg
        self.cluster_cfg = ClusterConfig(
            C=train_cfg.C, mode=train_cfg.cluster_mode,
            iters=train_cfg.kmeans_iters, intra=train_cfg.intra,
            inter=train_cfg.inter)
        rng = stream_rng(train_cfg.seed, "init")
        dim = train_cfg.D
        self.simple = train_cfg.variant == "baseline" or train_cfg.blocks == 0
        self.use_grg = train_cfg.grg and train_cfg.variant != "baseline"
        self.embed = Linear(rng, gen_cfg.D_in, dim, name="embed")
        if self.simple:
            self.pos = None
            self.fc = Linear(rng, dim, dim, name="fc")
        else:
            self.pos = small_normal(rng, (gen_cfg.T, 1, dim), name="pos_time")
            self.fc = None
        self.group_query = small_normal(rng, (gen_cfg.T, dim),
                                        name="group_query")
        if self.use_grg:
            self.grg = GroupTokenBuilder(rng, scene_channels(gen_cfg), dim,
                                         train_cfg.heads,
                                         scene_tokens=train_cfg.scene_tokens)
        else:
            self.grg = None
        self.blocks = []
        if not self.simple:
            for i in range(train_cfg.blocks):
                self.blocks.append(SttBlock(
                    rng, dim, train_cfg.heads, train_cfg.dropout,
                    self.cluster_cfg, variant=train_cfg.variant,
                    name=f"block{i}"))
        if self.simple:
            self.group_dec = DecoderLayer(rng, dim, train_cfg.heads,
                                          train_cfg.dropout, name="group_dec")
        else:
            self.group_dec = None
        self.heads = ClassifierHeads(rng, dim, gen_cfg.G_cls, gen_cfg.A_cls)

    def parameters(self):
        """All trainable tensors by stable name, in construction order."""
        out = {}
        out.update(self.embed.params())
        if self.fc is not None:
            out.update(self.fc.params())
        if self.pos is not None:
            out["pos_time"] = self.pos
        out["group_query"] = self.group_query
        if self.grg is not None:
            out.update(self.grg.params())
        for block in self.blocks:
            out.update(block.params())
        if self.group_dec is not None:
            out.update(self.group_dec.params())
        out.update(self.heads.params())
        return out

    def _check_inputs(self, feats, scenes):
        T, N, d_in = self.gen.T, self.gen.N, self.gen.D_in
        if feats.ndim != 4 or feats.shape[1:] != (T, N, d_in):
            raise ContractError(
                f"expected features [B, {T}, {N}, {d_in}], got {feats.shape}")
        if self.use_grg:
            if scenes is None:
                raise ContractError("scene grids required when the group "
                                    "token builder is enabled")
            want = (feats.shape[0], T, scene_channels(self.gen))
            if scenes.ndim != 5 or scenes.shape[:3] != want:
                raise ContractError(
                    f"expected scenes [B, {T}, {want[2]}, H, W], "
                    f"got {scenes.shape}")

    def _initial_group(self, x, scenes, batch, train, rng):
        if self.use_grg:
            return self.grg(self.group_query, scenes, x, train=train, rng=rng)
        q = tz.reshape(self.group_query, (1,) + self.group_query.shape)
        return tz.tile_axis(q, 0, batch) if batch > 1 else q

    def forward(self, feats, scenes, clip_seeds, train=False, rng=None,
                assignments=None, update_clusters=None, collect_stats=False):
        """Run a batch of clips.

        feats: [B, T, N, D_in] numpy; scenes: [B, T, C, H, W] numpy or None;
        clip_seeds: one int per clip, the root for that clip's k-means seed
        stream.  ``assignments`` freezes cluster labels (a per-block list of
        [B, T, N] arrays), which keeps the forward map differentiable for
        gradient checking.  ``update_clusters`` controls the stateful
        centroid update in minibatch mode and defaults to ``train``.
        """
        feats = np.asarray(feats, dtype=np.float64)
        scenes = None if scenes is None else np.asarray(scenes, dtype=np.float64)
        self._check_inputs(feats, scenes)
        batch = feats.shape[0]
        if len(clip_seeds) != batch:
            raise ContractError(
                f"{len(clip_seeds)} clip seeds for a batch of {batch}")
        if update_clusters is None:
            update_clusters = train
        x = self.embed(Tensor(feats, name="inputs"))
        if self.simple:
            x_i = self.fc(tz.relu(x))
            x_g0 = self._initial_group(x_i, scenes, batch, train, rng)
            queries = tz.reshape(x_g0, x_g0.shape[:-1] + (1, x_g0.shape[-1]))
            g = self.group_dec(queries, x_i, train=train, rng=rng)
            x_g = tz.reshape(g, x_g0.shape)
            return ModelOutput(x_i=x_i, x_g=x_g)
        pos = tz.tile_axis(self.pos, 1, self.gen.N)
        x = x + pos
        x_g = self._initial_group(x, scenes, batch, train, rng)
        labels_out, stats_out = [], []
        for i, block in enumerate(self.blocks):
            frozen = None if assignments is None else assignments[i]
            x, x_g, labels, stats = block(
                x, x_g, clip_seeds, train=train, rng=rng, assignments=frozen,
                update_state=update_clusters, collect=collect_stats)
            labels_out.append(labels)
            stats_out.append(stats)
        return ModelOutput(x_i=x, x_g=x_g, cluster_labels=labels_out,
                           attention_stats=stats_out)

    def logits(self, out: ModelOutput):
        """Convenience: (group logits, individual logits) from a forward."""
        return (self.heads.group_logits(out.x_g),
                self.heads.individual_logits(out.x_i))
