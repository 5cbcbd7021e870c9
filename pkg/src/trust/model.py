"""The split-merge network: backbone encoder with top-down feature fusion,
query-based splitting heads, cross-feature enhancement, and the vertex
merge head, all in one differentiable forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

ANGLE_CLASSES = 91


@dataclass
class ModelConfig:
    input_size: int = 160
    feature_dim: int = 64
    n_row_queries: int = 40
    n_col_queries: int = 40
    backbone_channels: tuple = (16, 32, 64, 64)
    output_stride: int = 4
    angle_classes: int = ANGLE_CLASSES
    qbs_layers: int = 2
    cfe_layers: int = 1
    num_heads: int = 4
    ffn_dim: int = 256
    dropout_rate: float = 0.0
    enable_cfe: bool = True
    share_decoders: bool = False

    def __post_init__(self):
        if self.n_row_queries < 2 or self.n_col_queries < 2:
            raise ValueError("need at least 2 queries per axis")
        if self.angle_classes != ANGLE_CLASSES:
            raise ValueError(f"angle_classes must be {ANGLE_CLASSES} (degrees -45..45)")
        if self.feature_dim % self.num_heads or self.feature_dim % 4:
            raise ValueError("feature_dim must divide by num_heads and by 4")
        total_stride = 2 ** len(self.backbone_channels)
        if self.input_size % total_stride:
            raise ValueError(f"input_size {self.input_size} not divisible by total stride {total_stride}")
        if self.output_stride not in [2 ** (i + 1) for i in range(len(self.backbone_channels))]:
            raise ValueError(f"output_stride {self.output_stride} is not one of the stage strides")

    @property
    def feature_hw(self) -> int:
        return self.input_size // self.output_stride

    @staticmethod
    def desk() -> "ModelConfig":
        return ModelConfig()

    @staticmethod
    def paper() -> "ModelConfig":
        return ModelConfig(input_size=640, feature_dim=256, n_row_queries=160,
                           n_col_queries=160, backbone_channels=(64, 128, 256, 256),
                           output_stride=8, qbs_layers=3, cfe_layers=1,
                           num_heads=8, ffn_dim=1024, dropout_rate=0.1)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size, "feature_dim": self.feature_dim,
            "n_row_queries": self.n_row_queries, "n_col_queries": self.n_col_queries,
            "backbone_channels": list(self.backbone_channels),
            "output_stride": self.output_stride, "angle_classes": self.angle_classes,
            "qbs_layers": self.qbs_layers, "cfe_layers": self.cfe_layers,
            "num_heads": self.num_heads, "ffn_dim": self.ffn_dim,
            "dropout_rate": self.dropout_rate, "enable_cfe": self.enable_cfe,
            "share_decoders": self.share_decoders,
        }

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        data = dict(data)
        data["backbone_channels"] = tuple(data["backbone_channels"])
        return ModelConfig(**data)


@dataclass
class ModelOutputs:
    row_scores: Tensor       # (N,) or (B, N), sigmoid probabilities
    row_offsets: Tensor
    row_angle_logits: Tensor  # (N, 91) or (B, N, 91)
    col_scores: Tensor
    col_offsets: Tensor
    col_angle_logits: Tensor
    vertex_logits: Tensor    # (N, M, 4) or (B, N, M, 4); order LL, RR, TT, BB
    row_features: Tensor     # (N, d) or (B, N, d)
    col_features: Tensor

    @property
    def batched(self) -> bool:
        return self.row_scores.ndim == 2

    def at(self, b: int) -> "ModelOutputs":
        """Per-image view of a batched output; keeps the graph connected."""
        if not self.batched:
            raise ValueError("outputs are not batched")

        def pick(t: Tensor) -> Tensor:
            return T.reshape(T.gather(t, [b]), t.shape[1:])

        return ModelOutputs(*(pick(getattr(self, f)) for f in (
            "row_scores", "row_offsets", "row_angle_logits",
            "col_scores", "col_offsets", "col_angle_logits",
            "vertex_logits", "row_features", "col_features")))

    def head_arrays(self) -> dict:
        """Detached numpy arrays in the layout the decoder consumes."""
        if self.batched:
            raise ValueError("call .at(b) before extracting head arrays")
        logits = self.vertex_logits.data.astype(np.float64)
        return {
            "row_scores": self.row_scores.data.astype(np.float64),
            "row_offsets": self.row_offsets.data.astype(np.float64),
            "row_angle_logits": self.row_angle_logits.data.astype(np.float64),
            "col_scores": self.col_scores.data.astype(np.float64),
            "col_offsets": self.col_offsets.data.astype(np.float64),
            "col_angle_logits": self.col_angle_logits.data.astype(np.float64),
            "vertex_link_probs": 1.0 / (1.0 + np.exp(-logits)),
        }


class _Backbone:
    """Small strided CNN with top-down fusion back to the output stride."""

    def __init__(self, store, cfg: ModelConfig, rng, dtype):
        d = cfg.feature_dim
        self.cfg = cfg
        self.stages = []
        in_ch = 3
        for i, out_ch in enumerate(cfg.backbone_channels):
            self.stages.append(nn.Conv2d(store, f"backbone.stage{i}", in_ch, out_ch,
                                         k=4, stride=2, padding=1, rng=rng, dtype=dtype))
            in_ch = out_ch
        self.out_level = [2 ** (i + 1) for i in range(len(self.stages))].index(cfg.output_stride)
        self.laterals = [
            nn.Conv2d(store, f"backbone.lateral{i}", cfg.backbone_channels[i], d,
                      k=1, stride=1, padding=0, rng=rng, dtype=dtype)
            for i in range(self.out_level, len(self.stages))
        ]
        self.smooth = nn.Conv2d(store, "backbone.smooth", d, d, k=3, stride=1,
                                padding=1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        feats = []
        for stage in self.stages:
            x = T.relu(stage(x))
            feats.append(x)
        top = len(self.stages) - 1
        p = self.laterals[top - self.out_level](feats[top])
        for i in range(top - 1, self.out_level - 1, -1):
            p = T.add(self.laterals[i - self.out_level](feats[i]), nn.upsample2x(p))
        return T.relu(self.smooth(p))


class _AxisHeads:
    def __init__(self, store, name: str, d: int, angle_classes: int, rng, dtype):
        self.score = nn.Linear(store, f"{name}.score", d, 1, rng, dtype)
        self.offset = nn.Linear(store, f"{name}.offset", d, 1, rng, dtype)
        self.angle = nn.Linear(store, f"{name}.angle", d, angle_classes, rng, dtype)

    def __call__(self, feats: Tensor):
        lead = feats.shape[:-1]
        scores = T.reshape(T.sigmoid(self.score(feats)), lead)
        offsets = T.reshape(self.offset(feats), lead)
        angles = self.angle(feats)
        return scores, offsets, angles


class TrustModel:
    """End-to-end network producing all head outputs in one forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = nn.ParamStore()
        rng = np.random.default_rng(seed)
        d = config.feature_dim
        dec_cfg = nn.DecoderLayerConfig(d, config.num_heads, config.ffn_dim, config.dropout_rate)

        self.backbone = _Backbone(self.store, config, rng, dtype)
        self.row_embed = nn.Embedding(self.store, "qbs.row_embed", config.n_row_queries, d, rng, dtype)
        self.col_embed = nn.Embedding(self.store, "qbs.col_embed", config.n_col_queries, d, rng, dtype)
        self.row_decoder = [nn.DecoderLayer(self.store, f"qbs.row_decoder.{i}", dec_cfg, rng, dtype)
                            for i in range(config.qbs_layers)]
        if config.share_decoders:
            self.col_decoder = self.row_decoder
        else:
            self.col_decoder = [nn.DecoderLayer(self.store, f"qbs.col_decoder.{i}", dec_cfg, rng, dtype)
                                for i in range(config.qbs_layers)]
        self.row_heads = _AxisHeads(self.store, "qbs.row_heads", d, config.angle_classes, rng, dtype)
        self.col_heads = _AxisHeads(self.store, "qbs.col_heads", d, config.angle_classes, rng, dtype)

        self.cfe_row = [nn.DecoderLayer(self.store, f"cfe.row.{i}", dec_cfg, rng, dtype)
                        for i in range(config.cfe_layers)]
        self.cfe_col = [nn.DecoderLayer(self.store, f"cfe.col.{i}", dec_cfg, rng, dtype)
                        for i in range(config.cfe_layers)]
        self.vbm_hidden = nn.Linear(self.store, "vbm.hidden", d, d, rng, dtype)
        self.vbm_out = nn.Linear(self.store, "vbm.out", d, 4, rng, dtype)

        hw = config.feature_hw
        self._pos_encoding = nn.sinusoidal_pe_2d(hw, hw, d, dtype=dtype)

    # -- pieces ------------------------------------------------------------

    def backbone_forward(self, image: Tensor) -> Tensor:
        s = self.config.input_size
        spatial = image.shape[-3:-1] if image.ndim == 4 else image.shape[:2]
        if tuple(spatial) != (s, s) or image.shape[-1] != 3:
            raise ShapeError(f"expected {s}x{s}x3 image, got {image.shape}")
        return self.backbone(image)

    def qbs_forward(self, fv: Tensor, rng=None, training: bool = False):
        cfg = self.config
        hw = cfg.feature_hw
        batched = fv.ndim == 4
        b = fv.shape[0] if batched else 1
        mem = T.add(fv, Tensor(self._pos_encoding, dtype=self.dtype))
        mem = T.reshape(mem, (b, hw * hw, cfg.feature_dim) if batched else (hw * hw, cfg.feature_dim))

        def decode_axis(embed, layers, n):
            idx = np.tile(np.arange(n), b) if batched else np.arange(n)
            x = embed(idx)
            if batched:
                x = T.reshape(x, (b, n, cfg.feature_dim))
            for layer in layers:
                x = layer(x, mem, rng=rng, training=training)
            return x

        f_row = decode_axis(self.row_embed, self.row_decoder, cfg.n_row_queries)
        f_col = decode_axis(self.col_embed, self.col_decoder, cfg.n_col_queries)
        return f_row, f_col

    def cross_feature_enhance(self, f_row: Tensor, f_col: Tensor, rng=None,
                              training: bool = False):
        if self.config.enable_cfe:
            e_row, e_col = f_row, f_col
            for layer in self.cfe_row:
                e_row = layer(e_row, f_col, rng=rng, training=training)
            for layer in self.cfe_col:
                e_col = layer(e_col, f_row, rng=rng, training=training)
        else:
            # ablation arm: each side attends only over its own features
            e_row, e_col = f_row, f_col
            for layer in self.cfe_row:
                e_row = layer(e_row, e_row, rng=rng, training=training)
            for layer in self.cfe_col:
                e_col = layer(e_col, e_col, rng=rng, training=training)
        return e_row, e_col

    def vbm_forward(self, e_row: Tensor, e_col: Tensor) -> Tensor:
        cfg = self.config
        n, m, d = cfg.n_row_queries, cfg.n_col_queries, cfg.feature_dim
        batched = e_row.ndim == 3
        if batched:
            b = e_row.shape[0]
            pair = T.add(T.reshape(e_row, (b, n, 1, d)), T.reshape(e_col, (b, 1, m, d)))
            flat = T.reshape(pair, (b, n * m, d))
        else:
            pair = T.add(T.reshape(e_row, (n, 1, d)), T.reshape(e_col, (1, m, d)))
            flat = T.reshape(pair, (n * m, d))
        logits = self.vbm_out(T.relu(self.vbm_hidden(flat)))
        return T.reshape(logits, (b, n, m, 4) if batched else (n, m, 4))

    # -- full pass -----------------------------------------------------------

    def forward(self, image, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ModelOutputs:
        """Run the network on one (S,S,3) image or a (B,S,S,3) batch in [0,1]."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        fv = self.backbone_forward(image)
        f_row, f_col = self.qbs_forward(fv, rng=rng, training=training)
        row_scores, row_offsets, row_angles = self.row_heads(f_row)
        col_scores, col_offsets, col_angles = self.col_heads(f_col)
        e_row, e_col = self.cross_feature_enhance(f_row, f_col, rng=rng, training=training)
        vertex_logits = self.vbm_forward(e_row, e_col)
        return ModelOutputs(row_scores, row_offsets, row_angles,
                            col_scores, col_offsets, col_angles,
                            vertex_logits, f_row, f_col)

    def __call__(self, image, training: bool = False, rng=None) -> ModelOutputs:
        return self.forward(image, training=training, rng=rng)

    def num_parameters(self) -> int:
        return self.store.num_values()
