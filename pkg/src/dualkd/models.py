"""SE-CRNN sound event detectors with an optional embedding distillation branch.

Layout of one forward pass (``B`` clips, ``T`` frames, ``F`` mel bins)::

    logmel [B, 1, T, F]
      -> 7 x (conv3x3 -> BN -> leaky relu -> [SE -> tfwSE] -> freq avg-pool /2)
         (blocks 1-6 carry SE/tfwSE and pooling, block 7 carries neither)
      -> mean over remaining freq bins, frames first      [B, T, C]
      -> [embedding distillation: transform to E, concat, project back to C]
      -> dropout -> 2 x BiGRU -> dropout -> context gating  [B, T, 2H]
      -> frame head (sigmoid)                  frame_probs  [B, T, K]
      -> attention head (softmax over T)       clip_probs   [B, K]

The model is functional in its parameters: :meth:`SECRNN.forward` accepts an
optional mapping that replaces the stored parameter tensors, which is how the
mean student is run on EMA-blended weights that stay in the gradient graph.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

N_BLOCKS = 7


@dataclass
class SECRNNConfig:
    conv_channels: tuple = (8, 16, 32, 64, 64, 64, 64)
    n_mels: int = 128
    gru_hidden: int | None = None
    n_classes: int = 10
    dropout: float = 0.5
    embedding_dim: int = 768
    eefd_enabled: bool = False
    variant_name: str = "SE-CRNN-8"
    se_reduction: int = 4
    gru_layers: int = 2
    leaky_slope: float = 0.1

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != N_BLOCKS:
            raise ConfigurationError(f"conv_channels needs {N_BLOCKS} entries, got {len(self.conv_channels)}")
        if min(self.conv_channels) < 1 or self.n_mels < 1 or self.n_classes < 1:
            raise ConfigurationError("channel, mel and class counts must be positive")
        if self.gru_hidden is None:
            self.gru_hidden = self.conv_channels[-1]
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 1)")
        if self.gru_layers < 1 or self.embedding_dim < 1 or self.se_reduction < 1:
            raise ConfigurationError("gru_layers, embedding_dim and se_reduction must be positive")

    @property
    def gru_input(self) -> int:
        return self.conv_channels[-1]

    def freq_schedule(self):
        """Frequency bins entering each block and whether the block pools."""
        bins, out = self.n_mels, []
        for i in range(N_BLOCKS):
            pools = i < N_BLOCKS - 1 and bins >= 2
            out.append((bins, pools))
            if pools:
                bins //= 2
        return out, bins

    def to_items(self):
        d = asdict(self)
        d["conv_channels"] = ",".join(str(c) for c in self.conv_channels)
        return {k: str(v) for k, v in d.items()}

    @classmethod
    def from_items(cls, items: Mapping[str, str]):
        def as_bool(s):
            return s in ("True", "true", "1")

        conv = tuple(int(c) for c in items["conv_channels"].split(","))
        hidden = items.get("gru_hidden", "None")
        return cls(
            conv_channels=conv,
            n_mels=int(items["n_mels"]),
            gru_hidden=None if hidden == "None" else int(hidden),
            n_classes=int(items["n_classes"]),
            dropout=float(items["dropout"]),
            embedding_dim=int(items["embedding_dim"]),
            eefd_enabled=as_bool(items["eefd_enabled"]),
            variant_name=items.get("variant_name", ""),
            se_reduction=int(items.get("se_reduction", 4)),
            gru_layers=int(items.get("gru_layers", 2)),
            leaky_slope=float(items.get("leaky_slope", 0.1)),
        )


def se_crnn_8(**kw) -> SECRNNConfig:
    kw.setdefault("variant_name", "SE-CRNN-8")
    return SECRNNConfig(conv_channels=(8, 16, 32, 64, 64, 64, 64), **kw)


def se_crnn_16(**kw) -> SECRNNConfig:
    kw.setdefault("variant_name", "SE-CRNN-16")
    return SECRNNConfig(conv_channels=(16, 32, 64, 128, 128, 128, 128), **kw)


def se_crnn_tiny(**kw) -> SECRNNConfig:
    kw.setdefault("variant_name", "SE-CRNN-tiny")
    kw.setdefault("conv_channels", (4, 8, 16, 16, 16, 16, 16))
    return SECRNNConfig(**kw)


PRESETS = {"SE-CRNN-8": se_crnn_8, "SE-CRNN-16": se_crnn_16, "SE-CRNN-tiny": se_crnn_tiny}


class ModelOutput(NamedTuple):
    frame_probs: Tensor  # [B, T, K]
    clip_probs: Tensor  # [B, K]
    transformed_feats: Tensor | None = None  # [B, T, E]


# -- building blocks (functional) ---------------------------------------------

def se_block(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Channel squeeze-and-excitation on ``x[B, C, T, F]``."""
    B, C = x.shape[:2]
    s = ad.mean(x, axis=(2, 3))
    g = ad.sigmoid(ad.linear(ad.relu(ad.linear(s, w1, b1)), w2, b2))
    return x * ad.reshape(g, (B, C, 1, 1))


def tfw_se_block(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Frequency-wise excitation computed independently for every frame."""
    B, _, T, F = x.shape
    s = ad.mean(x, axis=1)  # [B, T, F]
    g = ad.sigmoid(ad.linear(ad.relu(ad.linear(s, w1, b1)), w2, b2))
    return x * ad.reshape(g, (B, 1, T, F))


def context_gating(x: Tensor, w, b) -> Tensor:
    """``x * sigmoid(x W + b)`` over the last axis."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"context gating width {w.shape[0]} does not match input {x.shape}")
    return x * ad.sigmoid(ad.linear(x, w, b))


def clip_pooling(frame_probs: Tensor, attn_logits: Tensor) -> Tensor:
    """Per-class softmax attention over frames; a convex combination of frame probabilities."""
    if frame_probs.shape != attn_logits.shape:
        raise DimensionError(f"clip pooling shapes {frame_probs.shape} and {attn_logits.shape} differ")
    w = ad.softmax(attn_logits, axis=1)
    return ad.sum_(frame_probs * w, axis=1)


def embedding_distillation_transform(conv_out: Tensor, w_t, b_t, w_m, b_m):
    """Project per-frame conv features to the embedding width and merge them back.

    ``conv_out[B, C, T, F']`` is flattened per frame to ``C * F'`` values.
    Returns ``(merged[B, T, C_gru], transformed[B, T, E])``.
    """
    B, C, T, Fp = conv_out.shape
    frames = ad.reshape(ad.transpose(conv_out, (0, 2, 1, 3)), (B, T, C * Fp))
    if frames.shape[-1] != w_t.shape[0]:
        raise DimensionError(f"embedding transform expects width {w_t.shape[0]}, got {frames.shape[-1]}")
    transformed = ad.linear(frames, w_t, b_t)
    merged = ad.linear(ad.concat([frames, transformed], axis=-1), w_m, b_m)
    return merged, transformed


# -- the model ----------------------------------------------------------------

class SECRNN:
    def __init__(self, cfg: SECRNNConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, ad.RunningStats] = {}
        self._build(np.random.default_rng(seed))

    # construction
    def _add(self, name, array):
        self.params[name] = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)

    def _uniform(self, rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _linear(self, rng, name, n_in, n_out):
        self._add(f"{name}.weight", self._uniform(rng, (n_in, n_out), n_in))
        self._add(f"{name}.bias", np.zeros(n_out))

    def _build(self, rng):
        cfg = self.cfg
        schedule, _ = cfg.freq_schedule()
        c_in = 1
        for i, (c_out, (bins, _)) in enumerate(zip(cfg.conv_channels, schedule)):
            self._add(f"conv{i}.weight", self._uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
            self._add(f"conv{i}.bias", np.zeros(c_out))
            self._add(f"bn{i}.gamma", np.ones(c_out))
            self._add(f"bn{i}.beta", np.zeros(c_out))
            self.bn[f"bn{i}"] = ad.RunningStats(c_out, self.dtype)
            if i < N_BLOCKS - 1:
                red = max(1, c_out // cfg.se_reduction)
                self._linear(rng, f"se{i}.fc1", c_out, red)
                self._linear(rng, f"se{i}.fc2", red, c_out)
                fred = max(1, bins // cfg.se_reduction)
                self._linear(rng, f"tfwse{i}.fc1", bins, fred)
                self._linear(rng, f"tfwse{i}.fc2", fred, bins)
            c_in = c_out
        C, E = cfg.gru_input, cfg.embedding_dim
        if cfg.eefd_enabled:
            self._linear(rng, "eefd.transform", C, E)
            self._linear(rng, "eefd.merge", C + E, C)
        H = cfg.gru_hidden
        d_in = C
        for layer in range(cfg.gru_layers):
            for direction in ("fwd", "bwd"):
                p = f"gru{layer}.{direction}"
                self._add(f"{p}.w_ih", self._uniform(rng, (d_in, 3 * H), H))
                self._add(f"{p}.w_hh", self._uniform(rng, (H, 3 * H), H))
                self._add(f"{p}.b_ih", self._uniform(rng, 3 * H, H))
                self._add(f"{p}.b_hh", self._uniform(rng, 3 * H, H))
            d_in = 2 * H
        self._linear(rng, "cg", 2 * H, 2 * H)
        self._linear(rng, "strong", 2 * H, cfg.n_classes)
        self._linear(rng, "attn", 2 * H, cfg.n_classes)

    # introspection
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def named_parameters(self):
        return list(self.params.items())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, rs in self.bn.items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {k: v.data for k, v in self.params.items()}
        d.update(self.buffers())
        return d

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        from .checkpoint import check_state_fits

        check_state_fits(self, state)
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=self.dtype)
        for name, rs in self.bn.items():
            rs.mean = np.array(state[f"{name}.running_mean"], dtype=self.dtype)
            rs.var = np.array(state[f"{name}.running_var"], dtype=self.dtype)

    def copy(self) -> "SECRNN":
        new = copy.copy(self)
        new.cfg = copy.deepcopy(self.cfg)
        new.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        new.bn = {}
        for k, rs in self.bn.items():
            r = ad.RunningStats(len(rs.mean), self.dtype)
            r.mean, r.var = rs.mean.copy(), rs.var.copy()
            new.bn[k] = r
        return new

    def astype(self, dtype) -> "SECRNN":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for p in new.params.values():
            p.data = p.data.astype(dtype)
        for rs in new.bn.values():
            rs.mean, rs.var = rs.mean.astype(dtype), rs.var.astype(dtype)
        return new

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # test hooks
    def force_identity_gates(self, bias=50.0):
        """Saturate every SE/tfwSE gate at 1 so the attention blocks pass inputs through."""
        for name, p in self.params.items():
            if (name.startswith("se") or name.startswith("tfwse")) and ".fc2." in name:
                p.data[...] = bias if name.endswith("bias") else 0.0

    def set_passthrough_merge(self):
        """Make the merge projection select the original conv features only."""
        if not self.cfg.eefd_enabled:
            raise ConfigurationError("model has no embedding distillation branch")
        C = self.cfg.gru_input
        w = np.zeros(self.params["eefd.merge.weight"].shape, dtype=self.dtype)
        w[:C, :C] = np.eye(C)
        self.params["eefd.merge.weight"].data = w
        self.params["eefd.merge.bias"].data[...] = 0.0

    # forward
    def forward(
        self,
        x,
        mode: str = "eval",
        params: Mapping[str, Tensor] | None = None,
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
        dropout: bool | None = None,
        bn_mode: str | None = None,
    ) -> ModelOutput:
        """Run the detector on ``x[B, 1, T, n_mels]``.

        ``mode='train'`` uses batch statistics and dropout (needs ``rng``);
        ``dropout`` and ``bn_mode`` override the two independently.
        """
        cfg = self.cfg
        P = self.params if params is None else params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != cfg.n_mels:
            raise DimensionError(f"expected input [B, 1, T, {cfg.n_mels}], got {x.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        bn_mode = bn_mode or mode
        use_dropout = (mode == "train") if dropout is None else dropout
        schedule, _ = cfg.freq_schedule()

        h = x
        for i, (_, pools) in enumerate(schedule):
            h = ad.conv2d(h, P[f"conv{i}.weight"], P[f"conv{i}.bias"], padding=1)
            h = ad.batch_norm(
                h, P[f"bn{i}.gamma"], P[f"bn{i}.beta"], self.bn[f"bn{i}"], mode=bn_mode,
                update_running=update_stats,
            )
            h = ad.leaky_relu(h, cfg.leaky_slope)
            if i < N_BLOCKS - 1:
                h = se_block(h, P[f"se{i}.fc1.weight"], P[f"se{i}.fc1.bias"],
                             P[f"se{i}.fc2.weight"], P[f"se{i}.fc2.bias"])
                h = tfw_se_block(h, P[f"tfwse{i}.fc1.weight"], P[f"tfwse{i}.fc1.bias"],
                                 P[f"tfwse{i}.fc2.weight"], P[f"tfwse{i}.fc2.bias"])
            if pools:
                h = ad.avg_pool2d(h, (1, 2))

        h = ad.mean(h, axis=3, keepdims=True)  # [B, C, T, 1]
        transformed = None
        if cfg.eefd_enabled:
            seq, transformed = embedding_distillation_transform(
                h, P["eefd.transform.weight"], P["eefd.transform.bias"],
                P["eefd.merge.weight"], P["eefd.merge.bias"],
            )
        else:
            seq = ad.transpose(ad.reshape(h, h.shape[:3]), (0, 2, 1))  # [B, T, C]

        seq = ad.dropout(seq, cfg.dropout, rng, use_dropout)
        for layer in range(cfg.gru_layers):
            fwd = tuple(P[f"gru{layer}.fwd.{n}"] for n in ("w_ih", "w_hh", "b_ih", "b_hh"))
            bwd = tuple(P[f"gru{layer}.bwd.{n}"] for n in ("w_ih", "w_hh", "b_ih", "b_hh"))
            seq = ad.bidirectional_gru(seq, fwd, bwd)
        seq = ad.dropout(seq, cfg.dropout, rng, use_dropout)
        seq = context_gating(seq, P["cg.weight"], P["cg.bias"])

        frame_probs = ad.sigmoid(ad.linear(seq, P["strong.weight"], P["strong.bias"]))
        attn_logits = ad.linear(seq, P["attn.weight"], P["attn.bias"])
        clip_probs = clip_pooling(frame_probs, attn_logits)
        return ModelOutput(frame_probs, clip_probs, transformed)

    __call__ = forward


def build_se_crnn(cfg: SECRNNConfig, seed: int = 0, dtype=np.float32) -> SECRNN:
    return SECRNN(cfg, seed=seed, dtype=dtype)
