"""Resolution-preserving 2D segmentation networks built from dilated convs.

Five conv blocks with exponentially growing dilation feed a multi-scale
concatenation and a two-layer 1x1 classifier head; an optional mean-field CRF
regularizes the per-pixel scores. The proposal net reads the raw image, the
refinement net reads image + initial segmentation + two interaction distance
maps and honors scribbles as hard constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .crfnet import (CompatibilityMatrix, CrfConfig, PairwiseNet, make_pairwise_net,
                     mean_field_iterate)
from .tensorcore import ConfigError, DiffTensor, ShapeError

CONVS_PER_BLOCK = (2, 2, 3, 3, 3)


def dilation_schedule(block: int, base_dilation: int = 1) -> int:
    """Dilation of block i: d * 2**(i-1)."""
    if not 1 <= block <= 5:
        raise ConfigError(f"block index {block} outside 1..5")
    return base_dilation * 2 ** (block - 1)


def receptive_field(block: int, base_dilation: int = 1, radius: int = 1) -> int:
    """Receptive-field extent after block i: 2 * sum_{j<=i} tau_j * r * q_j + 1."""
    if not 1 <= block <= 5:
        raise ConfigError(f"block index {block} outside 1..5")
    total = sum(CONVS_PER_BLOCK[j - 1] * radius * dilation_schedule(j, base_dilation)
                for j in range(1, block + 1))
    return 2 * total + 1


@dataclass
class NetworkConfig:
    in_channels: int
    width: int = 8
    base_dilation: int = 1
    label_count: int = 2
    multiscale: bool = True
    crf: CrfConfig = field(default_factory=CrfConfig)
    crf_variant: str = "f"

    def __post_init__(self):
        if self.in_channels < 1 or self.width < 1 or self.base_dilation < 1:
            raise ConfigError("channels, width, and dilation must be >= 1")
        if self.label_count < 2:
            raise ConfigError("need at least 2 labels")
        if self.crf_variant not in ("f", "fu", "none"):
            raise ConfigError(f"unknown crf variant {self.crf_variant!r}")

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("in_channels", "width", "base_dilation", "label_count",
              "multiscale", "crf_variant")}
        if self.crf is not None:
            d["crf"] = {"label_count": self.crf.label_count,
                        "patch_extents": list(self.crf.patch_extents),
                        "iterations": self.crf.iterations}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        crf = d.pop("crf", None)
        if crf is not None:
            crf = CrfConfig(label_count=crf["label_count"],
                            patch_extents=tuple(crf["patch_extents"]),
                            iterations=crf["iterations"])
        d["crf"] = crf
        return cls(**d)


class SegmentationModel:
    """Dilated conv blocks + multi-scale concat + 1x1 head + optional CRF."""

    def __init__(self, cfg: NetworkConfig, rng, pairwise_net: PairwiseNet = None):
        self.cfg = cfg
        self.blocks = []
        prev = cfg.in_channels
        for i, n_convs in enumerate(CONVS_PER_BLOCK, start=1):
            q = dilation_schedule(i, cfg.base_dilation)
            block = []
            for _ in range(n_convs):
                block.append(tc.make_kernel(cfg.width, prev, radius=1, dilation=q, rng=rng))
                prev = cfg.width
            self.blocks.append(block)
        feat_width = cfg.width * (len(CONVS_PER_BLOCK) if cfg.multiscale else 1)
        self.head1 = tc.make_kernel(cfg.width, feat_width, radius=0, dilation=1, rng=rng)
        self.head2 = tc.make_kernel(cfg.label_count, cfg.width, radius=0, dilation=1, rng=rng)
        if cfg.crf_variant == "none":
            self.pairwise = None
            self.mu = None
        else:
            feature_dim = pairwise_net.feature_dim if pairwise_net else 1
            self.pairwise = pairwise_net or make_pairwise_net(feature_dim, rng)
            self.mu = CompatibilityMatrix.iverson(cfg.label_count)

    def set_pairwise_net(self, net: PairwiseNet):
        if self.cfg.crf_variant == "none":
            raise ConfigError("model was built without a CRF head")
        self.pairwise = net

    def parameters(self):
        named = {}
        for bi, block in enumerate(self.blocks, start=1):
            for ci, kern in enumerate(block, start=1):
                named[f"block{bi}.conv{ci}.weight"] = kern.weights
                named[f"block{bi}.conv{ci}.bias"] = kern.bias
        named["head.conv1.weight"] = self.head1.weights
        named["head.conv1.bias"] = self.head1.bias
        named["head.conv2.weight"] = self.head2.weights
        named["head.conv2.bias"] = self.head2.bias
        if self.pairwise is not None:
            for name, p in self.pairwise.parameters().items():
                named[f"crf.{name}"] = p
            named["crf.mu"] = self.mu.mu
        return named

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def logits(self, x: DiffTensor) -> DiffTensor:
        if x.values.ndim != 3 or x.shape[0] != self.cfg.in_channels:
            raise ShapeError(
                f"input {x.values.shape} does not match in_channels {self.cfg.in_channels}")
        h = x
        block_outputs = []
        for block in self.blocks:
            for kern in block:
                h = tc.dilated_conv2d(h, kern, activation="relu")
            block_outputs.append(h)
        feat = tc.channel_concat(block_outputs) if self.cfg.multiscale else block_outputs[-1]
        h = tc.dilated_conv2d(feat, self.head1, activation="relu")
        return tc.dilated_conv2d(h, self.head2)

    def forward(self, x: DiffTensor, features=None, constraints=None, use_crf=True):
        """Returns (logits, q). q comes from the CRF when attached and enabled,
        otherwise from a plain per-pixel softmax."""
        logits = self.logits(x)
        if constraints is not None and self.cfg.crf_variant != "fu":
            raise ConfigError("hard constraints require the user-constrained CRF variant")
        if use_crf and self.pairwise is not None:
            if features is None:
                features = x.values[:self.pairwise.feature_dim]
            q = mean_field_iterate(logits, features, self.pairwise, self.mu,
                                   self.cfg.crf, constraints)
        else:
            q = tc.softmax_channels(logits)
        return logits, q


def build_pnet(cfg: NetworkConfig = None, rng=None, pairwise_net=None) -> SegmentationModel:
    """Proposal network: raw image in, CRF with freeform potentials attached."""
    rng = np.random.default_rng() if rng is None else rng
    if cfg is None:
        cfg = NetworkConfig(in_channels=1)
    if cfg.crf_variant == "fu":
        raise ConfigError("proposal network uses the unconstrained CRF variant")
    return SegmentationModel(cfg, rng, pairwise_net)


def build_rnet(cfg: NetworkConfig = None, rng=None, pairwise_net=None) -> SegmentationModel:
    """Refinement network: image + seg + 2 distance channels, constrained CRF."""
    rng = np.random.default_rng() if rng is None else rng
    if cfg is None:
        cfg = NetworkConfig(in_channels=4, crf_variant="fu")
    if cfg.crf_variant == "f":
        raise ConfigError("refinement network uses the user-constrained CRF variant")
    return SegmentationModel(cfg, rng, pairwise_net)


def forward_segment(model: SegmentationModel, x: DiffTensor, features=None,
                    constraints=None, use_crf=True):
    """Run a model on one input; returns (logits, q, mask) with mask = argmax q."""
    logits, q = model.forward(x, features=features, constraints=constraints,
                              use_crf=use_crf)
    mask = np.argmax(q.values, axis=0).astype(np.uint8)
    return logits, q, mask
