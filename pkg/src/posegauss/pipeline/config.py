"""Model and run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..depthsolver import SolverConfig
from ..fusion import STRATEGIES
from ..objectives import LossWeights


@dataclass
class ModelConfig:
    resolution: int = 128
    k: int = 3  # encoder downsampling stages
    d_img: int = 64  # D_i
    joints: int = 15  # J, also D_p
    iterations: int = 8  # T
    omega: float = 0.8  # TPS blend factor
    tile: int = 16
    fusion: str = "concat"
    beta: float = 0.5
    gamma: float = 0.5
    lam: float = 1.0
    mu: float = 0.9
    sources: int = 2  # S
    seed: int = 0
    widths: tuple = (32, 64, 96, 128)
    decoder_widths: tuple = (64, 48, 32, 16)  # deepest to full resolution, one per scale
    pose_width: int = 32
    pose_skip_width: int = 8
    se_reduction: int = 4
    corr_radius: int = 4
    gru_hidden: int = 32
    context: int = 32
    heatmap_sigma: float = 1.0  # feature-grid pixels
    prior_scale: float = 1.0  # s0
    depth_residual_scale: float = 0.05  # metres per unit of the decoder depth channel
    d_min: float = 0.05
    pose_in_depth: bool = True
    pose_in_skips: bool = True
    share_tps: bool = False
    lr: float = 2e-4
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if self.k not in (3, 4):
            raise ValueError(f"k must be 3 or 4, got {self.k}")
        if self.resolution % (2**self.k):
            raise ValueError(f"resolution {self.resolution} not divisible by 2^k = {2**self.k}")
        if len(self.widths) != 4:
            raise ValueError("widths needs four entries")
        if len(self.decoder_widths) != self.k + 1:
            raise ValueError(f"decoder_widths needs k + 1 = {self.k + 1} entries")
        if self.fusion not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        if self.sources < 1:
            raise ValueError("need at least one source view")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.loss_weights  # validates the loss terms
        self.solver_config

    @property
    def d_pose(self):
        return self.joints

    @property
    def feat_size(self):
        return self.resolution // 2**self.k

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma, self.lam, self.mu)

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(self.iterations, self.k, self.corr_radius, self.gru_hidden, self.context, self.d_min)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def micro_config(**kw) -> ModelConfig:
    """Tiny 64-bit configuration for finite-difference checks."""
    base = dict(
        resolution=32, k=3, d_img=8, joints=5, iterations=2, widths=(8, 8, 8, 8), decoder_widths=(8, 8, 8, 8),
        pose_width=8, pose_skip_width=4, corr_radius=1, gru_hidden=8, context=8, dtype="float64", tile=8,
    )
    base.update(kw)
    return ModelConfig(**base)
