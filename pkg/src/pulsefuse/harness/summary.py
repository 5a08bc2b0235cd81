"""Model complexity: exact parameter count, closed-form FLOPs and storage.

FLOPs count the dense work only: convolutions and linear maps at 2 FLOPs per
multiply-accumulate, and the selective scan at 6 FLOPs per state element and
step (exp, two products and the multiply-add into the output).  Element-wise
activations, normalisation and pooling are left out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..fusion import N_STAGES, F3Mamba, F3MambaConfig

REFERENCE_PARAMS_M = 13.87
FLOP_INPUT_SIZE = 128


@dataclass(frozen=True)
class ModelSummary:
    param_count: int
    flop_estimate: float
    checkpoint_bytes: int
    conv_params: int
    reference_delta_m: float

    def lines(self) -> list[str]:
        return [
            f"parameters      {self.param_count:,} ({self.param_count / 1e6:.4f} M)",
            f"conv parameters {self.conv_params:,}",
            f"FLOPs           {self.flop_estimate / 1e9:.3f} G (input 160x3x{FLOP_INPUT_SIZE}x{FLOP_INPUT_SIZE}, MAC = 2)",
            f"storage         {self.checkpoint_bytes / 2**20:.3f} MB float64, {self.param_count * 4 / 2**20:.3f} MB float32",
            f"vs 13.87 M      delta {self.reference_delta_m:+.4f} M (informational)",
        ]


def conv_param_count(cfg: F3MambaConfig) -> int:
    model = F3Mamba(cfg)
    return sum(t.size for name, t in model.store.items() if ".conv" in name or ".tdc." in name)


def flop_estimate(cfg: F3MambaConfig, input_size: int = FLOP_INPUT_SIZE) -> float:
    c, n, t = cfg.channels, cfg.d_state, cfg.frames
    widths = [3, max(c // 2, 1), c, c]
    side = input_size
    stem = 0.0
    for i, s in enumerate(cfg.stem_strides):
        side = -(-side // s)
        stem += 2.0 * 9 * widths[i] * widths[i + 1] * t * side * side

    def mamba(L: int) -> float:
        linear = 2.0 * L * (4 * c * c + 2 * c * n)  # x, z, delta, out projections + B, C
        return linear + 6.0 * L * c * n

    views = 2 if cfg.views == "both" else 1
    branch, fuse = stem, 0.0
    for stage in range(N_STAGES):
        L = t * side * side
        branch += 2.0 * 27 * c * c * L + mamba(L)
        side //= 2
        fused_here = cfg.views == "both" and (cfg.fusion == "hierarchical" or stage == N_STAGES - 1)
        if fused_here:
            Lp = t * side * side
            fuse += 2 * mamba(Lp) + 2.0 * c * c * Lp
    return views * branch + fuse + 2.0 * c * t


def model_summary(cfg: F3MambaConfig) -> ModelSummary:
    cfg.validate()
    count = F3Mamba(cfg).param_count()
    flop_cfg = replace(cfg, input_size=FLOP_INPUT_SIZE)
    return ModelSummary(
        param_count=count,
        flop_estimate=flop_estimate(flop_cfg),
        checkpoint_bytes=count * 8,
        conv_params=conv_param_count(cfg),
        reference_delta_m=count / 1e6 - REFERENCE_PARAMS_M,
    )
