"""Feature-pyramid pipeline: variants, forward pass, probes, toy training.

The full pipeline projects each backbone level to a common width with 1x1
convolutions, promotes the deepest level with the intra-level transformer
stage, runs the cross-level decoupled stage over all levels, and decodes
top-down: the deepest output is smoothed with a 3x3 convolution and every
shallower output is smoothed after adding the nearest-upsampled deeper
result.  Ablation variants swap out pieces of that structure while keeping
the same decoder vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cdi import CdiBlock
from .config import ConfigurationError, PipelineConfig
from .isp import IspBlock
from .tensor import ContractViolation, Tensor


@dataclass
class FeaturePyramid:
    """Backbone levels keyed by index; level i has stride 2^i and spatial
    dims that ceil-halve from one level to the next."""

    levels: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.levels:
            raise ContractViolation("a feature pyramid needs at least one level")
        keys = sorted(self.levels)
        if any(b - a != 1 for a, b in zip(keys, keys[1:])):
            raise ContractViolation(f"pyramid levels must be consecutive, got {keys}")
        c = None
        prev = None
        for lvl in keys:
            arr = np.asarray(self.levels[lvl])
            if arr.ndim != 3:
                raise ContractViolation(f"level {lvl} must be (c, h, w), got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"level {lvl} contains non-finite entries")
            if c is None:
                c = arr.shape[0]
            elif arr.shape[0] != c:
                raise ContractViolation(
                    f"level {lvl} has {arr.shape[0]} channels, expected {c}")
            if prev is not None:
                eh, ew = math.ceil(prev[0] / 2), math.ceil(prev[1] / 2)
                if arr.shape[1:] != (eh, ew):
                    raise ContractViolation(
                        f"level {lvl} dims {arr.shape[1:]} should ceil-halve the previous "
                        f"level's {prev} to {(eh, ew)}")
            prev = arr.shape[1:]
            self.levels[lvl] = arr

    @property
    def strides(self) -> dict[int, int]:
        return {lvl: 2 ** lvl for lvl in sorted(self.levels)}

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[0]


def synthetic_pyramid(cfg: PipelineConfig, seed: int | None = None) -> FeaturePyramid:
    """Standard-normal pyramid at the config's level dims, seeded
    independently of weight initialisation."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    levels = {
        lvl: rng.standard_normal((cfg.in_channels, h, w))
        for lvl, (h, w) in cfg.level_dims().items()
    }
    return FeaturePyramid(levels=levels)


class Pipeline:
    """A built variant: parameters plus a forward pass over level maps."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.variant = cfg.variant
        self.levels = list(cfg.cdi.levels)
        self.single_level = cfg.single_input_level()
        c, in_c = cfg.channels, cfg.in_channels
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
        dims = cfg.level_dims()

        self.lateral: dict[int, Tensor] = {}
        for lvl in self.levels:
            self.lateral[lvl] = T.conv_param(rng, c, in_c, 1, 1, name=f"lateral_{lvl}")

        self.isp_blocks: list[IspBlock] = []
        self.cdi: CdiBlock | None = None
        self.dilated: Tensor | None = None
        if self.variant == "sdtp":
            deepest_hw = dims[max(self.levels)]
            for k in range(cfg.isp.blocks):
                self.isp_blocks.append(IspBlock(
                    rng, c, rates=cfg.isp.rates, n_heads=cfg.isp.heads,
                    pos_embed=cfg.isp.pos_embed, mode=cfg.arf.mode, tau=cfg.arf.tau,
                    name=f"isp{k}", hw=deepest_hw))
            self.cdi = CdiBlock(rng, c, n_heads=cfg.cdi.heads,
                                mode=cfg.arf.mode, tau=cfg.arf.tau)
        elif self.variant == "dilated_c5":
            self.dilated = T.conv_param(rng, c, c, 3, 3, name="dilated_deepest")

        self.smooth: dict[int, Tensor] = {}
        for lvl in self.levels:
            self.smooth[lvl] = T.conv_param(rng, c, c, 3, 3, name=f"smooth_{lvl}")

    # -- forward ------------------------------------------------------------

    def forward_tensors(self, maps: dict[int, Tensor]) -> tuple[dict[int, Tensor], Tensor | None]:
        if sorted(maps) != sorted(self.levels):
            raise ContractViolation(
                f"pipeline built for levels {sorted(self.levels)}, got {sorted(maps)}")
        in_c = self.cfg.in_channels
        for lvl, m in maps.items():
            if m.ndim != 3 or m.shape[0] != in_c:
                raise ContractViolation(
                    f"level {lvl}: expected ({in_c}, h, w) map, got {m.shape}")

        if self.single_level is not None:
            src = T.conv2d(maps[self.single_level], self.lateral[self.single_level])
            outs = {
                lvl: T.resample_nearest(src, (maps[lvl].shape[1], maps[lvl].shape[2]))
                for lvl in self.levels
            }
            return {lvl: T.conv2d(outs[lvl], self.smooth[lvl]) for lvl in self.levels}, None

        lat = {lvl: T.conv2d(maps[lvl], self.lateral[lvl]) for lvl in self.levels}
        deepest = max(self.levels)
        dep: Tensor | None = None

        if self.variant == "sdtp":
            x = lat[deepest]
            for blk in self.isp_blocks:
                x = blk(x)
            lat = {**lat, deepest: x}
            lat, dep = self.cdi(lat)
        elif self.variant == "dilated_c5":
            lat = {**lat, deepest: T.conv2d(lat[deepest], self.dilated, dilation=3)}

        if self.variant == "no_interaction":
            return {lvl: T.conv2d(lat[lvl], self.smooth[lvl]) for lvl in self.levels}, dep

        outs: dict[int, Tensor] = {}
        prev: Tensor | None = None
        for lvl in sorted(self.levels, reverse=True):
            x = lat[lvl]
            if prev is not None:
                x = T.add(x, T.resample_nearest(prev, (x.shape[1], x.shape[2])))
            outs[lvl] = T.conv2d(x, self.smooth[lvl])
            prev = outs[lvl]
        return {lvl: outs[lvl] for lvl in sorted(outs)}, dep

    def forward(self, pyramid: FeaturePyramid) -> tuple[dict[int, np.ndarray], float]:
        maps = {lvl: Tensor(arr) for lvl, arr in pyramid.levels.items()}
        outs, dep = self.forward_tensors(maps)
        return ({lvl: t.data for lvl, t in outs.items()},
                float(dep.data) if dep is not None else 0.0)

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for lvl in self.levels:
            out.append((f"lateral_{lvl}", self.lateral[lvl]))
        for k, blk in enumerate(self.isp_blocks):
            out += [(p.name or f"isp{k}_p{i}", p) for i, p in enumerate(blk.params())]
        if self.cdi is not None:
            out += [(p.name or f"cdi_p{i}", p) for i, p in enumerate(self.cdi.params())]
        if self.dilated is not None:
            out.append(("dilated_deepest", self.dilated))
        for lvl in self.levels:
            out.append((f"smooth_{lvl}", self.smooth[lvl]))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


def build_variant(cfg: PipelineConfig) -> Pipeline:
    """Construct a pipeline for the config's variant tag (validated by the
    config itself); unknown tags never get this far."""
    return Pipeline(cfg)


def sdtp_forward(pyramid: FeaturePyramid, cfg: PipelineConfig | None = None
                 ) -> tuple[dict[int, np.ndarray], float]:
    """One-call forward pass: build the configured variant and run it."""
    cfg = cfg or PipelineConfig()
    return build_variant(cfg).forward(pyramid)


def zero_enhancement_branches(pipe: Pipeline) -> None:
    """Zero every weight that feeds the transformer stages' outputs, which
    collapses the full pipeline onto the plain baseline structure exactly:
    both stages become identities thanks to their residual connections."""
    for blk in pipe.isp_blocks:
        T.zero_(blk.attn.wo)
        T.zero_(blk.mlp.lin2.w)
        T.zero_(blk.mlp.lin2.b)
    if pipe.cdi is not None:
        T.zero_(pipe.cdi.dec.refine_v)
        T.zero_(pipe.cdi.dec.refine_h)
        T.zero_(pipe.cdi.attn_v.wo)
        T.zero_(pipe.cdi.attn_h.wo)
        T.zero_(pipe.cdi.mlp.lin2.w)
        T.zero_(pipe.cdi.mlp.lin2.b)


def cross_level_sensitivity(pipe: Pipeline, pyramid: FeaturePyramid,
                            delta: float = 0.5) -> tuple[list[int], np.ndarray]:
    """Max absolute output change per (source level, output level) when one
    centre cell of the source level is nudged by delta.  Exact zeros mean
    the output provably never saw that level."""
    levels = sorted(pyramid.levels)
    base, _ = pipe.forward(pyramid)
    matrix = np.zeros((len(levels), len(levels)))
    for i, src in enumerate(levels):
        bumped = {lvl: arr.copy() for lvl, arr in pyramid.levels.items()}
        _, h, w = bumped[src].shape
        bumped[src][0, h // 2, w // 2] += delta
        outs, _ = pipe.forward(FeaturePyramid(levels=bumped))
        for j, dst in enumerate(levels):
            matrix[i, j] = float(np.abs(outs[dst] - base[dst]).max())
    return levels, matrix


# ---------------------------------------------------------------------------
# toy training: multi-level identity regression

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite at step {step}: {value}")
        self.step = step


@dataclass
class TrainTrace:
    total: list[float] = field(default_factory=list)
    task: list[float] = field(default_factory=list)
    dep: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.total[0]

    @property
    def final(self) -> float:
        return self.total[-1]


def toy_train(pipe: Pipeline, pyramid: FeaturePyramid, steps: int = 200,
              lr: float = 0.05, lam: float | None = None) -> TrainTrace:
    """Plain gradient descent fitting the pipeline outputs to the inputs.

    The task loss is the mean over levels of the per-level mean squared
    error against the raw input maps, so in_channels must equal channels.
    The optimised objective adds lambda times the decoupling penalty.
    Records total/task/penalty at each step plus a final evaluation
    (trace length steps + 1); raises TrainingDiverged on non-finite loss.
    """
    if pipe.cfg.in_channels != pipe.cfg.channels:
        raise ContractViolation(
            "identity regression needs in_channels == channels "
            f"(got {pipe.cfg.in_channels} vs {pipe.cfg.channels})")
    lam = pipe.cfg.cdi.lam if lam is None else lam
    params = pipe.params()
    trace = TrainTrace()

    def evaluate() -> Tensor:
        maps = {lvl: Tensor(arr) for lvl, arr in pyramid.levels.items()}
        outs, dep = pipe.forward_tensors(maps)
        task = None
        for lvl in sorted(outs):
            diff = T.sub(outs[lvl], maps[lvl])
            term = T.mean_all(T.mul(diff, diff))
            task = term if task is None else T.add(task, term)
        task = T.scale(task, 1.0 / len(outs))
        dep = dep if dep is not None else Tensor(0.0)
        total = T.add(task, T.scale(dep, lam))
        trace.task.append(float(task.data))
        trace.dep.append(float(dep.data))
        trace.total.append(float(total.data))
        return total

    # overflow during a diverging run is detected and raised, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            total = evaluate()
            if not np.isfinite(trace.total[-1]):
                raise TrainingDiverged(step, trace.total[-1])
            total.backward()
            for p in params:
                if p.grad is not None:
                    p.data = p.data - lr * p.grad
                p.grad = None

        evaluate()
    if not np.isfinite(trace.total[-1]):
        raise TrainingDiverged(steps, trace.total[-1])
    return trace
