"""FLOP accounting for the aggregation paths.

Two independent routes produce a :class:`FlopReport`:

* :func:`flops_analytic` evaluates closed-form counts from dims and config.
* :func:`flops_runtime` runs an operator with a live :class:`FlopCounter`;
  each kernel tallies the element counts of the arithmetic it executes.

Counting conventions: one FLOP per add, multiply or divide; an n-term
reduction counts n adds (accumulation starts from zero); masked window taps
are computed and therefore counted; exponentials are tallied separately and
are never part of the aggregation total.
"""
import contextvars
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

from .validation import AggregationConfig, ConfigError

KINDS = ("mul", "add", "div", "exp")
_INT64_MAX = 2 ** 63 - 1

_active = contextvars.ContextVar("cais_flop_counter", default=None)


class FlopCounter:
    """Per-invocation accumulator; kernels reach it through :func:`tally`."""

    def __init__(self):
        self.stages = OrderedDict()

    def add(self, stage, **counts):
        bucket = self.stages.setdefault(stage, dict.fromkeys(KINDS, 0))
        for kind, n in counts.items():
            bucket[kind] += int(n)
            if bucket[kind] > _INT64_MAX:
                raise OverflowError("FLOP counter overflow in stage %r (%s)" % (stage, kind))

    def merge(self, other):
        for stage, counts in other.stages.items():
            self.add(stage, **counts)


def tally(stage, **counts):
    counter = _active.get()
    if counter is not None:
        counter.add(stage, **counts)


@contextmanager
def counting(counter=None):
    counter = FlopCounter() if counter is None else counter
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


@dataclass
class FlopReport:
    mode: str
    dims: tuple
    config: dict
    stages: "OrderedDict[str, dict]" = field(default_factory=OrderedDict)

    @property
    def totals(self):
        out = dict.fromkeys(KINDS, 0)
        for counts in self.stages.values():
            for k in KINDS:
                out[k] += counts.get(k, 0)
        return out

    def stage_flops(self, stage):
        c = self.stages.get(stage, {})
        return c.get("mul", 0) + c.get("add", 0) + c.get("div", 0)

    @property
    def aggregation_flops(self):
        """Arithmetic FLOPs of every stage except guidance generation."""
        return sum(self.stage_flops(s) for s in self.stages if s != "guidance")

    @property
    def total_flops(self):
        t = self.totals
        return t["mul"] + t["add"] + t["div"]

    def to_text(self, prefix=""):
        lines = ["%smode = %s" % (prefix, self.mode),
                 "%sdims = %s" % (prefix, "x".join(str(d) for d in self.dims))]
        for k, v in self.config.items():
            lines.append("%s%s = %s" % (prefix, k, v))
        for stage, counts in self.stages.items():
            for kind in KINDS:
                lines.append("%s%s.%s = %d" % (prefix, stage, kind, counts.get(kind, 0)))
        for kind, v in self.totals.items():
            lines.append("%stotal.%s = %d" % (prefix, kind, v))
        lines.append("%saggregation_flops = %d" % (prefix, self.aggregation_flops))
        return "\n".join(lines)


def _stage(mul=0, add=0, div=0, exp=0):
    return {"mul": int(mul), "add": int(add), "div": int(div), "exp": int(exp)}


def _config_echo(cfg):
    return OrderedDict(s=cfg.s, w_s=cfg.w_s, w_d=cfg.w_d, block_reduce=cfg.block_reduce,
                       stage1_renormalize=cfg.stage1_renormalize,
                       left_center_scale=cfg.left_center_scale,
                       border_renormalize_spatial=cfg.border_renormalize_spatial)


def deconv_kernel_size(s):
    return 2 * s - s % 2


def flops_analytic(dims, cfg=None, mode="decomposed"):
    """Closed-form FLOP counts for upsampling an (H, W, D) volume by ``cfg.s``."""
    cfg = AggregationConfig() if cfg is None else cfg
    H, W, D = (int(d) for d in dims)
    if min(H, W, D) < 1:
        raise ConfigError("dims must be positive, got %s" % (dims,))
    s, taps_sp, w_d = cfg.s, cfg.w_s * cfg.w_s, cfg.w_d
    n_fine = H * W * D * s ** 3
    stages = OrderedDict()
    if mode == "full3d":
        taps = taps_sp * w_d
        # weight product G_L * R, then multiply-accumulate with the cost
        stages["full3d"] = _stage(mul=2 * taps * n_fine, add=taps * n_fine)
    elif mode == "decomposed":
        n1 = H * W * D * s
        mul = w_d * n1
        add = w_d * s * s * n1 + w_d * n1
        div = 0
        if cfg.block_reduce == "mean":
            mul += w_d * n1
        if cfg.stage1_renormalize:
            add += w_d * n1
            div += w_d * n1
        stages["disparity"] = _stage(mul=mul, add=add, div=div)
        if cfg.left_center_scale:
            cells = H * W
            lmul = n1 + (cells if cfg.block_reduce == "mean" else 0)
            stages["left_center"] = _stage(mul=lmul, add=s * s * cells)
        sp_add = taps_sp * n_fine
        sp_div = 0
        if cfg.border_renormalize_spatial:
            # in-bounds weight sum is per fine pixel, the divide per element
            sp_add += taps_sp * H * W * s * s
            sp_div = n_fine
        stages["spatial"] = _stage(mul=taps_sp * n_fine, add=sp_add, div=sp_div)
    elif mode == "trilinear":
        passes = (H * W * D * s, H * W * s * D * s, n_fine)
        for name, n in zip(("trilinear_d", "trilinear_x", "trilinear_y"), passes):
            stages[name] = _stage(mul=2 * n, add=n)
    elif mode == "deconv_bilinear":
        k = deconv_kernel_size(s)
        inputs = (H * W * D, H * W * D * s, H * W * s * D * s)
        for name, n in zip(("deconv_d", "deconv_x", "deconv_y"), inputs):
            stages[name] = _stage(mul=k * n, add=k * n)
    elif mode == "nearest":
        stages["nearest"] = _stage()
    else:
        raise ConfigError("unknown FLOP mode %r" % mode)
    return FlopReport(mode=mode, dims=(H, W, D), config=_config_echo(cfg), stages=stages)


def guidance_flops_analytic(fine_hw, n_in, hidden, n_dirs, n_out=1):
    """FLOPs of one guidance_forward call (reported apart from aggregation).

    ``n_out == 1`` is the per-direction encoder (one MLP pass per direction);
    ``n_out == n_dirs`` is the single-pass fusion head.
    """
    n_pix = fine_hw[0] * fine_hw[1]
    rows = n_pix * (n_dirs if n_out == 1 else 1)
    macs = rows * (n_in * hidden + hidden * hidden + hidden * n_out)
    return _stage(mul=macs, add=macs + 2 * n_dirs * n_pix, div=n_dirs * n_pix,
                  exp=n_dirs * n_pix)


def flops_runtime(fn, *args, **kwargs):
    """Run ``fn`` with counting enabled; return ``(result, stages)``."""
    with counting() as counter:
        result = fn(*args, **kwargs)
    return result, counter.stages


def runtime_report(mode, dims, cfg, stages):
    return FlopReport(mode=mode, dims=tuple(dims), config=_config_echo(cfg),
                      stages=OrderedDict((k, dict(v)) for k, v in stages.items()))
