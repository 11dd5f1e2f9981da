"""Method names and dispatch.

Accepted names::

    gradient  guided_backprop  ixg  intgrad  gradcam  layercam  occlusion  rise
    smoothgrad  smoothgrad-<base>          base in gradient/guided_backprop/ixg/intgrad
    lrp-focus  lrp-zplus  lrp-composite:<gamma>  lrp-epsilon:<eps>
    s-<method>:<K>                         any of the above, Gaussian-smoothed

so ``s-ixg:17`` is smoothed Input x Gradient with a 17x17 kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attribution import methods as am
from .attribution.maps import smooth_gaussian
from .lrp import LrpConfig, lrp_attr

BASE_METHODS = ("gradient", "guided_backprop", "ixg", "intgrad", "gradcam", "layercam",
                "occlusion", "rise")
# methods whose attribution is a pure backward pass: bit-zero on disconnected cells
BACKPROP_METHODS = ("gradient", "guided_backprop", "ixg", "intgrad", "layercam")


@dataclass(frozen=True)
class MethodSpec:
    name: str
    base: str
    smooth: int = 1
    lrp: LrpConfig | None = None
    smoothgrad_base: str | None = None


def parse_method(name):
    name = str(name).strip()
    smooth = 1
    inner = name
    if name.startswith("s-"):
        inner, _, k = name[2:].rpartition(":")
        try:
            smooth = int(k)
        except ValueError:
            raise ValueError(f"smoothed method {name!r} needs a kernel size, e.g. s-ixg:17") from None
        if smooth < 1 or smooth % 2 == 0:
            raise ValueError(f"smoothing kernel must be odd and >= 1 in {name!r}")
    if inner.startswith("lrp-"):
        return MethodSpec(name, "lrp", smooth, lrp=LrpConfig.parse(inner[4:]))
    if inner == "smoothgrad" or inner.startswith("smoothgrad-"):
        base = inner.partition("-")[2] or "gradient"
        if base not in am.SMOOTHGRAD_BASES:
            raise ValueError(f"unknown smoothgrad base in {name!r}")
        return MethodSpec(name, "smoothgrad", smooth, smoothgrad_base=base)
    if inner not in BASE_METHODS:
        raise ValueError(f"unknown attribution method {name!r}")
    return MethodSpec(name, inner, smooth)


def attribute(method, model, x, target, config=None, at_input=True, seed=0, tap=None):
    """Run a named method on ``model`` at tap activation ``x``."""
    spec = method if isinstance(method, MethodSpec) else parse_method(method)
    cfg = config or am.MethodConfig()
    b = spec.base
    if b == "gradient":
        out = am.gradient_attr(model, x, target, tap)
    elif b == "guided_backprop":
        out = am.guided_backprop_attr(model, x, target, tap)
    elif b == "ixg":
        out = am.ixg_attr(model, x, target, tap)
    elif b == "intgrad":
        out = am.intgrad_attr(model, x, target, cfg.intgrad_steps, cfg.intgrad_baseline, tap)
    elif b == "gradcam":
        out = am.gradcam_attr(model, x, target, tap)
    elif b == "layercam":
        out = am.layercam_attr(model, x, target, tap)
    elif b == "occlusion":
        k, s = cfg.occlusion_window(at_input)
        out = am.occlusion_attr(model, x, target, k, s, cfg.occlusion_baseline, tap)
    elif b == "rise":
        out = am.rise_attr(model, x, target, cfg.rise_masks, cfg.rise_grid, cfg.rise_keep_prob,
                           seed=seed, tap=tap)
    elif b == "smoothgrad":
        out = am.smoothgrad_attr(model, x, target, spec.smoothgrad_base, cfg.smoothgrad_samples,
                                 cfg.smoothgrad_noise_frac, seed=seed, tap=tap,
                                 intgrad_steps=cfg.intgrad_steps)
    elif b == "lrp":
        out = lrp_attr(model, x, target, spec.lrp, tap, at_input=at_input)
    else:  # pragma: no cover - parse_method guards this
        raise ValueError(b)
    if spec.smooth > 1:
        out = smooth_gaussian(out, spec.smooth)
    out.method = spec.name
    return out


__all__ = ["BASE_METHODS", "BACKPROP_METHODS", "MethodSpec", "parse_method", "attribute"]
