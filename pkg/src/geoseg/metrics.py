"""Region overlap and surface distance metrics, plus paired significance tests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import ShapeError


def dice(ra, rb) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as a perfect match."""
    ra = np.asarray(ra) > 0
    rb = np.asarray(rb) > 0
    if ra.shape != rb.shape:
        raise ShapeError(f"dice: {ra.shape} vs {rb.shape}")
    denom = int(ra.sum()) + int(rb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ra & rb).sum()) / denom


def extract_surface(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    Pixels beyond the image border count as background, so foreground pixels
    on the border are always surface points. Returns an [N, 2] array of
    (y, x) coordinates.
    """
    m = np.asarray(mask) > 0
    if m.ndim != 2:
        raise ShapeError("extract_surface expects a 2D mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    surface = m & ~interior
    ys, xs = np.nonzero(surface)
    return np.column_stack([ys, xs])


def assd(sa, sb, spacing=(1.0, 1.0)) -> float:
    """Average symmetric surface distance between two point sets."""
    sa = np.asarray(sa, dtype=np.float64)
    sb = np.asarray(sb, dtype=np.float64)
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError("assd is undefined for an empty surface")
    sp = np.asarray(spacing, dtype=np.float64)
    da = _min_dists(sa * sp, sb * sp)
    db = _min_dists(sb * sp, sa * sp)
    return float((da.sum() + db.sum()) / (len(sa) + len(sb)))


def _min_dists(pts, ref, block=2048):
    out = np.empty(len(pts))
    for at in range(0, len(pts), block):
        chunk = pts[at:at + block]
        d2 = ((chunk[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        out[at:at + block] = np.sqrt(d2.min(axis=1))
    return out


def mask_assd(mask_a, mask_b, spacing=(1.0, 1.0)):
    """ASSD between two masks' surfaces; None when either surface is empty."""
    sa = extract_surface(mask_a)
    sb = extract_surface(mask_b)
    if len(sa) == 0 or len(sb) == 0:
        return None
    return assd(sa, sb, spacing)


# ---------------------------------------------------------------------------
# paired two-sided t-test with a continued-fraction incomplete beta CDF


def _betacf(a, b, x, max_iter=300, eps=1e-14):
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x < 0.0 or x > 1.0:
        raise ValueError("x outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    Identical inputs give p = 1 by convention; a nonzero constant difference
    (zero variance) gives p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired_t_test needs two equal-length vectors")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    if np.all(d == 0.0):
        return 1.0
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    """Per-sample scores with summary rows, serializable and printable."""

    methods: dict = field(default_factory=dict)   # name -> {"dice": [...], "assd": [...]}
    p_values: dict = field(default_factory=dict)  # "a_vs_b" -> {"dice": p, "assd": p}

    def add_method(self, name, dices, assds):
        self.methods[name] = {"dice": [float(v) for v in dices],
                              "assd": [None if v is None else float(v) for v in assds]}

    def compare(self, name_a, name_b):
        a, b = self.methods[name_a], self.methods[name_b]
        entry = {"dice": paired_t_test(a["dice"], b["dice"])}
        if None not in a["assd"] and None not in b["assd"]:
            entry["assd"] = paired_t_test(a["assd"], b["assd"])
        self.p_values[f"{name_a}_vs_{name_b}"] = entry
        return entry

    def summary(self, name):
        m = self.methods[name]
        d = np.array(m["dice"])
        valid_assd = [v for v in m["assd"] if v is not None]
        out = {"dice_mean": float(d.mean()), "dice_std": float(d.std()),
               "assd_undefined": len(m["assd"]) - len(valid_assd)}
        if valid_assd:
            arr = np.array(valid_assd)
            out["assd_mean"] = float(arr.mean())
            out["assd_std"] = float(arr.std())
        return out

    def to_json(self) -> str:
        return json.dumps({
            "methods": self.methods,
            "summaries": {k: self.summary(k) for k in self.methods},
            "p_values": self.p_values,
        }, indent=2)

    def table(self) -> str:
        rows = [f"{'Method':<28} {'Dice(%)':>16} {'ASSD(pixels)':>16}"]
        rows.append("-" * 62)
        for name in self.methods:
            s = self.summary(name)
            dice_txt = f"{100 * s['dice_mean']:.2f}+/-{100 * s['dice_std']:.2f}"
            if "assd_mean" in s:
                assd_txt = f"{s['assd_mean']:.2f}+/-{s['assd_std']:.2f}"
            else:
                assd_txt = "undefined"
            rows.append(f"{name:<28} {dice_txt:>16} {assd_txt:>16}")
        for pair, ps in self.p_values.items():
            txt = ", ".join(f"{k} p={v:.3g}" for k, v in ps.items())
            rows.append(f"  {pair}: {txt}")
        return "\n".join(rows)
