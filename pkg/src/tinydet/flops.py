"""Analytic multiply-accumulate and parameter accounting.

Counts mirror the forward pass at batch 1: convolutions contribute
k^2 * c_in * c_out * h_out * w_out MACs and matrix products r * k * s, so
the totals equal what an instrumented run of the conv/matmul kernels
reports.  Normalizations, activations and bilinear resampling contribute
no MACs; bias adds are excluded on both sides.  Parameters count trainable
values only (running statistics excluded).  FLOPs = 2 * MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

from .config import PRESETS, RunConfig


@dataclass
class FlopsReport:
    entries: List[Tuple[str, int, int]] = field(default_factory=list)  # (path, macs, params)

    def add(self, path: str, macs: int, params: int) -> None:
        self.entries.append((path, int(macs), int(params)))

    def total_macs(self) -> int:
        return sum(e[1] for e in self.entries)

    def total_params(self) -> int:
        return sum(e[2] for e in self.entries)

    def total_flops(self) -> int:
        return 2 * self.total_macs()

    def module_totals(self) -> List[Tuple[str, int, int]]:
        order: List[str] = []
        acc = {}
        for path, macs, params in self.entries:
            top = path.split(".", 1)[0]
            if top not in acc:
                acc[top] = [0, 0]
                order.append(top)
            acc[top][0] += macs
            acc[top][1] += params
        return [(t, acc[t][0], acc[t][1]) for t in order]

    def table(self) -> str:
        rows = [("module", "MACs", "params", "FLOPs")]
        for name, macs, params in self.module_totals():
            rows.append((name, f"{macs:,}", f"{params:,}", f"{2 * macs:,}"))
        rows.append(("total", f"{self.total_macs():,}", f"{self.total_params():,}", f"{self.total_flops():,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(s.ljust(widths[i]) for i, s in enumerate(r)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


class _Counter:
    def __init__(self, report: FlopsReport):
        self.r = report

    def conv(self, path, cin, cout, k, oh, ow, bn=True):
        # conv blocks are bias-free (the norm supplies the shift); bare convs carry one
        macs = k * k * cin * cout * oh * ow
        params = cout * cin * k * k + (0 if bn else cout) + (2 * cout if bn else 0)
        self.r.add(path, macs, params)

    def bottleneck(self, path, cin, cout, oh, ow, stride):
        hidden = cout // 2
        self.conv(path + ".reduce", cin, hidden, 1, oh * stride, ow * stride)
        self.conv(path + ".mid", hidden, hidden, 3, oh, ow)
        self.conv(path + ".expand", hidden, cout, 1, oh, ow)

    def linear(self, path, rows, din, dout, bias=True):
        self.r.add(path, rows * din * dout, din * dout + (dout if bias else 0))

    def mha(self, path, tq, tkv, d):
        macs = tq * d * d + 2 * tkv * d * d + tq * d * d + 2 * tq * tkv * d
        self.r.add(path, macs, 4 * d * d)

    def ln(self, path, d):
        self.r.add(path, 0, 2 * d)

    def params_only(self, path, n):
        self.r.add(path, 0, n)


def _count_csp_fusion(c: _Counter, path: str, d: int, oh: int, ow: int) -> None:
    c.conv(path + ".entry", 2 * d, d, 1, oh, ow)
    w = d // 2
    for s in range(3):
        c.conv(f"{path}.stage{s}.a", w, w, 3, oh, ow)
        c.conv(f"{path}.stage{s}.b", w, w, 3, oh, ow)
        w //= 2
    c.conv(path + ".exit", d, d, 1, oh, ow)


def _count_bifusion(c: _Counter, path: str, d: int, oh: int, ow: int) -> None:
    # align runs at the deeper level (half extents); inject at the shallower (double)
    c.conv(path + ".align", d, d, 1, oh // 2, ow // 2)
    c.conv(path + ".inject", d, d, 3, oh, ow)
    _count_csp_fusion(c, path + ".fusion", d, oh, ow)


def flops_count(cfg: RunConfig, extent: int = 0) -> FlopsReport:
    """Analytic per-module counts for the configured model at batch 1."""
    cfg.validate()
    p = PRESETS[cfg.preset]
    e = extent or p.default_extent
    if e % 32:
        raise ValueError("extent must be divisible by 32")
    rep = FlopsReport()
    c = _Counter(rep)
    C, db, dn, dd = p.base_channels, p.d_back, p.d_neck, p.d_dec
    g = e // 16
    tb = g * g  # backbone tokens

    # backbone
    c.linear("backbone.patch", tb, 3 * 16 * 16, db)
    for i in range(p.n_back_blocks):
        c.ln(f"backbone.block{i}.ln1", db)
        c.mha(f"backbone.block{i}.attn", tb, tb, db)
        c.ln(f"backbone.block{i}.ln2", db)
        c.linear(f"backbone.block{i}.mlp.fc1", tb, db, 4 * db)
        c.linear(f"backbone.block{i}.mlp.fc2", tb, 4 * db, db)

    # adapter
    three_scale = cfg.neck_mode == "baseline3" or cfg.n_bifusion == 0
    hw = lambda lvl: e // 2**lvl
    v = cfg.ssa_variant
    if v == "none":
        c.conv("adapter.proj3", db, dn, 1, hw(3), hw(3))
        c.conv("adapter.proj4", db, dn, 1, hw(4), hw(4))
        c.conv("adapter.proj5", db, dn, 3, hw(5), hw(5))
        if not three_scale:
            c.conv("adapter.proj2", db, 2 * C, 1, hw(2), hw(2))
    else:
        n_stages = {"up_to_f4": 4, "up_to_f5": 5, "f2_f3_f5": 5}.get(v, 3)
        cin = 3
        for n in range(1, n_stages + 1):
            cout = C * 2 ** (n - 1)
            c.conv(f"adapter.sde{n}", cin, cout, 3, hw(n), hw(n))
            cin = cout
        c.conv("adapter.fuse3", 4 * C + db, dn, 1, hw(3), hw(3))
        if v == "bottleneck_spb":
            c.bottleneck("adapter.proj4", db, dn, hw(4), hw(4), stride=1)
            c.bottleneck("adapter.proj5", db, dn, hw(5), hw(5), stride=2)
        else:
            if v not in ("up_to_f4", "up_to_f5"):
                c.conv("adapter.proj4", db, dn, 1, hw(4), hw(4))
            c.conv("adapter.proj5", db, dn, 3, hw(5), hw(5))
        if v in ("up_to_f4", "up_to_f5"):
            c.conv("adapter.fuse4", 8 * C + db, dn, 1, hw(4), hw(4))
        if v in ("up_to_f5", "f2_f3_f5"):
            c.conv("adapter.fuse5", 16 * C + dn, dn, 1, hw(5), hw(5))
        if v == "early_f2_fusion":
            c.conv("adapter.fuse2", 2 * C + db, 2 * C, 1, hw(2), hw(2))

    # neck
    use_b3 = cfg.neck_mode == "pbm" and cfg.n_bifusion >= 1
    use_b4 = cfg.neck_mode == "pbm" and cfg.n_bifusion >= 2
    if not use_b3:
        c.conv("neck.lat3", dn, dn, 1, hw(3), hw(3))
        c.conv("neck.td_smooth3", dn, dn, 3, hw(3), hw(3))
    if not use_b4:
        c.conv("neck.lat4", dn, dn, 1, hw(4), hw(4))
        c.conv("neck.td_smooth4", dn, dn, 3, hw(4), hw(4))
        c.conv("neck.lat5", dn, dn, 1, hw(5), hw(5))
    if use_b3:
        c.conv("neck.proj2", 2 * C, dn, 1, hw(2), hw(2))
        _count_bifusion(c, "neck.bifusion3", dn, hw(3), hw(3))
        c.conv("neck.out5_down", dn, dn, 3, hw(5), hw(5))
        c.conv("neck.out5_proj", dn, dn, 1, hw(5), hw(5))
    if use_b4:
        _count_bifusion(c, "neck.bifusion4", dn, hw(4), hw(4))
    c.conv("neck.pan_down4", dn, dn, 3, hw(4), hw(4))
    c.conv("neck.pan_smooth4", dn, dn, 3, hw(4), hw(4))
    c.conv("neck.pan_down5", dn, dn, 3, hw(5), hw(5))
    c.conv("neck.pan_smooth5", dn, dn, 3, hw(5), hw(5))

    # decoder
    levels = (2, 3, 4, 5) if cfg.emit_f2_tokens else (3, 4, 5)
    tm = 0
    for lvl in levels:
        c.conv(f"decoder.proj{lvl}", dn, dd, 1, hw(lvl), hw(lvl), bn=False)
        c.params_only(f"decoder.level_embed{lvl}", dd)
        tm += hw(lvl) * hw(lvl)
    q = p.n_queries
    c.params_only("decoder.queries", q * dd)
    for i in range(p.n_dec_layers):
        c.ln(f"decoder.layer{i}.ln1", dd)
        c.mha(f"decoder.layer{i}.self_attn", q, q, dd)
        c.ln(f"decoder.layer{i}.ln2", dd)
        c.mha(f"decoder.layer{i}.cross_attn", q, tm, dd)
        c.ln(f"decoder.layer{i}.ln3", dd)
        c.linear(f"decoder.layer{i}.mlp.fc1", q, dd, 4 * dd)
        c.linear(f"decoder.layer{i}.mlp.fc2", q, 4 * dd, dd)
    c.ln("decoder.final_ln", dd)
    c.linear("decoder.class_head", q, dd, cfg.num_classes)
    c.linear("decoder.box_fc1", q, dd, dd)
    c.linear("decoder.box_fc2", q, dd, dd)
    c.linear("decoder.box_fc3", q, dd, 4)
    return rep
