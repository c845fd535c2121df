"""Analytic multiply-accumulate counting for the restoration network.

Counts depend only on shapes (never on parameter values) and mirror the
forward pass exactly, including the divisibility padding and the per-step
re-projection of the history frames consumed by the alignment attention.
Elementwise work (norms, gates, residual adds) is not multiply-accumulate
dominated and is excluded, as is conventional.
"""

from dataclasses import dataclass


def conv_macs(h_out, w_out, c_in, c_out, kh, kw, groups=1):
    """MACs of one conv layer: one (c_in/groups * kh * kw) dot per output."""
    return h_out * w_out * (c_in // groups) * c_out * kh * kw


def matmul_macs(rows, inner, cols):
    return rows * inner * cols


def _pad_up(x, m):
    return ((x + m - 1) // m) * m


@dataclass
class LayerMacs:
    name: str
    kind: str  # conv | matmul | attention
    macs: int


class MacReport:
    """Per-layer breakdown; total always equals the sum of the parts."""

    def __init__(self, resolution, layers):
        self.resolution = tuple(resolution)
        self.layers = list(layers)

    @property
    def total(self):
        return sum(l.macs for l in self.layers)

    @property
    def gmacs(self):
        return self.total / 1e9

    def by_kind(self, kind):
        return sum(l.macs for l in self.layers if l.kind == kind)

    def lines(self):
        h, w = self.resolution
        out = [f"resolution {h}x{w}"]
        out += [f"  {l.macs:>14,d}  {l.kind:<9s} {l.name}" for l in self.layers]
        out.append(f"  {self.total:>14,d}  total ({self.gmacs:.4f} G)")
        return out


def _ffn_macs(name, c, h, w, expansion):
    hidden = c * expansion
    return [
        LayerMacs(f"{name}.expand", "conv", conv_macs(h, w, c, 2 * hidden, 1, 1)),
        LayerMacs(f"{name}.depthwise", "conv",
                  conv_macs(h, w, 2 * hidden, 2 * hidden, 3, 3, groups=2 * hidden)),
        LayerMacs(f"{name}.project", "conv", conv_macs(h, w, hidden, c, 1, 1)),
    ]


def _chm_macs(name, c, h, w, patch, tau):
    hq, wq = _pad_up(h, patch), _pad_up(w, patch)
    n = (hq // patch) * (wq // patch)
    d = c * patch * patch
    hw_pad = hq * wq
    hw = h * w
    proj = hw_pad * c * c      # one channel-mixing matrix on a padded map
    slots = tau + 1
    return [
        LayerMacs(f"{name}.align.proj", "matmul", proj * (1 + 2 * tau + tau)),
        LayerMacs(f"{name}.align.attn", "attention",
                  2 * tau * matmul_macs(n, d, n)),
        LayerMacs(f"{name}.input_transform.proj", "matmul", 4 * proj),
        LayerMacs(f"{name}.input_transform.attn", "attention",
                  2 * matmul_macs(n, d, n)),
        LayerMacs(f"{name}.router.proj", "matmul",
                  hw * c * c * (1 + 2 * slots + 1)),
        LayerMacs(f"{name}.router.attn", "attention",
                  2 * matmul_macs(c, hw, slots * c)),
    ]


def count_macs(config, resolution):
    """Analytic per-frame MACs of the configured model at (h, w) input."""
    h, w = resolution
    s = config.stages
    m = 2 ** (s - 1)
    hp, wp = _pad_up(h, m), _pad_up(w, m)
    layers = [LayerMacs("head", "conv",
                        conv_macs(hp, wp, config.in_channels, config.base_width, 3, 3))]
    for i in range(s - 1):
        c = config.width(i)
        hi, wi = hp >> i, wp >> i
        for b in range(config.enc_blocks):
            layers += _ffn_macs(f"enc{i}.block{b}", c, hi, wi, config.ffn_expansion)
        layers.append(LayerMacs(f"enc{i}.down", "conv",
                                conv_macs(hi // 2, wi // 2, 4 * c, 2 * c, 1, 1)))
    cl = config.width(s - 1)
    hl, wl = hp >> (s - 1), wp >> (s - 1)
    for b in range(config.chm_blocks):
        layers += _chm_macs(f"latent.chm{b}", cl, hl, wl, config.patch[s - 1],
                            config.tau)
    for i in reversed(range(s - 1)):
        c = config.width(i)
        hi, wi = hp >> i, wp >> i
        layers.append(LayerMacs(f"dec{i}.up", "conv",
                                conv_macs(hi // 2, wi // 2, 2 * c, 4 * c, 1, 1)))
        layers.append(LayerMacs(f"dec{i}.skip_merge", "conv",
                                conv_macs(hi, wi, 2 * c, c, 1, 1)))
        for b in range(config.chm_blocks):
            if config.chm_placement == "latent_and_decoder":
                layers += _chm_macs(f"dec{i}.chm{b}", c, hi, wi, config.patch[i],
                                    config.tau)
            else:
                layers += _ffn_macs(f"dec{i}.block{b}", c, hi, wi,
                                    config.ffn_expansion)
    layers.append(LayerMacs("tail", "conv",
                            conv_macs(hp, wp, config.base_width, config.in_channels, 3, 3)))
    return MacReport((h, w), layers)
