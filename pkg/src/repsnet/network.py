"""RepSNet: a shared RepVGG encoder, two RepUpsample decoders and three heads.

Layout for ``num_blocks = n`` and widths ``w_i = base_width * 2**i``:

* encoder block 0 keeps full resolution, blocks 1..n-1 open with a stride-2
  unit, so inputs must be divisible by ``2**(n-1)``;
* each decoder level upsamples by two to ``w_i`` channels, adds the encoder
  output of block ``i`` and mixes with one stride-1 RepVGG unit;
* decoder A feeds the NP (2) and NT (7) 1x1 heads, decoder B the BD (4) head
  followed by a ReLU.

Layers cache what their backward pass needs during ``forward``; call
``backward`` once per forward.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .reparam import (
    RepUpsampleUnit,
    RepVggUnit,
    fuse_repupsample,
    fuse_repvgg,
    repupsample_param_count,
    repvgg_param_count,
)
from .tensor import (
    DTYPE,
    BatchNormParams,
    ConvParams,
    DeconvParams,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    im2col,
    load_checkpoint,
    save_checkpoint,
    tensor_to_text,
    text_to_tensor,
)

BD_BIAS_INIT = 2.0


@dataclass
class RepSNetConfig:
    num_blocks: int = 4
    units_per_block: list = field(default_factory=lambda: [2, 2, 3, 2])
    base_width: int = 16
    class_count: int = 7
    bd_channels: int = 4
    # ablation switches: False trains plain single-branch units
    repvgg: bool = True
    repupsample: bool = True

    def __post_init__(self):
        self.units_per_block = [int(u) for u in self.units_per_block]
        if self.num_blocks < 1 or len(self.units_per_block) != self.num_blocks:
            raise ValueError(f"units_per_block needs {self.num_blocks} entries, got {self.units_per_block}")
        if min(self.units_per_block) < 1:
            raise ValueError("every block needs at least one unit")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.num_blocks)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_blocks - 1)

    def to_text(self) -> str:
        return "\n".join([
            f"num_blocks={self.num_blocks}",
            "units_per_block=" + ",".join(str(u) for u in self.units_per_block),
            f"base_width={self.base_width}",
            f"class_count={self.class_count}",
            f"bd_channels={self.bd_channels}",
            f"repvgg={int(self.repvgg)}",
            f"repupsample={int(self.repupsample)}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RepSNetConfig":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        return cls(
            num_blocks=int(kv["num_blocks"]),
            units_per_block=[int(u) for u in kv["units_per_block"].split(",")],
            base_width=int(kv["base_width"]),
            class_count=int(kv.get("class_count", 7)),
            bd_channels=int(kv.get("bd_channels", 4)),
            repvgg=bool(int(kv.get("repvgg", 1))),
            repupsample=bool(int(kv.get("repupsample", 1))),
        )


# ---------------------------------------------------------------------------
# layers


def _bn_entries(prefix, bn: BatchNormParams):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta
    yield f"{prefix}.running_mean", bn.running_mean
    yield f"{prefix}.running_var", bn.running_var
    yield f"{prefix}.tracked", np.array([bn.tracked], dtype=DTYPE)


def _bn_from(entries, prefix) -> BatchNormParams:
    return BatchNormParams(entries[f"{prefix}.gamma"].copy(), entries[f"{prefix}.beta"].copy(),
                           entries[f"{prefix}.running_mean"].copy(),
                           entries[f"{prefix}.running_var"].copy(),
                           tracked=int(entries[f"{prefix}.tracked"][0]))


class RepVggLayer:
    """A RepVGG unit in multi-branch form, or its fused 3x3 conv."""

    def __init__(self, unit: RepVggUnit | None = None, fused: ConvParams | None = None):
        if (unit is None) == (fused is None):
            raise ValueError("give exactly one of unit / fused")
        self.unit = unit
        self.fused = fused
        self.grads = {}
        self._cache = None

    @property
    def stride(self):
        return (self.fused or self.unit.conv3).stride

    def params(self) -> dict:
        if self.fused is not None:
            return {"weight": self.fused.weight, "bias": self.fused.bias}
        u = self.unit
        out = {"conv3.weight": u.conv3.weight, "bn3.gamma": u.bn3.gamma, "bn3.beta": u.bn3.beta}
        if u.conv1 is not None:
            out.update({"conv1.weight": u.conv1.weight, "bn1.gamma": u.bn1.gamma, "bn1.beta": u.bn1.beta})
        if u.bn_id is not None:
            out.update({"bn_id.gamma": u.bn_id.gamma, "bn_id.beta": u.bn_id.beta})
        return out

    def forward(self, x, training=False):
        if self.fused is not None:
            pre = conv2d_forward(x, self.fused)
            self._cache = (x, None, None, None, pre, training)
            return np.maximum(pre, 0)
        u = self.unit
        cols = im2col(x, 3, u.stride, 1)
        y3 = conv2d_forward(x, u.conv3, cols)
        pre = batchnorm_forward(y3, u.bn3, training)
        y1 = None
        if u.conv1 is not None:
            # the 1x1 patches are the center taps of the 3x3 patches
            y1 = conv2d_forward(x, u.conv1, cols[:, 4::9])
            pre = pre + batchnorm_forward(y1, u.bn1, training)
        if u.bn_id is not None:
            pre = pre + batchnorm_forward(x, u.bn_id, training)
        self._cache = (x, cols, y3, y1, pre, training)
        return np.maximum(pre, 0)

    def backward(self, grad_out):
        x, cols, y3, y1, pre, training = self._cache
        self._cache = None
        g = grad_out * (pre > 0)
        if self.fused is not None:
            gx, gw, gb = conv2d_backward(x, self.fused, g)
            self.grads = {"weight": gw, "bias": gb}
            return gx
        u = self.unit
        grads = {}
        g3, grads["bn3.gamma"], grads["bn3.beta"] = batchnorm_backward(y3, u.bn3, g, training)
        gx, grads["conv3.weight"], _ = conv2d_backward(x, u.conv3, g3, cols)
        if u.conv1 is not None:
            g1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(y1, u.bn1, g, training)
            gx1, grads["conv1.weight"], _ = conv2d_backward(x, u.conv1, g1, np.ascontiguousarray(cols[:, 4::9]))
            gx += gx1
        if u.bn_id is not None:
            gid, grads["bn_id.gamma"], grads["bn_id.beta"] = batchnorm_backward(x, u.bn_id, g, training)
            gx += gid
        self.grads = grads
        return gx

    def fuse(self) -> "RepVggLayer":
        if self.fused is not None:
            return RepVggLayer(fused=self.fused.copy())
        return RepVggLayer(fused=fuse_repvgg(self.unit))

    def entries(self, prefix):
        if self.fused is not None:
            yield f"{prefix}.weight", self.fused.weight
            yield f"{prefix}.bias", self.fused.bias
            yield f"{prefix}.stride", np.array([self.fused.stride], dtype=DTYPE)
            return
        u = self.unit
        yield f"{prefix}.conv3.weight", u.conv3.weight
        yield f"{prefix}.stride", np.array([u.stride], dtype=DTYPE)
        yield from _bn_entries(f"{prefix}.bn3", u.bn3)
        if u.conv1 is not None:
            yield f"{prefix}.conv1.weight", u.conv1.weight
            yield from _bn_entries(f"{prefix}.bn1", u.bn1)
        if u.bn_id is not None:
            yield from _bn_entries(f"{prefix}.bn_id", u.bn_id)

    @classmethod
    def from_entries(cls, entries, prefix, fused: bool):
        s = int(entries[f"{prefix}.stride"][0])
        if fused:
            w = entries[f"{prefix}.weight"]
            return cls(fused=ConvParams(w.copy(), entries[f"{prefix}.bias"].copy(), s, 1))
        w3 = entries[f"{prefix}.conv3.weight"]
        out_c = w3.shape[0]
        conv3 = ConvParams(w3.copy(), np.zeros(out_c, DTYPE), s, 1)
        conv1 = bn1 = bn_id = None
        if f"{prefix}.conv1.weight" in entries:
            conv1 = ConvParams(entries[f"{prefix}.conv1.weight"].copy(), np.zeros(out_c, DTYPE), s, 0)
            bn1 = _bn_from(entries, f"{prefix}.bn1")
        if f"{prefix}.bn_id.gamma" in entries:
            bn_id = _bn_from(entries, f"{prefix}.bn_id")
        return cls(unit=RepVggUnit(conv3, _bn_from(entries, f"{prefix}.bn3"), conv1, bn1, bn_id))


class RepUpLayer:
    """A RepUpsample unit in two-branch form, or its fused 3x3 transposed conv."""

    def __init__(self, unit: RepUpsampleUnit | None = None, fused: DeconvParams | None = None):
        if (unit is None) == (fused is None):
            raise ValueError("give exactly one of unit / fused")
        self.unit = unit
        self.fused = fused
        self.grads = {}
        self._cache = None

    def params(self) -> dict:
        if self.fused is not None:
            return {"weight": self.fused.weight, "bias": self.fused.bias}
        u = self.unit
        out = {"deconv3.weight": u.deconv3.weight, "bn3.gamma": u.bn3.gamma, "bn3.beta": u.bn3.beta}
        if u.deconv1 is not None:
            out.update({"deconv1.weight": u.deconv1.weight, "bn1.gamma": u.bn1.gamma, "bn1.beta": u.bn1.beta})
        return out

    def forward(self, x, training=False):
        if self.fused is not None:
            pre = deconv2d_forward(x, self.fused)
            self._cache = (x, None, None, pre, training)
            return np.maximum(pre, 0)
        u = self.unit
        y3 = deconv2d_forward(x, u.deconv3)
        pre = batchnorm_forward(y3, u.bn3, training)
        y1 = None
        if u.deconv1 is not None:
            y1 = deconv2d_forward(x, u.deconv1)
            pre = pre + batchnorm_forward(y1, u.bn1, training)
        self._cache = (x, y3, y1, pre, training)
        return np.maximum(pre, 0)

    def backward(self, grad_out):
        x, y3, y1, pre, training = self._cache
        self._cache = None
        g = grad_out * (pre > 0)
        if self.fused is not None:
            gx, gw, gb = deconv2d_backward(x, self.fused, g)
            self.grads = {"weight": gw, "bias": gb}
            return gx
        u = self.unit
        grads = {}
        g3, grads["bn3.gamma"], grads["bn3.beta"] = batchnorm_backward(y3, u.bn3, g, training)
        gx, grads["deconv3.weight"], _ = deconv2d_backward(x, u.deconv3, g3)
        if u.deconv1 is not None:
            g1, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(y1, u.bn1, g, training)
            gx1, grads["deconv1.weight"], _ = deconv2d_backward(x, u.deconv1, g1)
            gx += gx1
        self.grads = grads
        return gx

    def fuse(self) -> "RepUpLayer":
        if self.fused is not None:
            return RepUpLayer(fused=self.fused.copy())
        return RepUpLayer(fused=fuse_repupsample(self.unit))

    def entries(self, prefix):
        if self.fused is not None:
            yield f"{prefix}.weight", self.fused.weight
            yield f"{prefix}.bias", self.fused.bias
            return
        u = self.unit
        yield f"{prefix}.deconv3.weight", u.deconv3.weight
        yield from _bn_entries(f"{prefix}.bn3", u.bn3)
        if u.deconv1 is not None:
            yield f"{prefix}.deconv1.weight", u.deconv1.weight
            yield from _bn_entries(f"{prefix}.bn1", u.bn1)

    @classmethod
    def from_entries(cls, entries, prefix, fused: bool):
        if fused:
            return cls(fused=DeconvParams(entries[f"{prefix}.weight"].copy(),
                                          entries[f"{prefix}.bias"].copy(), 2, 1, 1))
        w3 = entries[f"{prefix}.deconv3.weight"]
        out_c = w3.shape[1]
        d3 = DeconvParams(w3.copy(), np.zeros(out_c, DTYPE), 2, 1, 1)
        d1 = bn1 = None
        if f"{prefix}.deconv1.weight" in entries:
            d1 = DeconvParams(entries[f"{prefix}.deconv1.weight"].copy(), np.zeros(out_c, DTYPE), 2, 0, 1)
            bn1 = _bn_from(entries, f"{prefix}.bn1")
        return cls(unit=RepUpsampleUnit(d3, _bn_from(entries, f"{prefix}.bn3"), d1, bn1))


class HeadLayer:
    """1x1 conv with bias, optionally followed by a ReLU."""

    def __init__(self, conv: ConvParams, relu: bool = False):
        self.conv = conv
        self.relu = relu
        self.grads = {}
        self._cache = None

    def params(self) -> dict:
        return {"weight": self.conv.weight, "bias": self.conv.bias}

    def forward(self, x, training=False):
        y = conv2d_forward(x, self.conv)
        self._cache = (x, y)
        return np.maximum(y, 0) if self.relu else y

    def backward(self, grad_out):
        x, y = self._cache
        self._cache = None
        if self.relu:
            grad_out = grad_out * (y > 0)
        gx, gw, gb = conv2d_backward(x, self.conv, grad_out)
        self.grads = {"weight": gw, "bias": gb}
        return gx

    def entries(self, prefix):
        yield f"{prefix}.weight", self.conv.weight
        yield f"{prefix}.bias", self.conv.bias

    @classmethod
    def from_entries(cls, entries, prefix, relu=False):
        return cls(ConvParams(entries[f"{prefix}.weight"].copy(), entries[f"{prefix}.bias"].copy(), 1, 0), relu)


# ---------------------------------------------------------------------------
# network


class RepSNet:
    def __init__(self, config: RepSNetConfig, encoder, decoders, heads, fused: bool):
        self.config = config
        self.encoder = encoder  # list of lists of RepVggLayer
        self.decoders = decoders  # {"a": [(up, mix), ...], "b": [...]} ordered deep -> shallow
        self.heads = heads  # {"np", "nt", "bd"}
        self.fused = fused

    @classmethod
    def create(cls, config: RepSNetConfig | None = None, seed=0) -> "RepSNet":
        config = config or RepSNetConfig()
        rng = np.random.default_rng(seed)
        widths = config.widths
        multi = config.repvgg
        encoder = []
        in_c = 3
        for i, count in enumerate(config.units_per_block):
            stride = 1 if i == 0 else 2
            block = [RepVggLayer(RepVggUnit.create(in_c, widths[i], stride, rng, with_1x1=multi))]
            for _ in range(count - 1):
                block.append(RepVggLayer(RepVggUnit.create(widths[i], widths[i], 1, rng, with_1x1=multi)))
            encoder.append(block)
            in_c = widths[i]
        decoders = {}
        for name in ("a", "b"):
            levels = []
            for i in range(config.num_blocks - 2, -1, -1):
                up = RepUpLayer(RepUpsampleUnit.create(widths[i + 1], widths[i], rng, with_1x1=config.repupsample))
                mix = RepVggLayer(RepVggUnit.create(widths[i], widths[i], 1, rng, with_1x1=multi))
                levels.append((up, mix))
            decoders[name] = levels
        w0 = widths[0]

        def head(out_c, bias=0.0, relu=False):
            w = rng.normal(0, np.sqrt(1.0 / w0), (out_c, w0, 1, 1)).astype(DTYPE)
            return HeadLayer(ConvParams(w, np.full(out_c, bias, DTYPE), 1, 0), relu)

        heads = {"np": head(2), "nt": head(config.class_count),
                 "bd": head(config.bd_channels, BD_BIAS_INIT, relu=True)}
        return cls(config, encoder, decoders, heads, fused=False)

    # -- traversal ---------------------------------------------------------

    def named_layers(self):
        for i, block in enumerate(self.encoder):
            for j, layer in enumerate(block):
                yield f"enc.{i}.{j}", layer
        for name, levels in self.decoders.items():
            for k, (up, mix) in enumerate(levels):
                yield f"dec_{name}.{k}.up", up
                yield f"dec_{name}.{k}.mix", mix
        for name, layer in self.heads.items():
            yield f"head.{name}", layer

    def params(self) -> dict:
        """Trainable arrays by name (live references, updated in place)."""
        return {f"{p}.{k}": v for p, layer in self.named_layers() for k, v in layer.params().items()}

    def grads(self) -> dict:
        return {f"{p}.{k}": v for p, layer in self.named_layers() for k, v in layer.grads.items()}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params().values()))

    def batchnorms(self):
        for _, layer in self.named_layers():
            unit = getattr(layer, "unit", None)
            if unit is not None:
                yield from unit.batchnorms()

    # -- passes ------------------------------------------------------------

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, H, W) image batch, got {x.shape}")
        d = self.config.divisor
        h, w = x.shape[2:]
        if h % d or w % d:
            ph, pw = (-h) % d, (-w) % d
            raise ShapeError(f"image size {h}x{w} is not divisible by {d}; pad by {ph} rows and "
                             f"{pw} columns (to {h + ph}x{w + pw})")

    def forward(self, x: np.ndarray, training: bool = False):
        """Returns ``(np_logits, nt_logits, bd)``."""
        self.check_input(x)
        if training and self.fused:
            raise RuntimeError("a fused network cannot be trained")
        feats = []
        h = x
        for block in self.encoder:
            for layer in block:
                h = layer.forward(h, training)
            feats.append(h)
        tops = {}
        for name, levels in self.decoders.items():
            h = feats[-1]
            for k, (up, mix) in enumerate(levels):
                skip = feats[len(feats) - 2 - k]
                h = mix.forward(up.forward(h, training) + skip, training)
            tops[name] = h
        return (self.heads["np"].forward(tops["a"]), self.heads["nt"].forward(tops["a"]),
                self.heads["bd"].forward(tops["b"]))

    def backward(self, g_np, g_nt, g_bd) -> dict:
        """Backpropagate output gradients of the last forward; returns the
        parameter gradients keyed like :meth:`params`."""
        tops = {"a": self.heads["np"].backward(g_np) + self.heads["nt"].backward(g_nt),
                "b": self.heads["bd"].backward(g_bd)}
        skip_grads = [0.0] * len(self.encoder)
        for name, levels in self.decoders.items():
            g = tops[name]
            # walk the levels from shallow back to deep
            for k in range(len(levels) - 1, -1, -1):
                up, mix = levels[k]
                g = mix.backward(g)
                skip_grads[len(self.encoder) - 2 - k] = skip_grads[len(self.encoder) - 2 - k] + g
                g = up.backward(g)
            skip_grads[-1] = skip_grads[-1] + g
        g = None
        for i in range(len(self.encoder) - 1, -1, -1):
            g = skip_grads[i] if g is None else g + skip_grads[i]
            for layer in reversed(self.encoder[i]):
                g = layer.backward(g)
        return self.grads()

    # -- fusion ------------------------------------------------------------

    def reparameterize(self) -> "RepSNet":
        return reparameterize(self)

    # -- persistence -------------------------------------------------------

    def entries(self):
        text = self.config.to_text() + f"mode={'fused' if self.fused else 'train'}\n"
        yield "config", text_to_tensor(text)
        for prefix, layer in self.named_layers():
            yield from layer.entries(prefix)

    def save(self, path):
        save_checkpoint(path, self.entries())

    @classmethod
    def load(cls, path) -> "RepSNet":
        return cls.from_entries(load_checkpoint(path))

    @classmethod
    def from_entries(cls, entries) -> "RepSNet":
        if "config" not in entries:
            raise ValueError("checkpoint has no config entry")
        text = tensor_to_text(entries["config"])
        config = RepSNetConfig.from_text(text)
        fused = "mode=fused" in text.split()
        encoder = [[RepVggLayer.from_entries(entries, f"enc.{i}.{j}", fused) for j in range(count)]
                   for i, count in enumerate(config.units_per_block)]
        decoders = {}
        for name in ("a", "b"):
            decoders[name] = [(RepUpLayer.from_entries(entries, f"dec_{name}.{k}.up", fused),
                               RepVggLayer.from_entries(entries, f"dec_{name}.{k}.mix", fused))
                              for k in range(config.num_blocks - 1)]
        heads = {"np": HeadLayer.from_entries(entries, "head.np"),
                 "nt": HeadLayer.from_entries(entries, "head.nt"),
                 "bd": HeadLayer.from_entries(entries, "head.bd", relu=True)}
        return cls(config, encoder, decoders, heads, fused)


def reparameterize(net: RepSNet) -> RepSNet:
    """Fused copy of ``net``; a fused network comes back as an identical copy.

    Every batch norm must have seen at least one training batch, otherwise
    the folded statistics would be the untouched initial values.
    """
    if not net.fused:
        for bn in net.batchnorms():
            if bn.tracked == 0:
                raise ValueError("batch-norm running statistics were never populated; "
                                 "train the network before fusing")
    encoder = [[layer.fuse() for layer in block] for block in net.encoder]
    decoders = {name: [(up.fuse(), mix.fuse()) for up, mix in levels] for name, levels in net.decoders.items()}
    heads = {k: copy.deepcopy(v) for k, v in net.heads.items()}
    return RepSNet(copy.deepcopy(net.config), encoder, decoders, heads, fused=True)


# ---------------------------------------------------------------------------
# closed-form size and cost


def _unit_shapes(config: RepSNetConfig):
    """(kind, in_c, out_c, stride, out_scale) for every unit; out_scale is
    the output resolution divisor."""
    w = config.widths
    in_c = 3
    for i, count in enumerate(config.units_per_block):
        for j in range(count):
            stride = 2 if (i > 0 and j == 0) else 1
            yield "conv", in_c, w[i], stride, 2 ** i
            in_c = w[i]
    for _ in range(2):
        for i in range(config.num_blocks - 2, -1, -1):
            yield "deconv", w[i + 1], w[i], 2, 2 ** i
            yield "conv", w[i], w[i], 1, 2 ** i


def _head_params(config):
    w0 = config.base_width
    return sum(w0 * c + c for c in (2, config.class_count, config.bd_channels))


def analytic_param_count(config: RepSNetConfig, fused: bool) -> int:
    n = _head_params(config)
    for kind, ci, co, s, _ in _unit_shapes(config):
        if kind == "conv":
            n += repvgg_param_count(ci, co, s, fused=fused, with_1x1=config.repvgg,
                                    with_identity=config.repvgg)
        else:
            n += repupsample_param_count(ci, co, fused=fused, with_1x1=config.repupsample)
    return n


def analytic_flops(config: RepSNetConfig, height: int, width: int, fused: bool) -> int:
    """Floating-point operations of one forward pass on an HxW image.

    A multiply-add counts as two operations; bias, batch-norm affine (two per
    element), branch sums (one per element) and ReLU (one per element) are
    included. Transposed convolutions count every scattered tap.
    """
    total = 0
    for kind, ci, co, s, scale in _unit_shapes(config):
        out_px = (height // scale) * (width // scale)
        # the 3x3 kernel taps: per output pixel for convs, per input pixel
        # (a quarter of the output) for stride-2 transposed convs
        taps_px = out_px if kind == "conv" else out_px // 4
        total += 2 * 9 * ci * co * taps_px
        if fused:
            total += co * out_px  # bias
            branches = 1
        else:
            total += 2 * co * out_px  # batch-norm affine
            branches = 1
            if config.repvgg if kind == "conv" else config.repupsample:
                total += 2 * ci * co * taps_px + 2 * co * out_px
                branches += 1
            if kind == "conv" and config.repvgg and ci == co and s == 1:
                total += 2 * co * out_px
                branches += 1
        total += (branches - 1) * co * out_px + co * out_px  # sums and ReLU
    px = height * width
    w0 = config.base_width
    for c in (2, config.class_count, config.bd_channels):
        total += 2 * w0 * c * px + c * px
    total += config.bd_channels * px  # BD ReLU
    # skip additions
    for i in range(config.num_blocks - 1):
        total += 2 * config.widths[i] * (height // 2 ** i) * (width // 2 ** i)
    return int(total)
