"""Model container and declarative architecture builder.

An architecture is a plain dict: {"id", "input_shape", "num_classes",
"layers": [{"kind": ...}, ...]}.  Channel counts in the spec describe the
full-width (x1) network; `build_model` scales every hidden width by the
requested ratio.  The first weight layer keeps its raw input channels and the
final dense layer keeps the class count — only hidden widths are sliced.
"""

import numpy as np

from splitmix.errors import ConfigError, ShapeError
from splitmix.nn import layers as L
from splitmix import rngs


class Model:
    """Ordered layer list with sequential forward/backward."""

    def __init__(self, net_layers, arch_id, input_shape, num_classes, width=1.0):
        self.layers = list(net_layers)
        self.arch_id = arch_id
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.width = float(width)

    def forward(self, x, ctx=L.EVAL):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"model {self.arch_id!r} expects input {self.input_shape}, "
                f"got {tuple(x.shape[1:])}")
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield f"layer{i}", layer

    def params(self):
        out = {}
        for name, layer in self.named_layers():
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def grads(self):
        out = {}
        for name, layer in self.named_layers():
            for pname, arr in layer.grads().items():
                out[f"{name}.{pname}"] = arr
        return out

    def buffers(self):
        out = {}
        for name, layer in self.named_layers():
            for bname, arr in layer.buffers().items():
                out[f"{name}.{bname}"] = arr
        return out

    def state(self):
        """Copy of all params and buffers, keyed by qualified name."""
        st = {k: v.copy() for k, v in self.params().items()}
        st.update({k: v.copy() for k, v in self.buffers().items()})
        return st

    def shared_state_keys(self):
        """State entries the server aggregates: all params, plus running
        statistics of layers that share them (tracked mode only)."""
        keys = list(self.params().keys())
        for name, layer in self.named_layers():
            shared = getattr(layer, "shared_buffers", None)
            if shared is not None:
                keys.extend(f"{name}.{b}" for b in shared())
        return keys

    def load_state(self, state):
        own = {**self.params(), **self.buffers()}
        for key, arr in state.items():
            if key not in own:
                raise KeyError(f"unknown state entry {key!r}")
            if own[key].shape != arr.shape:
                raise ShapeError(f"state {key!r}: shape {arr.shape} != {own[key].shape}")
            own[key][...] = arr

    def zero_like_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}


def _bn_layers(model):
    for _, layer in model.named_layers():
        if isinstance(layer, L.BatchNorm):
            yield layer
        elif hasattr(layer, "bn_clean"):  # dual BN: estimate the clean branch
            yield layer.bn_clean


def post_average_bn(model, x, passes=20, batch_size=64):
    """Replace minibatch BN statistics with aggregate ones over the data.

    Runs `passes` forward sweeps over `x` accumulating exact count/sum/sumsq
    per BN layer, then installs the aggregate mean/var as the evaluation
    statistics.  Weights are untouched.  Layers in tracked modes are left
    alone; batch_average layers are promoted to post_average.
    """
    if len(x) == 0:
        raise ValueError("cannot re-estimate BN statistics on an empty dataset")
    targets = [bn for bn in _bn_layers(model)
               if bn.mode in ("batch_average", "post_average")]
    if not targets:
        raise ValueError("model has no batch-statistics BN layers to re-estimate")
    for bn in targets:
        bn.mode = "post_average"
        bn.stats_estimated = False
        bn.begin_stats_estimation()
    ctx = L.Context(training=False, bn_branch="clean", accumulate_stats=True)
    for _ in range(max(1, int(passes))):
        for start in range(0, len(x), batch_size):
            model.forward(x[start:start + batch_size], ctx)
    for bn in targets:
        bn.finish_stats_estimation()
    return model


# ---------------------------------------------------------------------------
# architecture presets

ARCH_PRESETS = {
    # 28x28 RGB digit classifier: 3 conv blocks + 3 fully connected
    "digits_cnn": {
        "id": "digits_cnn",
        "input_shape": [3, 28, 28],
        "num_classes": 10,
        "layers": [
            {"kind": "conv", "out": 64, "kernel": 5, "stride": 1, "pad": 2},
            {"kind": "bn"}, {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "conv", "out": 64, "kernel": 5, "stride": 1, "pad": 2},
            {"kind": "bn"}, {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "conv", "out": 128, "kernel": 5, "stride": 1, "pad": 2},
            {"kind": "bn"}, {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "out": 2048}, {"kind": "bn"}, {"kind": "relu"},
            {"kind": "dense", "out": 512}, {"kind": "bn"}, {"kind": "relu"},
            {"kind": "dense", "out": 10},
        ],
    },
    # small conv net for desk-scale synthetic images (1 x 8 x 8)
    "desk_cnn": {
        "id": "desk_cnn",
        "input_shape": [1, 8, 8],
        "num_classes": 8,
        "layers": [
            {"kind": "conv", "out": 16, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "bn"}, {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "conv", "out": 32, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "bn"}, {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "flatten"},
            {"kind": "dense", "out": 8},
        ],
    },
    # two-layer MLP for flat-feature toy tasks
    "toy_mlp": {
        "id": "toy_mlp",
        "input_shape": [8],
        "num_classes": 2,
        "layers": [
            {"kind": "dense", "out": 16}, {"kind": "bn"}, {"kind": "relu"},
            {"kind": "dense", "out": 2},
        ],
    },
}


def resolve_arch(spec):
    """Expand a preset reference or validate an explicit architecture dict."""
    if isinstance(spec, str):
        if spec not in ARCH_PRESETS:
            raise ConfigError(f"architecture: unknown preset {spec!r}")
        return ARCH_PRESETS[spec]
    if "preset" in spec:
        base = dict(resolve_arch(spec["preset"]))
        for key in ("input_shape", "num_classes"):
            if key in spec:
                base[key] = spec[key]
        return base
    for key in ("id", "input_shape", "num_classes", "layers"):
        if key not in spec:
            raise ConfigError(f"architecture.{key}: missing")
    return spec


def _scaled(n_full, width, where):
    scaled = n_full * width
    rounded = round(scaled)
    if abs(scaled - rounded) > 1e-9 or rounded < 1:
        raise ConfigError(
            f"{where}: width {width} times {n_full} channels is not a positive integer")
    return int(rounded)


def build_model(arch, *, width=1.0, seed=0, rng=None, bn_mode="batch_average",
                rescale_init=True, rescale_layer=False, init="kaiming"):
    """Instantiate a (possibly narrow) model from a full-width architecture.

    rescale_init: draw weights with the full-width fan-in, not the slice's.
    rescale_layer: multiply conv/dense outputs by 1/width (off by default;
        it interacts badly with tracked running statistics).
    init: "kaiming" or "zeros" (zeros is handy for counting-only models).
    """
    arch = resolve_arch(arch)
    if not (0.0 < width <= 1.0):
        raise ConfigError(f"architecture: width {width} outside (0, 1]")
    if rng is None and init == "kaiming":
        rng = rngs.rng_for(seed, rngs.INIT)
    elif init != "kaiming":
        rng = None
    out_scale = (1.0 / width) if rescale_layer else 1.0

    dense_idxs = [i for i, l in enumerate(arch["layers"]) if l["kind"] == "dense"]
    if not dense_idxs:
        raise ConfigError("architecture.layers: needs a final dense classifier")
    classifier_idx = dense_idxs[-1]

    # walk the scaled and full-width shapes in parallel; rescaled init uses
    # the full-width fan-in while the layer itself gets the scaled dims
    shape = tuple(arch["input_shape"])
    full_shape = tuple(arch["input_shape"])
    built = []
    for i, ldef in enumerate(arch["layers"]):
        kind = ldef["kind"]
        where = f"architecture.layers[{i}]"
        if kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"{where}: conv needs (C,H,W) input, have {shape}")
            out = _scaled(ldef["out"], width, where)
            k = ldef.get("kernel", 3)
            layer = L.Conv2d(shape[0], out, k, ldef.get("stride", 1), ldef.get("pad", 0),
                             full_fan_in=(full_shape[0] * k * k) if rescale_init else None,
                             rng=rng, out_scale=out_scale)
            shape = layer.out_shape(shape)
            full_shape = (ldef["out"], shape[1], shape[2])
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{where}: dense needs flat input, have {shape}")
            if i == classifier_idx:
                out = int(ldef["out"])
                if out != arch["num_classes"]:
                    raise ConfigError(
                        f"{where}: classifier out {out} != num_classes {arch['num_classes']}")
                scale = 1.0  # class logits are never rescaled
            else:
                out = _scaled(ldef["out"], width, where)
                scale = out_scale
            layer = L.Dense(shape[0], out,
                            full_fan_in=full_shape[0] if rescale_init else None,
                            rng=rng, out_scale=scale)
            shape = (out,)
            full_shape = (int(ldef["out"]),)
        elif kind == "bn":
            layer = L.BatchNorm(shape[0], mode=ldef.get("mode", bn_mode))
        elif kind == "relu":
            layer = L.ReLU()
        elif kind == "maxpool":
            layer = L.MaxPool2d(ldef.get("kernel", 2), ldef.get("stride"))
            shape = layer.out_shape(shape)
            full_shape = (full_shape[0], shape[1], shape[2])
        elif kind == "flatten":
            layer = L.Flatten()
            full_shape = (int(np.prod(full_shape)),)
            shape = layer.out_shape(shape)
        else:
            raise ConfigError(f"{where}: unknown layer kind {kind!r}")
        built.append(layer)

    if len(shape) != 1 or shape[0] != arch["num_classes"]:
        raise ConfigError(
            f"architecture: forward output shape {shape} != ({arch['num_classes']},)")
    return Model(built, arch["id"], arch["input_shape"], arch["num_classes"], width)
