"""Flat binary model checkpoints.

Layout (little-endian):
    bytes 0..3   magic b"SMX1"
    bytes 4..7   uint32 header length H
    bytes 8..8+H UTF-8 JSON header: architecture dict, width, seed, build
                 flags, and an ordered entry list [{name, shape, dtype}]
    remainder    tensor payloads, raw IEEE-754 float64 little-endian, in
                 entry order

Entries cover parameters and BN running statistics in declaration order, so
a loaded model is bit-identical to the saved one.
"""

import json
import struct

import numpy as np

from splitmix.errors import DataFormatError
from splitmix.nn import layers as L
from splitmix.nn.model import build_model

MAGIC = b"SMX1"


def _header(model, seed, flags):
    entries = []
    state = {**model.params(), **model.buffers()}
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f8"})
    bn_estimated = [
        bool(getattr(layer, "stats_estimated", False))
        for _, layer in model.named_layers()
    ]
    return {
        "format": 1,
        "arch": {
            "id": model.arch_id,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "layers": flags["layers"],
        },
        "width": model.width,
        "seed": seed,
        "bn_mode": flags.get("bn_mode", "batch_average"),
        "rescale_init": flags.get("rescale_init", True),
        "rescale_layer": flags.get("rescale_layer", False),
        "dual_bn": flags.get("dual_bn", False),
        "bn_estimated": bn_estimated,
        "entries": entries,
    }


def save_model(path, model, *, arch_layers, seed=0, bn_mode="batch_average",
               rescale_init=True, rescale_layer=False, dual_bn=False):
    """Serialize model parameters and statistics to `path`."""
    flags = {"layers": arch_layers, "bn_mode": bn_mode, "rescale_init": rescale_init,
             "rescale_layer": rescale_layer, "dual_bn": dual_bn}
    header = _header(model, seed, flags)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    state = {**model.params(), **model.buffers()}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in header["entries"]:
            arr = np.ascontiguousarray(state[entry["name"]], dtype="<f8")
            fh.write(arr.tobytes())


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: unreadable header: {exc}") from exc
        model = build_model(
            header["arch"], width=header["width"], seed=header["seed"],
            bn_mode=header["bn_mode"], rescale_init=header["rescale_init"],
            rescale_layer=header["rescale_layer"], init="zeros")
        if header.get("dual_bn"):
            from splitmix.robustness import dualize  # deferred: avoids import cycle
            dualize(model)
        state = {**model.params(), **model.buffers()}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise DataFormatError(f"{path}: truncated payload for {entry['name']}")
            if entry["name"] not in state:
                raise DataFormatError(f"{path}: unknown tensor {entry['name']!r}")
            state[entry["name"]][...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
        for (name, layer), estimated in zip(model.named_layers(), header["bn_estimated"]):
            if isinstance(layer, L.BatchNorm):
                layer.stats_estimated = estimated
            elif hasattr(layer, "bn_clean"):  # dual BN
                layer.bn_clean.stats_estimated = estimated
                layer.bn_noise.stats_estimated = estimated
        extra = fh.read(1)
        if extra:
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return model, header
