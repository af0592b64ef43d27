"""GLU network producing surrogate weights, and its ``.ssma`` tensor archive.

The network maps the log-magnitude spectrogram of one source to a positive
weight map of the same shape.  Frequency bins are the convolution channels
and every convolution runs along time with kernel 3 and "same" padding::

    log(|Y| + 1e-6) -> GLU(F -> H) -> GLU(H -> H) -> dropout -> GLU(H -> H)
        -> transposed conv (H -> F) -> softplus -> + 1e-6

A GLU block is ``bn(conv_lin(x)) * sigmoid(bn(conv_gate(x)))``.

Archive layout (all integers little-endian)::

    b"SSMA" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header is ``{"n_bins", "hidden", "n_params", "tensors": [{"name",
"dtype": "f64", "shape"}, ...]}`` and the payload holds the tensors as
contiguous float64 in header order.
"""
import json
import struct

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

WEIGHT_FLOOR = 1e-6
LOG_EPS = 1e-6
MAGIC = b"SSMA"
VERSION = 1


class ShapeMismatch(ValueError):
    pass


class BadMagic(ValueError):
    pass


class VersionUnsupported(ValueError):
    pass


class TruncatedPayload(ValueError):
    pass


class GluBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.c_in = c_in
        self.lin = nn.Conv1d(c_in, c_out, 3, padding=1, dtype=torch.float64)
        self.gate = nn.Conv1d(c_in, c_out, 3, padding=1, dtype=torch.float64)
        self.lin_norm = nn.BatchNorm1d(c_out, dtype=torch.float64)
        self.gate_norm = nn.BatchNorm1d(c_out, dtype=torch.float64)

    def forward(self, x):
        """x is (batch, c_in, frames)."""
        if x.shape[-2] != self.c_in:
            raise ShapeMismatch(f"block expects {self.c_in} channels, got {x.shape[-2]}")
        return self.lin_norm(self.lin(x)) * torch.sigmoid(self.gate_norm(self.gate(x)))


class GluNet(nn.Module):
    """Surrogate weight network.

    Parameters
    ----------
    n_bins : int
        Number of STFT frequency bins F (frame_size // 2 + 1).
    hidden : int
        Channel width of the GLU blocks (128 in the full-size model).
    dropout : float
        Dropout rate between the second and third block.
    """

    def __init__(self, n_bins, hidden=128, dropout=0.5):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.n_bins = n_bins
        self.hidden = hidden
        self.dropout_rate = float(dropout)
        self.block1 = GluBlock(n_bins, hidden)
        self.block2 = GluBlock(hidden, hidden)
        self.block3 = GluBlock(hidden, hidden)
        self.deconv = nn.ConvTranspose1d(hidden, n_bins, 3, padding=1, dtype=torch.float64)

    def forward(self, Y, rng=None):
        """Weights for complex spectrograms ``Y`` of shape (F, N) or (B, F, N).

        In training mode, batch normalization uses the statistics of the
        batch and dropout draws its mask from ``rng`` (a ``torch.Generator``).
        """
        squeeze = Y.dim() == 2
        if squeeze:
            Y = Y[None]
        if Y.shape[-2] != self.n_bins:
            raise ShapeMismatch(f"network expects {self.n_bins} bins, got {Y.shape[-2]}")
        h = torch.log(Y.abs() + LOG_EPS)
        h = self.block1(h)
        h = self.block2(h)
        if self.training and self.dropout_rate > 0:
            keep = torch.rand(h.shape, generator=rng, dtype=h.dtype) >= self.dropout_rate
            h = h * keep / (1.0 - self.dropout_rate)
        h = self.block3(h)
        out = F.softplus(self.deconv(h)) + WEIGHT_FLOOR
        return out[0] if squeeze else out

    def n_params(self):
        return sum(t.numel() for t in named_tensors(self).values())


def init_glu(n_bins, hidden=128, dropout=0.5, seed=0):
    """Randomly initialized network, reproducible from ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return GluNet(n_bins, hidden, dropout)


def glu_forward(net, Y, training=False, rng=None):
    net.train(training)
    return net(Y, rng=rng)


# archive names -> attribute paths inside GluNet
_BLOCK_FIELDS = {
    "lin_conv": "lin.weight",
    "lin_bias": "lin.bias",
    "gate_conv": "gate.weight",
    "gate_bias": "gate.bias",
    "lin_norm.mean": "lin_norm.running_mean",
    "lin_norm.var": "lin_norm.running_var",
    "lin_norm.scale": "lin_norm.weight",
    "lin_norm.shift": "lin_norm.bias",
    "gate_norm.mean": "gate_norm.running_mean",
    "gate_norm.var": "gate_norm.running_var",
    "gate_norm.scale": "gate_norm.weight",
    "gate_norm.shift": "gate_norm.bias",
}


def _name_map():
    names = {}
    for blk in ("block1", "block2", "block3"):
        for short, attr in _BLOCK_FIELDS.items():
            names[f"{blk}.{short}"] = f"{blk}.{attr}"
    names["deconv.weight"] = "deconv.weight"
    names["deconv.bias"] = "deconv.bias"
    return names


def named_tensors(net):
    """All archived tensors (trainable parameters and running statistics) by archive name."""
    state = dict(net.named_parameters())
    state.update(net.named_buffers())
    return {name: state[attr] for name, attr in _name_map().items()}


def expected_shapes(n_bins, hidden):
    shapes = {}
    for blk, c_in in (("block1", n_bins), ("block2", hidden), ("block3", hidden)):
        for short in _BLOCK_FIELDS:
            shapes[f"{blk}.{short}"] = [hidden, c_in, 3] if short.endswith("_conv") else [hidden]
    shapes["deconv.weight"] = [hidden, n_bins, 3]
    shapes["deconv.bias"] = [n_bins]
    shapes["dropout_rate"] = []
    return shapes


def save_params(net) -> bytes:
    tensors = {k: v.detach() for k, v in named_tensors(net).items()}
    tensors["dropout_rate"] = torch.tensor(net.dropout_rate, dtype=torch.float64)
    header = {
        "n_bins": net.n_bins,
        "hidden": net.hidden,
        "n_params": net.n_params(),
        "tensors": [
            {"name": k, "dtype": "f64", "shape": list(v.shape)} for k, v in tensors.items()
        ],
    }
    head = json.dumps(header, separators=(",", ":")).encode()
    payload = b"".join(
        np.ascontiguousarray(v.numpy(), dtype="<f8").tobytes() for v in tensors.values()
    )
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload


def load_params(data: bytes, n_bins=None) -> GluNet:
    """Rebuild a network from archive bytes, validating every shape.

    ``n_bins`` optionally pins the expected number of frequency bins.
    """
    if len(data) < 12:
        raise TruncatedPayload("archive shorter than its fixed preamble")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionUnsupported(f"archive version {version}")
    if len(data) < 12 + hlen:
        raise TruncatedPayload("archive header truncated")
    header = json.loads(data[12 : 12 + hlen].decode())
    nb, hidden = int(header["n_bins"]), int(header["hidden"])
    if n_bins is not None and nb != n_bins:
        raise ShapeMismatch(f"archive is for {nb} bins, expected {n_bins}")
    want = expected_shapes(nb, hidden)
    entries = header["tensors"]
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in archive")
    if set(names) != set(want):
        raise ShapeMismatch("archive tensor names do not match the architecture")
    for e in entries:
        if e["dtype"] != "f64":
            raise ValueError(f"unsupported dtype {e['dtype']!r}")
        if list(e["shape"]) != want[e["name"]]:
            raise ShapeMismatch(f"{e['name']}: shape {e['shape']} != {want[e['name']]}")
    payload = data[12 + hlen :]
    needed = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if len(payload) < needed:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header needs {needed}")
    if len(payload) > needed:
        raise ValueError("trailing bytes after payload")

    values = {}
    offset = 0
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(e["shape"])
        values[e["name"]] = torch.from_numpy(arr.astype(np.float64))
        offset += 8 * count
    if not all(bool(torch.isfinite(v).all()) for v in values.values()):
        raise ValueError("archive contains non-finite values")

    net = GluNet(nb, hidden, float(values.pop("dropout_rate")))
    with torch.no_grad():
        for name, target in named_tensors(net).items():
            target.copy_(values[name])
    for blk in (net.block1, net.block2, net.block3):
        for bn in (blk.lin_norm, blk.gate_norm):
            if bool((bn.running_var <= 0).any()):
                raise ValueError("normalization variances must be positive")
    net.eval()
    return net


def save_archive(path, net):
    with open(path, "wb") as fh:
        fh.write(save_params(net))


def load_archive(path, n_bins=None):
    with open(path, "rb") as fh:
        return load_params(fh.read(), n_bins=n_bins)
