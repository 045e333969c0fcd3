"""A small per-pixel classifier with hand-written forward and backward.

A stack of 3x3 convolutions (padding 1, rectifier) followed by a 1x1
projection to class logits, so any (H, W) input produces (C, H, W)
logits. Everything is float64 and deterministic given the init seed.

Each convolution is evaluated as a single matrix product over patch
columns. Activations travel in channel-major (C, B, H, W) layout so
column extraction is a plain strided copy, never a transpose; large
intermediate buffers are kept per layer and reused across calls.
Backward differentiates the most recent forward that had train=True.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import FormatError


class _Conv3x3:
    """3x3 convolution with padding 1 and a rectifier on the output.

    Weights are stored patch-flat as (cout, cin * 9); the column matrix
    row order is channel-major then tap-major to match.
    """

    def __init__(self, cin, cout, rng):
        bound = 1.0 / np.sqrt(cin * 9)
        self.w = rng.uniform(-bound, bound, size=(cout, cin * 9))
        self.b = rng.uniform(-bound, bound, size=cout)
        self.cin = cin
        self.cout = cout
        self._buf = {}
        self._cache = None

    def _scratch(self, name, shape, zeros=False):
        key = (name, shape)
        buf = self._buf.get(key)
        if buf is None:
            alloc = np.zeros if zeros else np.empty
            buf = alloc(shape, dtype=np.float64)
            self._buf[key] = buf
        return buf

    def forward(self, x, train):
        cin, bsz, h, w = x.shape
        n = bsz * h * w
        # Zero-allocated once; only the interior is ever written, so the
        # borders stay zero across reuses.
        pad = self._scratch("pad", (cin, bsz, h + 2, w + 2), zeros=True)
        pad[:, :, 1:h + 1, 1:w + 1] = x
        cols = self._scratch("cols", (cin, 9, bsz, h, w))
        for t in range(9):
            ky, kx = divmod(t, 3)
            cols[:, t] = pad[:, :, ky:ky + h, kx:kx + w]
        colsm = cols.reshape(cin * 9, n)
        out = self._scratch("out", (self.cout, n))
        np.matmul(self.w, colsm, out=out)
        out += self.b[:, None]
        np.maximum(out, 0.0, out=out)
        if train:
            mask = self._scratch("mask", (self.cout, n))
            np.greater(out, 0.0, out=mask)
            self._cache = (colsm, mask, (cin, bsz, h, w))
        return out.reshape(self.cout, bsz, h, w)

    def backward(self, g, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError("backward called before a retained forward")
        colsm, mask, (cin, bsz, h, w) = self._cache
        n = bsz * h * w
        g = g.reshape(self.cout, n)
        gz = self._scratch("gz", (self.cout, n))
        np.multiply(g, mask, out=gz)
        gw = gz @ colsm.T
        gb = gz.sum(axis=1)
        if not need_input_grad:
            return gw, gb, None
        gcols = self._scratch("gcols", (cin, 9, bsz, h, w))
        np.matmul(self.w.T, gz, out=gcols.reshape(cin * 9, n))
        gpad = self._scratch("gpad", (cin, bsz, h + 2, w + 2))
        gpad.fill(0.0)
        for t in range(9):
            ky, kx = divmod(t, 3)
            gpad[:, :, ky:ky + h, kx:kx + w] += gcols[:, t]
        return gw, gb, gpad[:, :, 1:h + 1, 1:w + 1]


class _Conv1x1:
    """Pointwise projection to logits, no nonlinearity."""

    def __init__(self, cin, cout, rng):
        bound = 1.0 / np.sqrt(cin)
        self.w = rng.uniform(-bound, bound, size=(cout, cin))
        self.b = rng.uniform(-bound, bound, size=cout)
        self.cin = cin
        self.cout = cout
        self._cache = None

    def forward(self, x, train):
        cin, bsz, h, w = x.shape
        xf = x.reshape(cin, bsz * h * w)
        out = self.w @ xf + self.b[:, None]
        if train:
            self._cache = (xf, (cin, bsz, h, w))
        return out.reshape(self.cout, bsz, h, w)

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward called before a retained forward")
        xf, shape = self._cache
        g = g.reshape(self.cout, xf.shape[1])
        gw = g @ xf.T
        gb = g.sum(axis=1)
        gx = self.w.T @ g
        return gw, gb, gx.reshape(shape)


class SegNetwork:
    """Per-pixel classifier: hidden 3x3 conv stages plus a 1x1 head."""

    def __init__(self, num_classes, in_channels=3, hidden=(16, 16),
                 init_seed=0):
        if num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {num_classes}")
        rng = np.random.default_rng(init_seed)
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.hidden = tuple(int(v) for v in hidden)
        self.init_seed = init_seed
        self.convs = []
        cin = in_channels
        for width in self.hidden:
            self.convs.append(_Conv3x3(cin, width, rng))
            cin = width
        self.head = _Conv1x1(cin, num_classes, rng)
        self._last_batched = None

    def parameters(self):
        out = []
        for layer in self.convs:
            out.extend((layer.w, layer.b))
        out.extend((self.head.w, self.head.b))
        return out

    def forward(self, x, train=True):
        """Logits for one (C, H, W) image or a (B, C, H, W) batch.

        train=False skips the activation caches, for prediction-only
        passes that will never be differentiated.
        """
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 4
        if not batched:
            if x.ndim != 3:
                raise ValueError(f"expected 3 or 4 dims, got {x.shape}")
            x = x[None]
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h = np.ascontiguousarray(np.moveaxis(x, 1, 0))
        for layer in self.convs:
            h = layer.forward(h, train)
        logits = self.head.forward(h, train)
        if train:
            self._last_batched = batched
        out = np.moveaxis(logits, 0, 1).copy()
        return out if batched else out[0]

    def backward(self, g):
        """Parameter gradients for upstream logit gradients g.

        Returns a flat list aligned with parameters(). The input
        gradient of the first stage is never materialized.
        """
        g = np.asarray(g, dtype=np.float64)
        if self._last_batched is None:
            raise RuntimeError("backward called before a retained forward")
        if g.ndim == 3:
            g = g[None]
        gi = np.ascontiguousarray(np.moveaxis(g, 1, 0))
        gw, gb, gx = self.head.backward(gi)
        grads = [gw, gb]
        for i in range(len(self.convs) - 1, -1, -1):
            gw, gb, gx = self.convs[i].backward(gx, need_input_grad=i > 0)
            grads.insert(0, gb)
            grads.insert(0, gw)
        return grads

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def softmax_probs(logits):
    """Class probabilities over the channel axis, stabilized by a max shift."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-3, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-3, keepdims=True)
    return z


def predict_argmax(probs):
    """Most probable class per pixel; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-3).astype(np.int64)


def confidence_map(probs):
    """Per-pixel maximum class probability."""
    return np.asarray(probs, dtype=np.float64).max(axis=-3)


@dataclass
class OptimizerState:
    lr0: float
    max_iter: int
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    velocity: list = field(default=None, repr=False)


def poly_lr(state, it):
    """Polynomially decayed rate: lr0 * (1 - it/max_iter) ** poly_power."""
    if not 0 <= it <= state.max_iter:
        raise ValueError(f"iteration {it} outside [0, {state.max_iter}]")
    return state.lr0 * (1.0 - it / state.max_iter) ** state.poly_power


def sgd_step(net, grads, state, it):
    """One momentum update in place.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - poly_lr(it) * v
    """
    params = net.parameters()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != param {p.shape}")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    lr = poly_lr(state, it)
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v += g
        v += state.weight_decay * p
        p -= lr * v


def save_checkpoint(net, stem):
    """Write <stem>.json (architecture manifest) and <stem>.f64 (flat
    little-endian float64 parameter blob)."""
    stem = str(stem)
    params = net.parameters()
    manifest = {
        "num_classes": net.num_classes,
        "in_channels": net.in_channels,
        "hidden": list(net.hidden),
        "init_seed": int(net.init_seed),
        "param_shapes": [list(p.shape) for p in params],
    }
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    blob = np.concatenate([p.ravel() for p in params]).astype("<f8")
    with open(stem + ".f64", "wb") as f:
        f.write(blob.tobytes())


def load_checkpoint(stem):
    """Rebuild a SegNetwork from save_checkpoint output."""
    stem = str(stem)
    try:
        with open(stem + ".json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint manifest {stem}.json: {e}")
    try:
        net = SegNetwork(
            num_classes=manifest["num_classes"],
            in_channels=manifest["in_channels"],
            hidden=tuple(manifest["hidden"]),
            init_seed=manifest["init_seed"],
        )
    except KeyError as e:
        raise FormatError(f"checkpoint manifest {stem}.json missing field {e}")
    params = net.parameters()
    shapes = [list(p.shape) for p in params]
    if manifest.get("param_shapes") != shapes:
        raise FormatError(
            f"checkpoint manifest {stem}.json shapes "
            f"{manifest.get('param_shapes')} do not match architecture {shapes}")
    total = sum(p.size for p in params)
    with open(stem + ".f64", "rb") as f:
        raw = f.read()
    if len(raw) != total * 8:
        raise FormatError(
            f"checkpoint blob {stem}.f64 holds {len(raw)} bytes, "
            f"expected {total * 8}")
    flat = np.frombuffer(raw, dtype="<f8")
    pos = 0
    for p in params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return net
