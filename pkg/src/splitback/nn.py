"""Minimal differentiable kernel: layers, losses, optimizers, checking.

Hand-rolled on numpy rather than pulling in an autodiff framework: the
split protocol needs per-sample embedding gradients returned to clients,
bitwise-reproducible updates, and float64 finite-difference verification
of every analytic gradient, all of which are simpler to guarantee with
explicit forward/backward pairs. The layer set is intentionally small
(dense, conv2d, relu/tanh/sigmoid, flatten) because that is all the
simulator's models use.

Conventions: forward(x) returns (y, cache); backward(cache, dy) returns
(dx, [dparam...]) with dparam aligned to params(). Losses are means over
the batch unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


class Dense:
    """Affine layer y = x @ W + b with Glorot-uniform init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        self.W = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, cache, dy):
        x = cache
        return dy @ self.W.T, [x.T @ dy, dy.sum(axis=0)]


def _im2col(x, kh, kw, stride, pad):
    batch, channels, height, width = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    cols = np.empty((batch, channels, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(batch, channels * kh * kw, out_h * out_w), out_h, out_w


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    batch, channels, height, width = x_shape
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    dcols = dcols.reshape(batch, channels, kh, kw, out_h, out_w)
    dx = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Conv2d:
    """2D convolution (cross-correlation) via im2col."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int = 0,
        dtype=np.float32,
    ):
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.W = rng.uniform(
            -bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)
        ).astype(dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = pad

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        k = self.kernel_size
        cols, out_h, out_w = _im2col(x, k, k, self.stride, self.pad)
        w_mat = self.W.reshape(len(self.W), -1)
        y = np.einsum("oc,bcl->bol", w_mat, cols) + self.b[None, :, None]
        y = y.reshape(x.shape[0], -1, out_h, out_w)
        return y, (x.shape, cols)

    def backward(self, cache, dy):
        x_shape, cols = cache
        k = self.kernel_size
        batch, out_c = dy.shape[:2]
        dy_mat = dy.reshape(batch, out_c, -1)
        dW = np.einsum("bol,bcl->oc", dy_mat, cols).reshape(self.W.shape)
        db = dy_mat.sum(axis=(0, 2))
        dcols = np.einsum("oc,bol->bcl", self.W.reshape(out_c, -1), dy_mat)
        dx = _col2im(dcols, x_shape, k, k, self.stride, self.pad)
        return dx, [dW, db]


class Relu:
    def params(self):
        return []

    def forward(self, x):
        return np.maximum(x, 0), x

    def backward(self, cache, dy):
        return dy * (cache > 0), []


class Tanh:
    def params(self):
        return []

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return dy * (1.0 - cache * cache), []


class Sigmoid:
    def params(self):
        return []

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, cache, dy):
        return dy * cache * (1.0 - cache), []


class Flatten:
    def params(self):
        return []

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), []


class Network:
    """A plain layer stack with explicit forward/backward passes."""

    def __init__(self, layers: list, dtype=np.float32):
        self.layers = layers
        self.dtype = dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_params(self, new_params: list[np.ndarray]) -> None:
        current = self.params()
        if len(current) != len(new_params):
            raise ContractError(f"expected {len(current)} arrays, got {len(new_params)}")
        i = 0
        for layer in self.layers:
            for slot, _ in enumerate(layer.params()):
                arr = new_params[i]
                target = layer.params()[slot]
                if arr.shape != target.shape:
                    raise ContractError(f"param {i}: shape {arr.shape} != {target.shape}")
                target[...] = arr.astype(self.dtype, copy=False)
                i += 1

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list, dy: np.ndarray):
        """Returns (dx, grads) with grads aligned to params()."""
        grads_rev = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, dparams = layer.backward(cache, dy)
            grads_rev.extend(reversed(dparams))
        return dy, list(reversed(grads_rev))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax; rows sum to 1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.

    Returns (loss, per_sample_dlogits) where per_sample_dlogits[i] is the
    gradient of sample i's own loss term (softmax - onehot), unscaled by
    the batch size. Divide by B for the mean-loss gradient.
    """
    probs = softmax(logits.astype(np.float64))
    batch = len(labels)
    picked = probs[np.arange(batch), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    dlogits = probs
    dlogits[np.arange(batch), labels] -= 1.0
    return loss, dlogits.astype(logits.dtype)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain gradient step: p - lr * g, returned as new arrays."""
    out = []
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in sgd_step")
        out.append(p - np.asarray(g, dtype=p.dtype) * p.dtype.type(lr))
    return out


@dataclass
class AdamState:
    """First/second moment accumulators; step counts from 0."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: list[np.ndarray]) -> "AdamState":
        return AdamState(
            [np.zeros_like(p, dtype=np.float64) for p in params],
            [np.zeros_like(p, dtype=np.float64) for p in params],
        )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One Adam update with bias correction; mutates state, returns new params."""
    state.t += 1
    t = state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in adam_step")
        g64 = np.asarray(g, dtype=np.float64)
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g64
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g64 * g64
        m_hat = state.m[i] / (1 - beta1**t)
        v_hat = state.v[i] / (1 - beta2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + eps)
        out.append((p.astype(np.float64) - step).astype(p.dtype))
    return out


def flatten_params(params: list[np.ndarray]):
    """Concatenate arrays into one float64 vector plus a shape manifest."""
    manifest = [(tuple(p.shape), str(p.dtype)) for p in params]
    if params:
        vec = np.concatenate([p.astype(np.float64).ravel() for p in params])
    else:
        vec = np.zeros(0)
    return vec, manifest


def unflatten_params(vec: np.ndarray, manifest) -> list[np.ndarray]:
    """Inverse of flatten_params; validates total size against the manifest."""
    expected = sum(int(np.prod(shape)) for shape, _ in manifest)
    if vec.size != expected:
        raise ContractError(f"vector has {vec.size} entries, manifest needs {expected}")
    out, offset = [], 0
    for shape, dtype in manifest:
        size = int(np.prod(shape))
        out.append(vec[offset : offset + size].reshape(shape).astype(dtype))
        offset += size
    return out


def numerical_gradient(loss_fn, arrays: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of loss_fn w.r.t. each array, in place.

    loss_fn takes no arguments and must read the arrays by reference.
    Arrays should be float64 for the differences to resolve at eps=1e-6.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn()
            flat[i] = orig - eps
            minus = loss_fn()
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Aggregate relative gap ||a - n|| / (||a|| + ||n||) over all arrays."""
    a, _ = flatten_params([np.asarray(x) for x in analytic])
    n, _ = flatten_params([np.asarray(x) for x in numeric])
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


@dataclass
class Vae:
    """Encoder/decoder pair over flat feature vectors.

    The encoder's last layer emits 2 * latent_dim values, split into the
    mean and log-variance heads; the decoder maps latent draws back to
    feature space (its final activation is part of the decoder stack).
    """

    encoder: Network
    decoder: Network
    latent_dim: int
    input_dim: int

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def set_params(self, new_params: list[np.ndarray]) -> None:
        n_enc = len(self.encoder.params())
        self.encoder.set_params(new_params[:n_enc])
        self.decoder.set_params(new_params[n_enc:])


@dataclass
class VaeForward:
    """Everything one reparameterized pass produces (plus backward caches)."""

    mu: np.ndarray
    logvar: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    recon: np.ndarray
    eps: np.ndarray
    logvar_mask: np.ndarray  # 1 where the stability clip was inactive
    enc_caches: list = field(repr=False, default=None)
    dec_caches: list = field(repr=False, default=None)


def vae_forward(vae: Vae, batch: np.ndarray, rng: np.random.Generator) -> VaeForward:
    """Encode, reparameterize with noise from rng, decode.

    batch is (B, input_dim); all randomness comes from rng, so a seeded
    generator makes the pass fully reproducible.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != vae.input_dim:
        raise ContractError(f"expected (B, {vae.input_dim}) batch, got {batch.shape}")
    enc_out, enc_caches = vae.encoder.forward(batch)
    if enc_out.shape[1] != 2 * vae.latent_dim:
        raise ContractError(
            f"encoder emits {enc_out.shape[1]} values, needs {2 * vae.latent_dim}"
        )
    mu = enc_out[:, : vae.latent_dim]
    raw_logvar = enc_out[:, vae.latent_dim :]
    logvar = np.clip(raw_logvar, -30.0, 30.0)
    mask = ((raw_logvar > -30.0) & (raw_logvar < 30.0)).astype(enc_out.dtype)
    sigma = np.exp(0.5 * logvar)
    eps = rng.standard_normal(mu.shape).astype(enc_out.dtype)
    z = mu + sigma * eps
    recon, dec_caches = vae.decoder.forward(z)
    return VaeForward(mu, logvar, sigma, z, recon, eps, mask, enc_caches, dec_caches)


def encode_mu(vae: Vae, batch: np.ndarray):
    """Deterministic embedding: the encoder's mean head only."""
    enc_out, caches = vae.encoder.forward(np.asarray(batch))
    return enc_out[:, : vae.latent_dim], caches


def decode(vae: Vae, z: np.ndarray) -> np.ndarray:
    """Map latent draws to feature space (no caches kept)."""
    out, _ = vae.decoder.forward(np.asarray(z))
    return out
