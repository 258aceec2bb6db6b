"""Party models for split training, built from the nn kernel.

Architectures are plain JSON-friendly descriptors (lists of layer specs)
so checkpoints and manifests can record exactly what was trained:

    ["flatten"], ["dense", out_dim], ["conv", out_ch, k, stride, pad],
    ["relu"], ["tanh"], ["sigmoid"]

The split-protocol entry points live here too: forward_bottom produces a
client's embedding block, forward_top_loss/backward_top run the server's
head and hand back per-sample embedding gradients for each client, and
backward_bottom turns those into client parameter gradients.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Conv2d, Dense, Flatten, Network, Relu, Sigmoid, Tanh, Vae, cross_entropy

ArchSpec = list[list]


def _shape_after(shape, spec_row):
    kind = spec_row[0]
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        return (int(spec_row[1]),)
    if kind == "conv":
        _, out_ch, k, stride, pad = spec_row
        if len(shape) != 3:
            raise ConfigError(f"conv needs (C, H, W) input, have {shape}")
        _, h, w = shape
        return (out_ch, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    if kind in ("relu", "tanh", "sigmoid"):
        return shape
    raise ConfigError(f"unknown layer kind {kind!r}")


def output_dim(input_shape, arch: ArchSpec) -> int:
    """Flat output width of a network described by arch."""
    shape = tuple(input_shape)
    for row in arch:
        shape = _shape_after(shape, row)
    return int(np.prod(shape))


def build_network(input_shape, arch: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> Network:
    """Instantiate a Network from a descriptor, sizing fan-ins automatically."""
    shape = tuple(input_shape)
    layers = []
    for row in arch:
        kind = row[0]
        if kind == "flatten":
            layers.append(Flatten())
        elif kind == "dense":
            if len(shape) != 1:
                layers.append(Flatten())
                shape = (int(np.prod(shape)),)
            layers.append(Dense(shape[0], int(row[1]), rng, dtype=dtype))
        elif kind == "conv":
            _, out_ch, k, stride, pad = row
            layers.append(Conv2d(shape[0], out_ch, k, rng, stride=stride, pad=pad, dtype=dtype))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "tanh":
            layers.append(Tanh())
        elif kind == "sigmoid":
            layers.append(Sigmoid())
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
        shape = _shape_after(shape, row)
    return Network(layers, dtype=dtype)


def mlp_arch(hidden: list[int], out_dim: int, final: str | None = None) -> ArchSpec:
    """Flatten -> (dense+relu)* -> dense(out) [-> final activation]."""
    arch: ArchSpec = [["flatten"]]
    for width in hidden:
        arch.append(["dense", int(width)])
        arch.append(["relu"])
    arch.append(["dense", int(out_dim)])
    if final:
        arch.append([final])
    return arch


def build_vae(
    input_dim: int,
    latent_dim: int,
    hidden: list[int],
    rng: np.random.Generator,
    dtype=np.float32,
    sigmoid_out: bool = True,
) -> Vae:
    """Fully connected VAE: mirrored encoder/decoder around the latent."""
    enc_arch: ArchSpec = []
    for width in hidden:
        enc_arch += [["dense", width], ["relu"]]
    enc_arch.append(["dense", 2 * latent_dim])
    dec_arch: ArchSpec = []
    for width in reversed(hidden):
        dec_arch += [["dense", width], ["relu"]]
    dec_arch.append(["dense", input_dim])
    if sigmoid_out:
        dec_arch.append(["sigmoid"])
    encoder = build_network((input_dim,), enc_arch, rng, dtype=dtype)
    decoder = build_network((latent_dim,), dec_arch, rng, dtype=dtype)
    return Vae(encoder, decoder, latent_dim, input_dim)


def forward_bottom(net: Network, x_slice: np.ndarray):
    """Client-side pass: feature slice -> embedding block (B, d_k)."""
    h, caches = net.forward(x_slice)
    if h.ndim != 2:
        raise ContractError(f"bottom must emit (B, d) embeddings, got {h.shape}")
    return h, caches


def forward_top_loss(top: Network, h_cat: np.ndarray, labels: np.ndarray):
    """Server-side pass over concatenated embeddings.

    Returns (loss, logits, caches, per_sample_dlogits); the loss is the
    batch-mean cross-entropy and per_sample_dlogits feeds backward_top.
    """
    logits, caches = top.forward(h_cat)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, logits, caches, dlogits


def backward_top(top: Network, caches, per_sample_dlogits: np.ndarray, split_dims: list[int]):
    """Server backward: top-model gradients plus per-client embedding grads.

    per_sample_dlogits rows are each sample's own-loss gradient, so the
    backward pass yields dx rows equal to d(loss_i)/d(h_i); dividing the
    parameter sums by B gives the mean-loss gradient the server applies.

    Returns:
        (top_grads, per_client) where per_client[k] is (B, split_dims[k]),
        the per-sample gradients returned to client k.
    """
    batch = len(per_sample_dlogits)
    dx, grad_sums = top.backward(caches, per_sample_dlogits)
    top_grads = [g / batch for g in grad_sums]
    if dx.shape[1] != sum(split_dims):
        raise ContractError(f"embedding width {dx.shape[1]} != sum of split dims {split_dims}")
    per_client, offset = {}, 0
    for k, width in enumerate(split_dims):
        per_client[k] = dx[:, offset : offset + width]
        offset += width
    return top_grads, per_client


def backward_bottom(net: Network, caches, per_sample_grads: np.ndarray):
    """Client backward: mean over the batch of d(loss_i)/d(theta_k)."""
    batch = len(per_sample_grads)
    _, grad_sums = net.backward(caches, per_sample_grads)
    return [g / batch for g in grad_sums]


def save_checkpoint(path, networks: dict[str, Network], archs: dict[str, ArchSpec]) -> None:
    """Persist named networks with their descriptors to one .npz file."""
    payload = {"__archs__": np.frombuffer(json.dumps(archs).encode(), dtype=np.uint8)}
    for name, net in networks.items():
        for i, p in enumerate(net.params()):
            payload[f"{name}/{i}"] = p
    np.savez(path, **payload)


def load_checkpoint(path, networks: dict[str, Network]) -> dict[str, ArchSpec]:
    """Restore parameters into pre-built networks; shapes must match.

    Raises:
        ContractError: array missing or shaped differently than the network.
    """
    with np.load(path) as data:
        archs = json.loads(bytes(data["__archs__"]).decode())
        for name, net in networks.items():
            params = net.params()
            loaded = []
            for i, p in enumerate(params):
                key = f"{name}/{i}"
                if key not in data:
                    raise ContractError(f"checkpoint missing {key}")
                arr = data[key]
                if arr.shape != p.shape:
                    raise ContractError(f"{key}: shape {arr.shape} != {p.shape}")
                loaded.append(arr)
            net.set_params(loaded)
    return archs
