"""Local shape embedding: point-cloud encoder and latent-conditioned SDF decoder.

Patch coordinates are expressed relative to the patch center and divided by
``patch_radius``; the decoder predicts SDF in those normalized units and the
public helpers convert back to meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp, ShapeError

ENCODER_SIZES = (128, 128, 128)
DECODER_SIZES = (128, 128, 128, 1)


class CodecError(ValueError):
    pass


@dataclass
class EncodeCache:
    mlp_cache: object
    segments: np.ndarray
    counts: np.ndarray


class Codec:
    """Encoder (6 -> 128 -> 128 -> 128 -> latent, mean-pooled) and decoder
    (latent + 3 -> 128 -> 128 -> 128 -> 1)."""

    def __init__(self, encoder: Mlp, decoder: Mlp, patch_radius: float = 0.03):
        self.encoder = encoder
        self.decoder = decoder
        self.patch_radius = float(patch_radius)
        if encoder.in_dim != 6:
            raise CodecError("encoder takes position + normal (6 inputs)")
        if decoder.in_dim != encoder.out_dim + 3 or decoder.out_dim != 1:
            raise CodecError("decoder must take latent + 3 coordinates and output one value")

    @classmethod
    def create(cls, latent_dim: int = 8, patch_radius: float = 0.03, seed: int = 0) -> Codec:
        rng = np.random.default_rng(seed)
        enc = Mlp.create(6, (*ENCODER_SIZES, latent_dim), rng)
        dec = Mlp.create(latent_dim + 3, DECODER_SIZES, rng)
        return cls(enc, dec, patch_radius)

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def set_params(self, params):
        n = 2 * len(self.encoder.layers)
        self.encoder.set_params(params[:n])
        self.decoder.set_params(params[n:])

    def copy(self) -> Codec:
        return Codec(self.encoder.copy(), self.decoder.copy(), self.patch_radius)

    # encoder

    def encode_batch(self, features: np.ndarray, segments: np.ndarray,
                     n_patches: int | None = None) -> tuple[np.ndarray, EncodeCache]:
        """Latents for many patches at once.

        ``features`` is (N, 6) normalized position + normal for all points,
        ``segments`` (N,) the patch id of each point. Patches must be non-empty.
        """
        segments = np.asarray(segments, dtype=np.int64)
        if n_patches is None:
            n_patches = int(segments.max()) + 1 if len(segments) else 0
        counts = np.bincount(segments, minlength=n_patches).astype(np.float64)
        if np.any(counts == 0):
            raise CodecError("cannot encode an empty patch")
        per_point, cache = self.encoder.forward(features)
        sums = np.zeros((n_patches, self.latent_dim))
        np.add.at(sums, segments, per_point)
        return sums / counts[:, None], EncodeCache(cache, segments, counts)

    def encode_inference(self, features: np.ndarray, segments: np.ndarray, n_patches: int,
                         dtype=np.float32) -> np.ndarray:
        """Latents without a backward cache, evaluated in ``dtype`` and returned as float64."""
        segments = np.asarray(segments, dtype=np.int64)
        counts = np.bincount(segments, minlength=n_patches).astype(np.float64)
        if np.any(counts == 0):
            raise CodecError("cannot encode an empty patch")
        per_point = self.encoder.predict(np.asarray(features, dtype=dtype)).astype(np.float64)
        sums = np.stack([np.bincount(segments, weights=per_point[:, k], minlength=n_patches)
                         for k in range(self.latent_dim)], axis=1)
        return sums / counts[:, None]

    def encode_backward(self, cache: EncodeCache, d_latent: np.ndarray, param_grads: bool = True):
        d_point = d_latent[cache.segments] / cache.counts[cache.segments, None]
        return self.encoder.backward(cache.mlp_cache, d_point, param_grads)

    def encode_patch(self, patch: np.ndarray) -> np.ndarray:
        """Latent of one patch given (K, 6) normalized positions + normals."""
        patch = np.asarray(patch, dtype=np.float64).reshape(-1, 6)
        if len(patch) == 0:
            raise CodecError("cannot encode an empty patch")
        return self.encode_batch(patch, np.zeros(len(patch), dtype=np.int64), 1)[0][0]

    # decoder

    def decode_batch(self, latents: np.ndarray, x_local: np.ndarray):
        """Normalized SDF for rows of (latent, normalized local coordinate)."""
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ShapeError(f"latents must be (n, {self.latent_dim}), got {latents.shape}")
        y, cache = self.decoder.forward(np.concatenate([latents, x_local], axis=1))
        return y[:, 0], cache

    def decode_backward(self, cache, d_out: np.ndarray, param_grads: bool = False):
        """Returns (d_latent, d_x_local, decoder param grads or None)."""
        dx, grads = self.decoder.backward(cache, np.asarray(d_out)[:, None], param_grads)
        return dx[:, :self.latent_dim], dx[:, self.latent_dim:], grads

    def decode_point(self, latent: np.ndarray, x_local: np.ndarray) -> float:
        """SDF in meters at one normalized local coordinate."""
        latent = np.asarray(latent, dtype=np.float64).reshape(-1)
        if latent.shape[0] != self.latent_dim:
            raise CodecError(f"latent has dimension {latent.shape[0]}, codec expects {self.latent_dim}")
        s, _ = self.decode_batch(latent[None], np.asarray(x_local, dtype=np.float64).reshape(1, 3))
        return float(s[0]) * self.patch_radius

    def decode_point_grad(self, latent: np.ndarray, x_local: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """(sdf meters, d sdf / d latent, d sdf / d x_local)."""
        s, cache = self.decode_batch(np.asarray(latent, dtype=np.float64).reshape(1, -1),
                                     np.asarray(x_local, dtype=np.float64).reshape(1, 3))
        dl, dx, _ = self.decode_backward(cache, np.array([self.patch_radius]))
        return float(s[0]) * self.patch_radius, dl[0], dx[0]
