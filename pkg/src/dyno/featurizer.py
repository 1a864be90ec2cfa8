"""Frozen orthonormal patch codec: the invertible stand-in for a pretrained
image tokenizer.

Each P x P x 3 patch is flattened and projected by a fixed matrix with
orthonormal rows.  At the default feature_dim = P*P*3 the projection is
square, so featurize/defeaturize are exact inverses and both are isometries;
that identity is what ties the feature-space and pixel-space reconstruction
losses together.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, derive_seed, matmul, reshape, transpose


class PatchCodec:
    def __init__(self, patch_size=8, feature_dim=None, seed=0):
        self.patch_size = int(patch_size)
        self.patch_dim = self.patch_size * self.patch_size * 3
        self.feature_dim = int(feature_dim) if feature_dim is not None else self.patch_dim
        if not 1 <= self.feature_dim <= self.patch_dim:
            raise ValueError(f"feature_dim must be in [1, {self.patch_dim}]")
        self.seed = int(seed)

        rng = np.random.default_rng(derive_seed(self.seed, "featurizer.codec"))
        gauss = rng.standard_normal((self.patch_dim, self.patch_dim))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
        weight = q[:, : self.feature_dim].T.astype(np.float32)
        self.weight = Tensor(weight, requires_grad=False)  # frozen, never updated

    def checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.weight.data).tobytes()).hexdigest()

    def grid(self, image_hw):
        if image_hw % self.patch_size != 0:
            raise ValueError(f"image size {image_hw} not divisible by patch size {self.patch_size}")
        side = image_hw // self.patch_size
        return side, side * side

    def _to_patches(self, obs):
        # (..., H, W, 3) -> (..., N, P*P*3), patches in row-major order
        h, w = obs.shape[-3], obs.shape[-2]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"frame {h}x{w} not divisible by patch size {self.patch_size}")
        p = self.patch_size
        lead = obs.shape[:-3]
        gh, gw = h // p, w // p
        x = reshape(obs, lead + (gh, p, gw, p, 3))
        ndim = len(lead)
        perm = tuple(range(ndim)) + (ndim, ndim + 2, ndim + 1, ndim + 3, ndim + 4)
        x = transpose(x, perm)
        return reshape(x, lead + (gh * gw, p * p * 3))

    def _from_patches(self, patches, image_hw):
        p = self.patch_size
        gh = gw = image_hw // p
        lead = patches.shape[:-2]
        x = reshape(patches, lead + (gh, gw, p, p, 3))
        ndim = len(lead)
        perm = tuple(range(ndim)) + (ndim, ndim + 2, ndim + 1, ndim + 3, ndim + 4)
        x = transpose(x, perm)
        return reshape(x, lead + (gh * p, gw * p, 3))

    def featurize(self, obs):
        """(..., H, W, 3) observation -> (..., N, feature_dim) patch features."""
        if not isinstance(obs, Tensor):
            obs = Tensor(np.asarray(obs, dtype=np.float32))
        patches = self._to_patches(obs)
        return matmul(patches, transpose(self.weight))

    def defeaturize(self, features, image_hw=None):
        """(..., N, feature_dim) features -> (..., H, W, 3) observation.

        No clamping here; exporters clip to [0,1] at write time so losses see
        the raw reconstruction.
        """
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=np.float32))
        n = features.shape[-2]
        side = int(round(n ** 0.5))
        if side * side != n:
            raise ValueError(f"feature count {n} is not a square patch grid")
        hw = image_hw if image_hw is not None else side * self.patch_size
        if hw != side * self.patch_size:
            raise ValueError(f"feature grid {side} inconsistent with image size {hw}")
        patches = matmul(features, self.weight)
        return self._from_patches(patches, hw)

    def describe(self):
        """Checkpoint stanza: the codec is regenerable from seed + dims."""
        return {
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "checksum": self.checksum(),
        }

    @classmethod
    def from_description(cls, desc):
        codec = cls(patch_size=desc["patch_size"], feature_dim=desc["feature_dim"], seed=desc["seed"])
        if "checksum" in desc and codec.checksum() != desc["checksum"]:
            raise ValueError("codec checksum mismatch: weights not reproducible from seed")
        return codec
