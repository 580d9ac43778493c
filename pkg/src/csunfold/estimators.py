"""scikit-learn style front door.

Three estimators wrap the numerical core so the pipeline composes with the
wider ecosystem (get_params/set_params, clone, fit/transform/predict):

* :class:`BlockSampler` -- transformer from images to block measurements
  and back to the linear initial reconstruction.
* :class:`UnfoldedReconstructor` -- fit() trains the unfolded network on
  the given images, predict() runs sample + reconstruct.
* :class:`IstaBaseline` -- the non-learned iterative solver with the same
  predict() surface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import baseline as bl
from . import model as md
from . import sampling
from . import training
from .metrics import psnr
from .validation import check_images, check_rate


class BlockSampler(BaseEstimator, TransformerMixin):
    """Block-based linear measurement as a transformer.

    transform() maps each image to a MeasurementSet; inverse_transform()
    maps measurements back to the (cropped) initial reconstruction.
    """

    def __init__(self, block_size=33, rate=0.25, matrix="random", seed=0):
        self.block_size = block_size
        self.rate = rate
        self.matrix = matrix
        self.seed = seed

    def fit(self, X=None, y=None):
        check_rate(self.rate)
        kind = "learned-init" if self.matrix == "learned" else "orthogonalized-random"
        self.operator_ = sampling.make_operator(self.block_size, self.rate, kind, self.seed)
        return self

    def _op(self):
        if not hasattr(self, "operator_"):
            raise NotFittedError("BlockSampler is not fitted; call fit() first")
        return self.operator_

    def transform(self, X):
        op = self._op()
        return [sampling.measure_image(op, img) for img in check_images(X)]

    def inverse_transform(self, measurements):
        op = self._op()
        if isinstance(measurements, sampling.MeasurementSet):
            measurements = [measurements]
        out = []
        for m in measurements:
            x0 = sampling.initial_reconstruction(op, m)
            out.append(sampling.crop_to(x0, (m.orig_h, m.orig_w))[0, 0])
        return out


class UnfoldedReconstructor(BaseEstimator):
    """Unfolded multi-phase reconstruction network as an estimator.

    fit(X) trains on the given grayscale images (desk scale: whole images
    are used as fixed patches when they already match the crop, otherwise
    random crops are drawn).  predict(X) measures each image with the
    fitted operator and reconstructs it.
    """

    def __init__(
        self,
        rate=0.25,
        block_size=33,
        phases=3,
        channels=8,
        feb_blocks=1,
        patch_size=3,
        ssg="full",
        nl="dinlm",
        nl_subsample=2,
        learn_matrix=False,
        steps=300,
        lr=1e-4,
        seed=0,
    ):
        self.rate = rate
        self.block_size = block_size
        self.phases = phases
        self.channels = channels
        self.feb_blocks = feb_blocks
        self.patch_size = patch_size
        self.ssg = ssg
        self.nl = nl
        self.nl_subsample = nl_subsample
        self.learn_matrix = learn_matrix
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def _config(self):
        return md.ModelConfig(
            phases=self.phases,
            block_size=self.block_size,
            rate=check_rate(self.rate),
            channels=self.channels,
            feb_blocks=self.feb_blocks,
            patch_size=self.patch_size,
            ssg_variant=self.ssg,
            nl_kind=self.nl,
            nl_subsample=self.nl_subsample,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = self._config()
        b = self.block_size
        rng = np.random.default_rng(self.seed)
        patches = []
        for img in images:
            if img.shape[0] == b and img.shape[1] == b:
                patches.append(img)
            elif img.shape[0] >= b and img.shape[1] >= b:
                patches.append(training.augment_patch(img, b, rng))
            else:
                raise ValueError(f"image {img.shape} smaller than one {b}x{b} block")
        params, op, losses = training.overfit(
            patches, cfg, steps=self.steps, lr=self.lr, seed=self.seed, learn_phi=self.learn_matrix
        )
        self.config_, self.params_, self.operator_, self.losses_ = cfg, params, op, losses
        return self

    def _fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("UnfoldedReconstructor is not fitted; call fit() first")
        return self.config_, self.params_, self.operator_

    def reconstruct(self, measurements):
        """Reconstruct from MeasurementSets (the measurement-domain API)."""
        cfg, params, op = self._fitted()
        if isinstance(measurements, sampling.MeasurementSet):
            measurements = [measurements]
        out = []
        with ad.no_grad():
            for m in measurements:
                xs, _, _ = md.forward(params, cfg, op, m, training=False)
                out.append(sampling.crop_to(xs[-1], (m.orig_h, m.orig_w))[0, 0])
        return out

    def predict(self, X):
        _, _, op = self._fitted()
        return [self.reconstruct(sampling.measure_image(op, img))[0] for img in check_images(X)]

    def score(self, X, y=None):
        """Mean PSNR (dB) of predict(X) against X itself."""
        images = check_images(X)
        recon = self.predict(images)
        return float(np.mean([psnr(r, t) for r, t in zip(recon, images)]))


class IstaBaseline(BaseEstimator):
    """Classical scalar-step solver with soft thresholding, no learning."""

    def __init__(self, rate=0.25, block_size=33, iterations=200, rho=None, lam=1e-4, seed=0):
        self.rate = rate
        self.block_size = block_size
        self.iterations = iterations
        self.rho = rho
        self.lam = lam
        self.seed = seed

    def fit(self, X=None, y=None):
        self.operator_ = sampling.make_operator(
            self.block_size, check_rate(self.rate), "orthogonalized-random", self.seed
        )
        rho = self.rho if self.rho is not None else 0.9 / bl.operator_norm_sq(self.operator_)
        self.config_ = bl.IstaConfig(
            rho=rho, lam=self.lam, iterations=self.iterations, transform_block=self.block_size
        )
        return self

    def predict(self, X):
        if not hasattr(self, "operator_"):
            raise NotFittedError("IstaBaseline is not fitted; call fit() first")
        out = []
        for img in check_images(X):
            m = sampling.measure_image(self.operator_, img)
            x, _ = bl.ista_reconstruct(self.operator_, m, self.config_)
            out.append(x)
        return out

    def score(self, X, y=None):
        images = check_images(X)
        recon = self.predict(images)
        return float(np.mean([psnr(r, t) for r, t in zip(recon, images)]))
