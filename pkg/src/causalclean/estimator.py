"""scikit-learn style facade over the restoration model.

``ClipRestorer`` fits on pairs of degraded/clean clips and predicts restored
clips, so the network composes with sklearn tooling (get_params/set_params,
clone, pipelines that pass array-likes through).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import psnr
from .model import ModelConfig, RestorationModel
from .optim import OptimizerConfig
from .tensor import Tensor
from .train import Trainer
from .validation import check_clip_batch, check_paired_batches


class ClipRestorer(BaseEstimator):
    """Video clip restorer trained by direct supervision.

    Parameters mirror the model/optimizer configuration; all are plain
    values so sklearn's get_params/set_params and clone work unchanged.

    X is a batch of degraded clips ([n, t, c, h, w] array or a list of
    [t, c, h, w] arrays, values in [0, 1]); y holds the matching clean clips.
    """

    def __init__(self, stages=3, base_width=16, enc_blocks=2, chm_blocks=1,
                 tau=3, k=5, gamma=5, patch=4, heads=1,
                 chm_placement="latent_and_decoder", topk_mode="topk",
                 iterations=300, lr_init=4e-4, lr_final=1e-7, crop=None,
                 augment=True, seed=0):
        self.stages = stages
        self.base_width = base_width
        self.enc_blocks = enc_blocks
        self.chm_blocks = chm_blocks
        self.tau = tau
        self.k = k
        self.gamma = gamma
        self.patch = patch
        self.heads = heads
        self.chm_placement = chm_placement
        self.topk_mode = topk_mode
        self.iterations = iterations
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.crop = crop
        self.augment = augment
        self.seed = seed

    def _model_config(self, channels):
        patch = self.patch
        if np.isscalar(patch):
            patch = tuple([int(patch)] * self.stages)
        return ModelConfig(stages=self.stages, base_width=self.base_width,
                           in_channels=channels, enc_blocks=self.enc_blocks,
                           chm_blocks=self.chm_blocks, tau=self.tau, k=self.k,
                           gamma=self.gamma, patch=patch, heads=self.heads,
                           chm_placement=self.chm_placement,
                           topk_mode=self.topk_mode)

    def fit(self, X, y):
        """Train on (degraded, clean) clip pairs; returns self."""
        xs, ys = check_paired_batches(X, y)
        channels = xs[0].shape[1]
        crop = self.crop or min(min(c.shape[-2], c.shape[-1]) for c in xs)
        opt = OptimizerConfig(lr_init=self.lr_init, lr_final=self.lr_final,
                              iterations=self.iterations, crop=crop,
                              hflip=self.augment, vflip=self.augment,
                              rot90=self.augment, seed=self.seed)
        self.model_ = RestorationModel(self._model_config(channels),
                                       seed=self.seed)
        trainer = Trainer(self.model_, list(zip(xs, ys)), opt,
                          master_seed=self.seed)
        self.loss_history_ = []
        trainer.run(log=lambda line: self.loss_history_.append(line))
        self.n_iterations_ = trainer.iteration
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ClipRestorer has not been fitted")

    def predict(self, X):
        """Restore a batch of degraded clips."""
        self._require_fitted()
        xs = check_clip_batch(X, channels=self.model_.config.in_channels)
        dtype = self.model_.config.dtype
        out = [self.model_.restore_clip(Tensor(c.astype(dtype))).data
               for c in xs]
        if isinstance(X, np.ndarray) and X.ndim == 5:
            return np.stack(out, axis=0)
        return out

    def score(self, X, y):
        """Mean PSNR (dB) of the restorations against the clean clips."""
        self._require_fitted()
        xs, ys = check_paired_batches(X, y)
        restored = self.predict(xs)
        return float(np.mean([psnr(r, gt) for r, gt in zip(restored, ys)]))
