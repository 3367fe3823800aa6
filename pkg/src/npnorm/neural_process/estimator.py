from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .._validation import check_design, check_volume_batch
from ..mixed_effect import build_context_set, with_intercept
from ..normative import compute_npm
from ..tensorcore import Rng
from .model import NpModel, Schedule, predict_distribution, train
from .network import NpArchitecture
from .quantile import DEFAULT_EPS, quantile_apply, quantile_fit


class NeuralProcessNormativeModel(BaseEstimator):
    """Deep normative model of volumetric data with a neural process.

    ``fit`` standardizes the covariates, quantile-transforms each voxel,
    fits ``n_context`` bootstrap fixed effects as context functions and
    trains the encoder/decoder on the negative ELBO. Predictions and NPMs
    live in quantile space.

    Parameters mirror :class:`NpArchitecture` and :class:`Schedule`;
    ``n_dropout_passes`` (K) and ``n_latent_samples`` (L) control the
    Monte Carlo predictive distribution; ``mc_dropout=False`` switches
    dropout off at prediction time (the K passes then differ only
    through their latent draws).
    """

    def __init__(self, n_context=20, conv_channels=(8, 16, 32), kernel_size=3, pool_size=2,
                 feature_width=32, joint_widths=(32, 32), latent_dim=16, decoder_widths=(32,),
                 decoder_channels=(16, 8), dropout=0.1, epochs=100, lr_start=1e-2, lr_end=1e-5,
                 batch_size=8, n_mc=1, n_dropout_passes=10, n_latent_samples=10, mc_dropout=True,
                 quantile_eps=DEFAULT_EPS, random_state=0, verbose=False):
        self.n_context = n_context
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.pool_size = pool_size
        self.feature_width = feature_width
        self.joint_widths = joint_widths
        self.latent_dim = latent_dim
        self.decoder_widths = decoder_widths
        self.decoder_channels = decoder_channels
        self.dropout = dropout
        self.epochs = epochs
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.batch_size = batch_size
        self.n_mc = n_mc
        self.n_dropout_passes = n_dropout_passes
        self.n_latent_samples = n_latent_samples
        self.mc_dropout = mc_dropout
        self.quantile_eps = quantile_eps
        self.random_state = random_state
        self.verbose = verbose

    def _rng(self):
        return Rng(int(self.random_state))

    def fit(self, X, Y):
        X = check_design(X)
        Y = check_volume_batch(Y, n=X.shape[0])
        if Y.ndim != 4:
            raise ValueError(f"Y must be (N, T1, T2, T3), got shape {Y.shape}")
        rng = self._rng()
        x_mean = X.mean(axis=0)
        x_scale = X.std(axis=0)
        x_scale[x_scale == 0] = 1.0
        Xs = (X - x_mean) / x_scale
        qt = quantile_fit(Y, self.quantile_eps)
        U = quantile_apply(qt, Y)
        F = build_context_set(with_intercept(Xs), U, self.n_context, rng.child("context"))
        arch = NpArchitecture(
            grid=tuple(Y.shape[1:]), n_channels=self.n_context, n_covariates=X.shape[1],
            conv_channels=tuple(self.conv_channels), kernel_size=self.kernel_size, pool_size=self.pool_size,
            feature_width=self.feature_width, joint_widths=tuple(self.joint_widths), latent_dim=self.latent_dim,
            decoder_widths=tuple(self.decoder_widths), decoder_channels=tuple(self.decoder_channels),
            dropout=self.dropout,
        )
        schedule = Schedule(self.epochs, self.lr_start, self.lr_end, self.batch_size, self.n_mc)
        callback = None
        if self.verbose:
            def callback(row):
                print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  recon {row['recon']:.4f}  kl {row['kl']:.4f}")
        self.model_ = train(Xs, U, F, arch, schedule, rng.child("train"), quantile=qt,
                            x_mean=x_mean, x_scale=x_scale, callback=callback)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("NeuralProcessNormativeModel is not fitted yet")

    def transform_targets(self, Y):
        """Quantile-space version of raw volumes ``Y``."""
        self._check_fitted()
        return quantile_apply(self.model_.quantile, Y)

    def predict_distribution(self, X, rng=None, subject_keys=None, keep_samples=False, mc_dropout=None):
        self._check_fitted()
        mc_dropout = self.mc_dropout if mc_dropout is None else mc_dropout
        Xs = self.model_.standardize(X)
        rng = rng or self._rng().child("predict")
        return predict_distribution(self.model_, Xs, K=self.n_dropout_passes, L=self.n_latent_samples, rng=rng,
                                    subject_keys=subject_keys, keep_samples=keep_samples, mc_dropout=mc_dropout)

    def predict(self, X, return_var=False):
        summary = self.predict_distribution(X)
        if return_var:
            return summary.mean, summary.total_var
        return summary.mean

    def npm(self, X, Y, summary=None, **kwargs):
        """Normative probability maps of raw volumes ``Y`` for subjects ``X``."""
        summary = summary or self.predict_distribution(X, **kwargs)
        return compute_npm(self.transform_targets(Y), summary)

    def save(self, path):
        self._check_fitted()
        self.model_.save(path)

    @classmethod
    def load(cls, path, **params):
        model = NpModel.load(path)
        est = cls(n_context=model.arch.n_channels, random_state=model.seed, **params)
        est.model_ = model
        return est

