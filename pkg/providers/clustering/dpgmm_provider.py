"""Dirichlet-process Gaussian mixture clusterer (scikit-learn).

``k`` is the truncation level; components the posterior leaves empty are
dropped, so fewer than k clusters may come back.
"""

import numpy as np
from sklearn.decomposition import PCA
from sklearn.mixture import BayesianGaussianMixture

from core.clustering import BaseClusterer


class DPGMMClusterer(BaseClusterer):
    """Variational Dirichlet-process mixture on a PCA projection of the features."""

    def __init__(
        self,
        weight_concentration_prior: float = 1.0,
        covariance_type: str = "diag",
        max_components_dim: int = 20,
        max_iter: int = 500,
    ):
        self.weight_concentration_prior = weight_concentration_prior
        self.covariance_type = covariance_type
        self.max_components_dim = max_components_dim
        self.max_iter = max_iter

    def name(self) -> str:
        return "DP Gaussian mixture"

    def fit_predict(self, features: np.ndarray, k: int, seed: int) -> np.ndarray:
        n_dims = min(self.max_components_dim, features.shape[1], len(features))
        reduced = PCA(n_components=n_dims, random_state=seed).fit_transform(features) if n_dims < features.shape[1] else features
        model = BayesianGaussianMixture(
            n_components=k,
            weight_concentration_prior_type="dirichlet_process",
            weight_concentration_prior=self.weight_concentration_prior,
            covariance_type=self.covariance_type,
            init_params="k-means++",
            max_iter=self.max_iter,
            random_state=seed,
        )
        return model.fit_predict(reduced)
