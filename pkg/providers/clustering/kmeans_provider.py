"""k-means clusterer (scikit-learn)."""

import numpy as np
from sklearn.cluster import KMeans

from core.clustering import BaseClusterer

MAX_RESTARTS = 50


class KMeansClusterer(BaseClusterer):
    """k-means with k-means++ seeding; restarts capped at 50."""

    def __init__(self, n_init: int = 10, max_iter: int = 300):
        self.n_init = min(max(int(n_init), 1), MAX_RESTARTS)
        self.max_iter = max_iter

    def name(self) -> str:
        return "k-means"

    def fit_predict(self, features: np.ndarray, k: int, seed: int) -> np.ndarray:
        model = KMeans(
            n_clusters=k,
            init="k-means++",
            n_init=self.n_init,
            max_iter=self.max_iter,
            random_state=seed,
        )
        return model.fit_predict(features)
