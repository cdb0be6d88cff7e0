from typing import List, Protocol

import numpy as np

from core.features import FeatureVector


class IQualityModel(Protocol):
    def required_features(self) -> List[str]:
        ...

    def predict(self, x: FeatureVector) -> float:
        ...

    def predict_matrix(self, X: np.ndarray, names: List[str]) -> np.ndarray:
        ...
