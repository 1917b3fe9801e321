from .random_forest import Forest, ForestConfig, fit_forest, load_forest
from .unet_regressor import ModelCheckpoint, UNetBiasRegressor, UNetConfig, train
