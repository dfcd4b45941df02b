from .manufacture import ManufactureLine, MLConfig, curriculum_level
from .traffic import TJConfig, TrafficJunction

__all__ = ["ManufactureLine", "MLConfig", "TJConfig", "TrafficJunction", "curriculum_level"]
