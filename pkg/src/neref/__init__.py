"""Neural refractive fields: recover a fluid surface from refraction correspondences."""

__version__ = "0.1.0"
