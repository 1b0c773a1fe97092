"""One-shot 3D intensity harmonization by neural style transfer with AdaIN,
evaluated on synthetic multi-site brain phantoms."""

__version__ = "0.1.0"
