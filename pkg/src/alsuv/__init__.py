"""Multi-latent face-template reconstruction with trajectory averaging and
unsupervised validation, studied in a small synthetic world."""

__version__ = "0.1.0"
