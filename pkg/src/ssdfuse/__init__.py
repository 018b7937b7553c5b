"""ssdfuse: a CPU single-shot detector with dilated/deconvolution feature
fusion aimed at small objects, built from scratch on dense float64 kernels."""

__version__ = "0.1.0"
