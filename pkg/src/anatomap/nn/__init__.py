from . import kernels, tensor  # noqa: F401
