"""Shape-conditioned prompt embeddings for guided image generation.

The package turns a 3D point cloud into a residual over text-prompt token
embeddings, trains that mapping against a frozen diffusion denoiser, and
evaluates how well generated images keep the shape. See the README for the
CLI and service entry points.
"""

__version__ = "0.1.0"

from shapetokens.backends import BackendConfig, BackendSuite, load_backend_suite, make_toy_suite

__all__ = [
    "__version__",
    "BackendConfig",
    "BackendSuite",
    "load_backend_suite",
    "make_toy_suite",
]
