"""Untrained per-image dehazing by layer disentanglement.

Heavy imports stay out of this module so the CLI can pin BLAS threading
before numpy loads; import the submodules you need directly.
"""

__version__ = "0.1.0"

_PUBLIC = {
    "dehaze": "solver",
    "ablate": "solver",
    "SolverConfig": "solver",
    "Disentanglement": "solver",
    "LossConfig": "losses",
    "psnr": "metrics",
    "ssim": "metrics",
    "extract_style": "transfer",
    "apply_style": "transfer",
}


def __getattr__(name):
    if name in _PUBLIC:
        import importlib

        module = importlib.import_module(f".{_PUBLIC[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
