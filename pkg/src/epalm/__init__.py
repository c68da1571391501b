"""Frozen encoder/decoder adaptation with per-layer [CLS] injection, on a numpy autodiff core."""

__version__ = "0.1.0"

from .adapt import EPALM, VariantSpec, count_params, count_params_for, variant_spec  # noqa: E402
from .autodiff import Parameter, Tensor  # noqa: E402

__all__ = ["EPALM", "Parameter", "Tensor", "VariantSpec", "count_params", "count_params_for",
           "variant_spec", "__version__"]
