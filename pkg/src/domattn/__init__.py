"""domattn: domain-attention channel adapters on a minimal autodiff core."""

from .tensor import Tensor, backward, finite_diff_grad
from .adapters import (
    DAModuleParams,
    SEAdapterParams,
    adapter_param_count,
    da_module_forward,
    domain_attention_weights,
    se_adapter_forward,
    se_bank_forward,
    se_excitation,
    use_bank_forward,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad",
    "SEAdapterParams",
    "DAModuleParams",
    "se_excitation",
    "se_adapter_forward",
    "se_bank_forward",
    "use_bank_forward",
    "domain_attention_weights",
    "da_module_forward",
    "adapter_param_count",
    "__version__",
]
