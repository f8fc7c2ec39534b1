"""Kronecker-product adapters for frozen linear layers, with LoRA, LoKr and LoHA alongside"""
__version__ = '0.1.0'

from kronadapt.adapters import AdapterSpec, build_adapter, delta_weight, merge_adapter, param_count
