"""Arbitrary-scale super-resolution by mixing interpolation kernels through look-up tables."""
from .engine import SrRequest, baseline_sr, cost_report, imlut_sr, imnet_sr, super_resolve
from .errors import ContractError, FormatError
from .imnet import ImNetParams, load_params, save_params
from .kernels import KernelSet, resample
from .lut import LutBundle, deserialize, serialize, transfer

__version__ = "0.1.0"
