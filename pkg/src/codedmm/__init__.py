"""Straggler-resilient distributed matrix multiplication with local product codes."""

from .code import CodedProductGrid, CodeParams, assemble_result, encode_product, peel_decode_subgrid, plan_peel
from .errors import CodedMMError, InvalidArgument, NotDecodable
from .sim import SimConfig, Simulator, StragglerModel

__all__ = [
    "CodeParams",
    "CodedMMError",
    "CodedProductGrid",
    "InvalidArgument",
    "NotDecodable",
    "SimConfig",
    "Simulator",
    "StragglerModel",
    "assemble_result",
    "encode_product",
    "peel_decode_subgrid",
    "plan_peel",
]

__version__ = "0.1.0"
