"""Expression encoders, operation encoders, tokenizer and operation trees."""

from .models import (
    FAMILIES,
    GRAPH_FAMILIES,
    EmptyInput,
    EncoderConfig,
    ExpressionEncoder,
    OperationEncoder,
    build_vocabulary,
    encode_expression,
    encode_operation,
    make_encoder,
)
from .optree import OperationTree, build_operation_tree
from .tokenizer import PAD_ID, UNK_ID, TokenVocabulary, tokenize_latex

__all__ = [
    "FAMILIES",
    "GRAPH_FAMILIES",
    "PAD_ID",
    "UNK_ID",
    "EmptyInput",
    "EncoderConfig",
    "ExpressionEncoder",
    "OperationEncoder",
    "OperationTree",
    "TokenVocabulary",
    "build_operation_tree",
    "build_vocabulary",
    "encode_expression",
    "encode_operation",
    "make_encoder",
    "tokenize_latex",
]
