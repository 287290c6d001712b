from .check import analytic_grad, grad_check, numeric_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import (
    GraphConsumedError,
    Node,
    Op,
    abs_,
    add,
    as_node,
    concat,
    cosine_similarity,
    div,
    exp,
    gather_rows,
    grl,
    is_grad_enabled,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    sum_,
    transpose,
)
