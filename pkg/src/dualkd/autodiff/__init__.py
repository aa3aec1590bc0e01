from .gradcheck import finite_diff_gradcheck, numerical_grad, nudge_from_kinks
from .nn import (
    BN_EPS,
    BN_MOMENTUM,
    RunningStats,
    adaptive_avg_time,
    avg_pool2d,
    batch_norm,
    conv2d,
    dropout,
    gru,
    pool,
)
from .tensor import (
    GraphNode,
    Tensor,
    add,
    as_tensor,
    astype,
    clip,
    concat,
    detach,
    div,
    exp,
    flip,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    leaky_relu,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)


def bidirectional_gru(x, fwd, bwd):
    """Run a forward and a time-reversed GRU and concatenate along features.

    ``fwd`` and ``bwd`` are ``(w_ih, w_hh, b_ih, b_hh)`` tuples.
    """
    return concat([gru(x, *fwd), gru(x, *bwd, reverse=True)], axis=-1)


def gru_layer(x, params, bidirectional=True):
    """GRU layer over ``x[B, T, D]``; ``params`` holds one or two gate tuples."""
    if bidirectional:
        return bidirectional_gru(x, params[0], params[1])
    return gru(x, *params[0])
