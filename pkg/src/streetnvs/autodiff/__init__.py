from .tensor import (
    Tape,
    Tensor,
    astensor,
    backward,
    broadcast_rows,
    clamp,
    clampmin,
    concat,
    cos,
    cumsum,
    default_dtype,
    div,
    exp,
    gather_rows,
    linear,
    log,
    matmul,
    mul,
    no_grad,
    put_rows,
    relu,
    reshape,
    sigmoid,
    sin,
    softplus,
    test_mode,
    tmean,
    tsum,
    zeros,
)
from .ops3d import (
    avgpool3d,
    conv3d,
    grid_sample_trilinear,
    instance_norm3d,
    upsample3d,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
