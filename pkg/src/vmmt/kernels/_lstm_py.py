"""Pure-numpy LSTM pointwise kernel (fallback when the extension is absent)."""
import numpy as np


def lstm_forward(gates, c_prev, h_prev, mask):
    H = c_prev.shape[1]
    # sigmoid(x) = (1 + tanh(x/2)) / 2 avoids exp overflow
    act = np.tanh(gates * 0.5)
    act += 1.0
    act *= 0.5
    act[:, 2 * H:3 * H] = np.tanh(gates[:, 2 * H:3 * H])
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    c_new = f * c_prev + i * g
    tc = np.tanh(c_new)
    keep = mask[:, None] != 0
    h = np.where(keep, o * tc, h_prev)
    c = np.where(keep, c_new, c_prev)
    return h, c, (act, tc)


def lstm_backward(cache, c_prev, mask, dh, dc):
    act, tc = cache
    H = c_prev.shape[1]
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    m = mask[:, None]
    dh_new = m * dh
    dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
    dgates = np.empty_like(act)
    dgates[:, :H] = dc_new * g * i * (1.0 - i)
    dgates[:, H:2 * H] = dc_new * c_prev * f * (1.0 - f)
    dgates[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
    dgates[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
    dc_prev = dc_new * f + (1.0 - m) * dc
    dh_prev = (1.0 - m) * dh
    return dgates, dc_prev, dh_prev
