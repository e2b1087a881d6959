# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM pointwise kernel; same contract as ``_lstm_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def lstm_forward(const double[:, ::1] gates, const double[:, ::1] c_prev,
                 const double[:, ::1] h_prev, const double[::1] mask):
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, j
    # transcendentals go through numpy's vectorised tanh; scalar libm calls are slower
    gates_arr = np.asarray(gates)
    act_arr = np.tanh(np.multiply(gates_arr, 0.5))
    act_arr[:, 2 * H:3 * H] = np.tanh(gates_arr[:, 2 * H:3 * H])
    cn_arr = np.empty((B, H))
    cdef double[:, ::1] act = act_arr, cn = cn_arr
    with nogil:
        for b in range(B):
            for j in range(H):
                act[b, j] = 0.5 * (act[b, j] + 1.0)
                act[b, H + j] = 0.5 * (act[b, H + j] + 1.0)
                act[b, 3 * H + j] = 0.5 * (act[b, 3 * H + j] + 1.0)
                cn[b, j] = act[b, H + j] * c_prev[b, j] + act[b, j] * act[b, 2 * H + j]
    tc_arr = np.tanh(cn_arr)
    h_arr = np.empty((B, H))
    c_arr = np.empty((B, H))
    cdef double[:, ::1] h = h_arr, c = c_arr, tc = tc_arr
    with nogil:
        for b in range(B):
            if mask[b] != 0:
                for j in range(H):
                    h[b, j] = act[b, 3 * H + j] * tc[b, j]
                    c[b, j] = cn[b, j]
            else:
                for j in range(H):
                    h[b, j] = h_prev[b, j]
                    c[b, j] = c_prev[b, j]
    return h_arr, c_arr, (act_arr, tc_arr)


def lstm_backward(cache, const double[:, ::1] c_prev, const double[::1] mask,
                  dh_in, dc_in):
    act_arr, tc_arr = cache
    cdef const double[:, ::1] act = act_arr
    cdef const double[:, ::1] tc = tc_arr
    cdef const double[:, ::1] dh = np.ascontiguousarray(dh_in, dtype=np.float64)
    cdef const double[:, ::1] dc = np.ascontiguousarray(dc_in, dtype=np.float64)
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, j
    dg_arr = np.empty((B, 4 * H))
    dcp_arr = np.empty((B, H))
    dhp_arr = np.empty((B, H))
    cdef double[:, ::1] dg = dg_arr, dcp = dcp_arr, dhp = dhp_arr
    cdef double i, f, g, o, t, m, dhn, dcn
    with nogil:
        for b in range(B):
            m = mask[b]
            for j in range(H):
                i = act[b, j]
                f = act[b, H + j]
                g = act[b, 2 * H + j]
                o = act[b, 3 * H + j]
                t = tc[b, j]
                dhn = m * dh[b, j]
                dcn = m * dc[b, j] + dhn * o * (1.0 - t * t)
                dg[b, j] = dcn * g * i * (1.0 - i)
                dg[b, H + j] = dcn * c_prev[b, j] * f * (1.0 - f)
                dg[b, 2 * H + j] = dcn * i * (1.0 - g * g)
                dg[b, 3 * H + j] = dhn * t * o * (1.0 - o)
                dcp[b, j] = dcn * f + (1.0 - m) * dc[b, j]
                dhp[b, j] = (1.0 - m) * dh[b, j]
    return dg_arr, dcp_arr, dhp_arr
