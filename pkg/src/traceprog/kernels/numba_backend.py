"""Numba kernel for the inner optimisation loop.

One call runs the whole loop: forward pass with early abort, reverse sweep,
AdaGrad update, and the nearest-variable snap pass, tracking the best
iterate.  Semantics match ``numpy_backend.fit`` and, transitively, the
tree-walking machine.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OP_CONST, OP_PARAM, OP_VAR, OP_ADD, OP_SUB, OP_SCALE = range(6)
ACT_L2, ACT_L2_SQ, ACT_DEMO = 0, 1, 2
LEN_ZERO, LEN_SQDIFF = 0, 1


@njit(cache=True)
def fit(ops, a1, a2, ref, nd, expr_lo, expr_hi,
        occ_expr, occ_t, occ_scored, occ_match,
        const_vals, var_vals, var_dims, obs_theta,
        params, param_dims,
        shadow_node, shadow_row, shadow_expr, shadow_bind, shadow_t,
        act_kind, len_kind, d_max, e_max,
        lr, delta_stab, max_iter, patience, exit_loss, seed_mode, T):
    n = ops.shape[0]
    J = occ_expr.shape[0]
    R = params.shape[0]
    maxd = params.shape[1]
    V = var_dims.shape[0]

    vals = np.zeros((J, n, maxd))
    sig = np.zeros(J)
    grads = np.zeros((n, maxd))
    gp = np.zeros((R, maxd))
    accum = np.zeros((R, maxd))

    best_params = params.copy()
    best_bind = shadow_bind
    best_loss = np.inf
    bind = shadow_bind
    t_read = shadow_t
    no_improve = 0
    iters = 0

    for _ in range(max_iter):
        iters += 1
        # ---- forward ----
        loss = 0.0
        texec = 0
        nexec = 0
        aborted = False
        for j in range(J):
            b = occ_expr[j]
            t = occ_t[j]
            tc = t if t < T else T - 1
            for i in range(expr_lo[b], expr_hi[b] + 1):
                op = ops[i]
                d = nd[i]
                if op == OP_CONST:
                    for k in range(d):
                        vals[j, i, k] = const_vals[ref[i], k]
                elif op == OP_PARAM:
                    for k in range(d):
                        vals[j, i, k] = params[ref[i], k]
                elif op == OP_VAR:
                    vi = bind if i == shadow_node else ref[i]
                    for k in range(d):
                        vals[j, i, k] = var_vals[vi, tc, k]
                elif op == OP_ADD:
                    for k in range(d):
                        vals[j, i, k] = vals[j, a1[i], k] + vals[j, a2[i], k]
                elif op == OP_SUB:
                    for k in range(d):
                        vals[j, i, k] = vals[j, a1[i], k] - vals[j, a2[i], k]
                else:
                    c = vals[j, a1[i], 0]
                    for k in range(d):
                        vals[j, i, k] = c * vals[j, a2[i], k]
            if shadow_node >= 0 and b == shadow_expr and T > 0:
                t_read = tc
            nexec = j + 1
            texec += 1
            if occ_scored[j]:
                root = expr_hi[b]
                d = nd[root]
                if act_kind == ACT_DEMO and occ_match[j] == 0:
                    sigma = d_max
                else:
                    s = 0.0
                    for k in range(d):
                        diff = vals[j, root, k] - obs_theta[t, k]
                        s += diff * diff
                    sigma = s if act_kind == ACT_L2_SQ else np.sqrt(s)
                sig[j] = sigma
                loss += sigma
                if sigma > e_max:
                    aborted = True
                    break
        if len_kind == LEN_SQDIFF:
            dl = float(texec - T)
            loss += dl * dl

        # ---- best tracking / exits ----
        if loss < best_loss:
            best_loss = loss
            best_bind = bind
            for r in range(R):
                for k in range(maxd):
                    best_params[r, k] = params[r, k]
            no_improve = 0
        else:
            no_improve += 1
        if loss <= exit_loss:
            break
        if no_improve >= patience:
            break

        # ---- backward ----
        for r in range(R):
            for k in range(maxd):
                gp[r, k] = 0.0
        for j in range(nexec):
            if occ_scored[j] == 0:
                continue
            b = occ_expr[j]
            t = occ_t[j]
            if act_kind == ACT_DEMO and occ_match[j] == 0:
                continue
            root = expr_hi[b]
            d = nd[root]
            for i in range(expr_lo[b], expr_hi[b] + 1):
                for k in range(maxd):
                    grads[i, k] = 0.0
            if act_kind == ACT_L2_SQ:
                for k in range(d):
                    grads[root, k] = 2.0 * (vals[j, root, k] - obs_theta[t, k])
            elif seed_mode == 1:
                for k in range(d):
                    grads[root, k] = vals[j, root, k] - obs_theta[t, k]
            else:
                if sig[j] > 0.0:
                    for k in range(d):
                        grads[root, k] = (vals[j, root, k] - obs_theta[t, k]) / sig[j]
            for i in range(expr_hi[b], expr_lo[b] - 1, -1):
                op = ops[i]
                d = nd[i]
                if op == OP_ADD:
                    for k in range(d):
                        grads[a1[i], k] += grads[i, k]
                        grads[a2[i], k] += grads[i, k]
                elif op == OP_SUB:
                    for k in range(d):
                        grads[a1[i], k] += grads[i, k]
                        grads[a2[i], k] -= grads[i, k]
                elif op == OP_SCALE:
                    c = vals[j, a1[i], 0]
                    dot = 0.0
                    for k in range(d):
                        dot += grads[i, k] * vals[j, a2[i], k]
                        grads[a2[i], k] += c * grads[i, k]
                    grads[a1[i], 0] += dot
                elif op == OP_PARAM:
                    for k in range(d):
                        gp[ref[i], k] += grads[i, k]
                elif op == OP_VAR:
                    if i == shadow_node:
                        for k in range(d):
                            gp[shadow_row, k] += grads[i, k]

        # ---- AdaGrad ----
        for r in range(R):
            for k in range(param_dims[r]):
                g = gp[r, k]
                accum[r, k] += g * g
                params[r, k] -= lr * g / (np.sqrt(accum[r, k]) + delta_stab)

        # ---- snap pass ----
        if shadow_node >= 0 and t_read >= 0:
            sd = nd[shadow_node]
            nearest = -1
            bestd = np.inf
            for v in range(V):
                if var_dims[v] != sd:
                    continue
                s = 0.0
                for k in range(sd):
                    diff = params[shadow_row, k] - var_vals[v, t_read, k]
                    s += diff * diff
                if s < bestd:
                    bestd = s
                    nearest = v
            if nearest >= 0 and nearest != bind:
                bind = nearest
                for k in range(sd):
                    params[shadow_row, k] = var_vals[nearest, t_read, k]
                for r in range(R):
                    for k in range(maxd):
                        accum[r, k] = 0.0

    return best_params, best_bind, best_loss, iters, t_read
