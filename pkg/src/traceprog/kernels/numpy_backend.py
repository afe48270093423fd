"""Pure-numpy fallback for the inner optimisation loop.

Vectorised over occurrences (one row per executed body expression per
timestep); iteration-level control flow stays in Python.  Decision-for-
decision equivalent to the numba kernel.
"""

from __future__ import annotations

import numpy as np

OP_CONST, OP_PARAM, OP_VAR, OP_ADD, OP_SUB, OP_SCALE = range(6)
ACT_L2, ACT_L2_SQ, ACT_DEMO = 0, 1, 2
LEN_ZERO, LEN_SQDIFF = 0, 1


def _forward(ops, a1, a2, ref, nd, expr_lo, expr_hi, occ_expr, occ_t,
             occ_scored, occ_match, const_vals, var_vals, obs_theta,
             params, shadow_node, bind, act_kind, d_max, e_max, T):
    """Evaluate every occurrence; returns node values, per-occurrence sigma,
    and the index of the first aborting occurrence (or J)."""
    n = ops.shape[0]
    J = occ_expr.shape[0]
    maxd = params.shape[1]
    tc = np.minimum(occ_t, T - 1) if T > 0 else np.zeros_like(occ_t)
    vals = np.zeros((n, J, maxd))
    for i in range(n):
        op = ops[i]
        if op == OP_CONST:
            vals[i] = const_vals[ref[i]]
        elif op == OP_PARAM:
            vals[i] = params[ref[i]]
        elif op == OP_VAR:
            vi = bind if i == shadow_node else ref[i]
            vals[i] = var_vals[vi, tc, :]
        elif op == OP_ADD:
            vals[i] = vals[a1[i]] + vals[a2[i]]
        elif op == OP_SUB:
            vals[i] = vals[a1[i]] - vals[a2[i]]
        else:
            vals[i] = vals[a1[i], :, 0:1] * vals[a2[i]]

    sig = np.zeros(J)
    scored = occ_scored.astype(bool)
    if scored.any():
        roots = expr_hi[occ_expr]
        theta_hat = vals[roots, np.arange(J), :]
        resid = theta_hat - obs_theta[np.minimum(occ_t, max(T - 1, 0))]
        s = np.einsum("jk,jk->j", resid, resid)
        if act_kind == ACT_L2_SQ:
            sig_all = s
        else:
            sig_all = np.sqrt(s)
        if act_kind == ACT_DEMO:
            sig_all = np.where(occ_match.astype(bool), sig_all, d_max)
        sig[scored] = sig_all[scored]

    over = scored & (sig > e_max)
    abort_at = int(np.argmax(over)) if over.any() else J
    return vals, sig, abort_at


def forward_loss(ops, a1, a2, ref, nd, expr_lo, expr_hi, occ_expr, occ_t,
                 occ_scored, occ_match, const_vals, var_vals, obs_theta,
                 params, shadow_node, bind, act_kind, len_kind,
                 d_max, e_max, T):
    """Loss of a single forward pass (with abort semantics)."""
    J = occ_expr.shape[0]
    _, sig, abort_at = _forward(
        ops, a1, a2, ref, nd, expr_lo, expr_hi, occ_expr, occ_t, occ_scored,
        occ_match, const_vals, var_vals, obs_theta, params, shadow_node, bind,
        act_kind, d_max, e_max, T)
    texec = J if abort_at == J else abort_at + 1
    executed = np.arange(J) < texec
    loss = float(np.sum(sig[executed & occ_scored.astype(bool)]))
    if len_kind == LEN_SQDIFF:
        loss += float(texec - T) ** 2
    return loss


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

    accum = np.zeros((R, maxd))
    best_params = params.copy()
    best_bind = bind = shadow_bind
    best_loss = np.inf
    t_read = shadow_t
    no_improve = 0
    iters = 0
    scored = occ_scored.astype(bool)
    occ_idx = np.arange(J)
    dim_mask = np.zeros((R, maxd), dtype=bool)
    for r in range(R):
        dim_mask[r, :param_dims[r]] = True

    for _ in range(max_iter):
        iters += 1
        vals, sig, abort_at = _forward(
            ops, a1, a2, ref, nd, expr_lo, expr_hi, occ_expr, occ_t,
            occ_scored, occ_match, const_vals, var_vals, obs_theta,
            params, shadow_node, bind, act_kind, d_max, e_max, T)
        texec = J if abort_at == J else abort_at + 1
        executed = occ_idx < texec
        loss = float(np.sum(sig[executed & scored]))
        if len_kind == LEN_SQDIFF:
            loss += float(texec - T) ** 2

        if shadow_node >= 0 and T > 0:
            reads = occ_idx[executed & (occ_expr == shadow_expr)]
            if reads.size:
                t_read = int(min(occ_t[reads[-1]], T - 1))

        if loss < best_loss:
            best_loss = loss
            best_bind = bind
            best_params = params.copy()
            no_improve = 0
        else:
            no_improve += 1
        if loss <= exit_loss or no_improve >= patience:
            break

        # ---- backward (vectorised over occurrences) ----
        live = executed & scored
        if act_kind == ACT_DEMO:
            live = live & occ_match.astype(bool)
        grads = np.zeros((n, J, maxd))
        roots = expr_hi[occ_expr]
        theta_hat = vals[roots, occ_idx, :]
        resid = theta_hat - obs_theta[np.minimum(occ_t, max(T - 1, 0))]
        if act_kind == ACT_L2_SQ:
            seed = 2.0 * resid
        elif seed_mode == 1:
            seed = resid.copy()
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                seed = np.where((sig > 0.0)[:, None], resid / np.where(sig > 0.0, sig, 1.0)[:, None], 0.0)
        seed[~live] = 0.0
        for b in range(expr_lo.shape[0]):
            rows = occ_expr == b
            grads[expr_hi[b], rows, :] = seed[rows]
        gp = np.zeros((R, maxd))
        for i in range(n - 1, -1, -1):
            op = ops[i]
            g = grads[i]
            if op == OP_ADD:
                grads[a1[i]] += g
                grads[a2[i]] += g
            elif op == OP_SUB:
                grads[a1[i]] += g
                grads[a2[i]] -= g
            elif op == OP_SCALE:
                grads[a1[i], :, 0] += np.einsum("jk,jk->j", g, vals[a2[i]])
                grads[a2[i]] += vals[a1[i], :, 0:1] * g
            elif op == OP_PARAM:
                gp[ref[i]] += g.sum(axis=0)
            elif op == OP_VAR and i == shadow_node:
                gp[shadow_row] += g.sum(axis=0)

        # ---- AdaGrad ----
        accum[dim_mask] += gp[dim_mask] ** 2
        params[dim_mask] -= lr * gp[dim_mask] / (np.sqrt(accum[dim_mask]) + delta_stab)

        # ---- snap pass ----
        if shadow_node >= 0 and t_read >= 0:
            sd = nd[shadow_node]
            candidates = np.flatnonzero(var_dims == sd)
            if candidates.size:
                diffs = var_vals[candidates, t_read, :sd] - params[shadow_row, :sd]
                nearest = int(candidates[np.argmin(np.einsum("ij,ij->i", diffs, diffs))])
                if nearest != bind:
                    bind = nearest
                    params[shadow_row, :sd] = var_vals[nearest, t_read, :sd]
                    accum[:, :] = 0.0

    return best_params, best_bind, best_loss, iters, t_read
