"""Independent reimplementations used as test oracles.

Nothing here imports the production forward paths; every quantity is
recomputed from the parameter arrays directly, either with flat numpy
expressions (fast, for finite-difference checks) or with pure scalar loops
(slow, for tiny instances).
"""

import math

import numpy as np


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def oracle_step_distributions(kind_tag, params, image, tokens, embed_override=None):
    """Softmax distribution per prediction step via a plain recurrence.

    kind_tag is one of 'init' | 'pre' | 'par' | 'merge'; tokens must begin
    with START and the last token is target-only. embed_override=(position,
    vector) replaces the word-embedding input consumed at that prediction
    step only.
    """
    image = np.asarray(image, dtype=float)
    proj = np.tanh(params.W_img @ image + params.b_img)

    xs = []
    for t, tok in enumerate(tokens[:-1]):
        e = np.array(params.E[tok], dtype=float)
        if embed_override is not None and embed_override[0] == t:
            e = np.asarray(embed_override[1], dtype=float)
        xs.append(e)

    h = proj.copy() if kind_tag == "init" else np.zeros(params.h)
    inputs = [("image", proj)] if kind_tag == "pre" else []
    inputs += [("word", x) for x in xs]

    dists = []
    for role, x in inputs:
        if kind_tag == "par" and role == "word":
            x = np.concatenate([x, proj])
        z = _sig(params.Wz @ x + params.Uz @ h + params.bz)
        r = _sig(params.Wr @ x + params.Ur @ h + params.br)
        c = np.tanh(params.Wc @ x + params.Uc @ (r * h) + params.bc)
        h = (1.0 - z) * h + z * c
        if role == "image":
            continue  # the image step emits no prediction
        mm = np.concatenate([h, proj]) if kind_tag == "merge" else h
        logits = params.W_out @ mm + params.b_out
        ex = np.exp(logits - logits.max())
        dists.append(ex / ex.sum())
    return dists


def oracle_next_prob(kind_tag, params, image, tokens, position, embed_override=None):
    """p(tokens[position+1]) at one prediction position."""
    dists = oracle_step_distributions(kind_tag, params, image, tokens, embed_override)
    return float(dists[position][tokens[position + 1]])


def scalar_gru_step(params, x, h_prev):
    """GRU update evaluated with pure python scalar loops."""
    H = params.h
    x = [float(v) for v in x]
    hp = [float(v) for v in h_prev]

    def affine(W, U, b, hvec):
        out = []
        for i in range(H):
            s = float(b[i])
            for j, xj in enumerate(x):
                s += float(W[i][j]) * xj
            for j, hj in enumerate(hvec):
                s += float(U[i][j]) * hj
            out.append(s)
        return out

    z = [1.0 / (1.0 + math.exp(-v)) for v in affine(params.Wz, params.Uz, params.bz, hp)]
    r = [1.0 / (1.0 + math.exp(-v)) for v in affine(params.Wr, params.Ur, params.br, hp)]
    rh = [r[i] * hp[i] for i in range(H)]
    c = [math.tanh(v) for v in affine(params.Wc, params.Uc, params.bc, rh)]
    return [(1.0 - z[i]) * hp[i] + z[i] * c[i] for i in range(H)]


def scalar_replay_probs(kind_tag, params, image, tokens):
    """Per-step softmax lists via scalar loops; for very small instances only."""
    pw = params.W_img.shape[0]
    proj = []
    for i in range(pw):
        s = float(params.b_img[i])
        for j, vj in enumerate(image):
            s += float(params.W_img[i][j]) * float(vj)
        proj.append(math.tanh(s))

    h = list(proj) if kind_tag == "init" else [0.0] * params.h
    if kind_tag == "pre":
        h = scalar_gru_step(params, proj, h)

    probs = []
    for tok in tokens[:-1]:
        e = [float(v) for v in params.E[tok]]
        x = e + proj if kind_tag == "par" else e
        h = scalar_gru_step(params, x, h)
        mm = h + proj if kind_tag == "merge" else h
        logits = []
        for i in range(params.V):
            s = float(params.b_out[i])
            for j, mj in enumerate(mm):
                s += float(params.W_out[i][j]) * mj
            logits.append(s)
        mx = max(logits)
        exps = [math.exp(v - mx) for v in logits]
        tot = sum(exps)
        probs.append([v / tot for v in exps])
    return probs
